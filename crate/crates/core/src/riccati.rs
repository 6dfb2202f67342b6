//! Baseline backward pass by Riccati recursion on an auxiliary LQR problem.
//!
//! When the only constraints are the initial state and the dynamics, the
//! differential KKT system is the optimality system of
//!
//! ```text
//! min  Σ_t ½ δz_tᵀ H_t δz_t + δz_tᵀ B_t
//! s.t. δx₀ = −C₀,  δx_{t+1} = F_t δz_t + e_t,  F_t = −D_{ξ_t} r_t,  e_t = −C_{t+1}
//! ```
//!
//! with every column of `B` and `C` an independent right-hand side. A
//! backward sweep computes value matrices `P_t`, `p_t` and gains `K_t`, `k_t`;
//! a forward rollout recovers `Dξ`.

use nalgebra::DMatrix;

use crate::blocks::KktBlocks;
use crate::error::{Error, Result};
use crate::idoc::Precision;
use crate::linalg::{cast_matrix, BlockFactor, Real};

/// Auxiliary LQR data extracted from the KKT blocks.
#[derive(Debug, Clone)]
pub struct AuxiliaryLqr<T: Real> {
    pub n: usize,
    pub m: usize,
    /// `H_t`, partitioned as `[[xx, xu], [ux, uu]]` for `t < T`.
    pub cost: Vec<DMatrix<T>>,
    /// `B_t`, `d` columns.
    pub linear: Vec<DMatrix<T>>,
    /// `F_t = [F_x F_u]`.
    pub dynamics: Vec<DMatrix<T>>,
    /// `e_t`, `d` columns.
    pub offset: Vec<DMatrix<T>>,
    /// `δx₀`, `d` columns.
    pub x0: DMatrix<T>,
}

impl<T: Real> AuxiliaryLqr<T> {
    pub fn from_blocks(blocks: &KktBlocks<T>) -> Result<Self> {
        blocks.check()?;
        let (n, horizon) = (blocks.n, blocks.horizon);
        let a = &blocks.a;
        for t in 0..horizon {
            if a.diag[t].nrows() != n || !is_padded_identity(&a.sub[t], n) {
                return Err(Error::Unsupported(format!(
                    "the Riccati backward pass needs dynamics-only constraints, but residual block {t} has {} rows",
                    a.diag[t].nrows()
                )));
            }
        }
        if a.diag[horizon].nrows() != 0 {
            return Err(Error::Unsupported(format!(
                "the Riccati backward pass cannot handle {} terminal constraint rows",
                a.diag[horizon].nrows()
            )));
        }
        if !is_padded_identity(&a.init_block, n) {
            return Err(Error::Unsupported("initial-state block must be [I 0]".into()));
        }
        Ok(Self {
            n,
            m: blocks.m,
            cost: blocks.h.blocks.clone(),
            linear: blocks.b.clone(),
            dynamics: a.diag[..horizon].iter().map(|d| -d.clone()).collect(),
            offset: blocks.c[1..=horizon].iter().map(|c| -c.clone()).collect(),
            x0: -blocks.c[0].clone(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.len()
    }

    /// Backward sweep then forward rollout; returns `Dξ` stacked by timestep.
    pub fn solve(&self) -> Result<DMatrix<T>> {
        let (n, m, horizon) = (self.n, self.m, self.horizon());
        let d = self.x0.ncols();
        let mut p_mat = self.cost[horizon].clone();
        let mut p_vec = self.linear[horizon].clone();
        let mut gains = Vec::with_capacity(horizon);
        for t in (0..horizon).rev() {
            let f = &self.dynamics[t];
            let pf = &p_mat * f;
            let mut big = &self.cost[t] + f.tr_mul(&pf);
            crate::linalg::symmetrize(&mut big);
            let g = &self.linear[t] + f.tr_mul(&(&p_mat * &self.offset[t] + &p_vec));
            let muu = big.view((n, n), (m, m)).into_owned();
            let mux = big.view((n, 0), (m, n)).into_owned();
            let mxu = big.view((0, n), (n, m)).into_owned();
            let mxx = big.view((0, 0), (n, n)).into_owned();
            let fac = BlockFactor::new(&muu).map_err(|rcond| Error::SingularRecursion { t, rcond })?;
            let k_mat = -fac.solve(&mux);
            let k_vec = -fac.solve(&g.rows(n, m).into_owned());
            p_mat = &mxx + &mxu * &k_mat;
            crate::linalg::symmetrize(&mut p_mat);
            p_vec = g.rows(0, n).into_owned() + &mxu * &k_vec;
            gains.push((k_mat, k_vec));
        }
        gains.reverse();
        let mut out = DMatrix::zeros((n + m) * horizon + n, d);
        let mut x = self.x0.clone();
        for (t, (k_mat, k_vec)) in gains.iter().enumerate() {
            let u = k_mat * &x + k_vec;
            let off = (n + m) * t;
            out.rows_mut(off, n).copy_from(&x);
            out.rows_mut(off + n, m).copy_from(&u);
            let f = &self.dynamics[t];
            x = f.columns(0, n) * &x + f.columns(n, m) * &u + &self.offset[t];
        }
        out.rows_mut((n + m) * horizon, n).copy_from(&x);
        Ok(out)
    }
}

fn is_padded_identity<T: Real>(b: &DMatrix<T>, n: usize) -> bool {
    if b.nrows() != n || b.ncols() < n {
        return false;
    }
    (0..n).all(|i| (0..b.ncols()).all(|j| b[(i, j)] == if i == j { T::one() } else { T::zero() }))
}

/// `Dξ` by Riccati recursion, in double precision.
pub fn riccati_trajectory_derivative(blocks: &KktBlocks<f64>) -> Result<DMatrix<f64>> {
    AuxiliaryLqr::from_blocks(blocks)?.solve()
}

pub fn riccati_trajectory_derivative_with(blocks: &KktBlocks<f64>, precision: Precision) -> Result<DMatrix<f64>> {
    let dxi = match precision {
        Precision::Double => riccati_trajectory_derivative(blocks)?,
        Precision::Single => cast_matrix(&AuxiliaryLqr::from_blocks(&blocks.cast::<f32>())?.solve()?),
    };
    if dxi.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "Riccati trajectory derivative",
            t: 0,
        });
    }
    Ok(dxi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockBandedA, BlockDiagonal};
    use crate::blocktri::dense_kkt_solve;
    use crate::idoc::{trajectory_derivative, BackwardOptions};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lqr_blocks(seed: u64, n: usize, m: usize, horizon: usize, d: usize, terminal_rows: usize) -> KktBlocks<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let sizes: Vec<usize> = (0..=horizon).map(|t| if t < horizon { n + m } else { n }).collect();
        let h = sizes
            .iter()
            .map(|&s| {
                let x = g(s, s);
                &x * x.transpose() + DMatrix::identity(s, s) * 0.5
            })
            .collect();
        let mut diag: Vec<DMatrix<f64>> = (0..horizon).map(|t| g(n, sizes[t])).collect();
        diag.push(g(terminal_rows, n));
        let sub = (0..horizon)
            .map(|t| DMatrix::identity(n, sizes[t + 1]))
            .collect();
        let a = BlockBandedA {
            init_block: DMatrix::identity(n, n + m),
            diag,
            sub,
        };
        let b = sizes.iter().map(|&s| g(s, d)).collect();
        let c = a.row_sizes().iter().map(|&r| g(r, d)).collect();
        KktBlocks {
            n,
            m,
            horizon,
            d,
            h: BlockDiagonal::new(h),
            a,
            b,
            c,
            lambda: DVector::zeros(0),
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let blocks = lqr_blocks(1, 2, 1, 5, 3, 0);
        let (dense, _) = dense_kkt_solve(&blocks).unwrap();
        let ric = riccati_trajectory_derivative(&blocks).unwrap();
        assert!((ric - dense).amax() <= 1e-9);
    }

    #[test]
    fn agrees_with_idoc() {
        let blocks = lqr_blocks(2, 4, 2, 30, 5, 0);
        let ric = riccati_trajectory_derivative(&blocks).unwrap();
        let idoc = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
        assert!((&ric - &idoc).amax() <= 1e-7 * (1.0 + idoc.amax()));
    }

    #[test]
    fn rejects_path_constraints() {
        let blocks = lqr_blocks(3, 2, 1, 3, 2, 1);
        assert!(matches!(riccati_trajectory_derivative(&blocks), Err(Error::Unsupported(_))));
    }

    #[test]
    fn singular_control_block_names_timestep() {
        let mut blocks = lqr_blocks(4, 2, 1, 3, 2, 0);
        for t in 0..3 {
            blocks.h.blocks[t].row_mut(2).fill(0.0);
            blocks.h.blocks[t].column_mut(2).fill(0.0);
            blocks.a.diag[t].column_mut(2).fill(0.0);
        }
        match riccati_trajectory_derivative(&blocks) {
            Err(Error::SingularRecursion { t, .. }) => assert_eq!(t, 2),
            other => panic!("expected singular recursion, got {other:?}"),
        }
    }
}
