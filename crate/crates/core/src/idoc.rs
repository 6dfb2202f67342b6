//! Linear-time backward pass.
//!
//! The trajectory Jacobian is
//! `Dξ = H⁻¹Aᵀ(AH⁻¹Aᵀ)⁻¹(AH⁻¹B − C) − H⁻¹B`, evaluated as
//! `Y ← H⁻¹Aᵀ`, `S ← AY`, `R ← A(H⁻¹B) − C`, `Z ← S⁻¹R`, `Dξ ← YZ − H⁻¹B`
//! with `S` block tridiagonal. The vector-Jacobian product is evaluated left
//! to right: `w = H⁻¹v`, `z = S⁻¹Aw`, `vᵀDξ = (H⁻¹Aᵀz − w)ᵀB − zᵀC`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{rank_error, split_rows, BlockBandedA, BlockDiagonal, KktBlocks};
use crate::blocktri::{factor_hessian, schur_from_products, schur_products, BlockThomasFactor, BlockTridiagonalSolver};
use crate::error::{Error, Result};
use crate::linalg::{cast_matrix, cast_vector, BlockFactor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    FullJacobian,
    Vjp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BackwardOptions {
    /// Adds `δ/2` to every Hessian block diagonal; zero disables it.
    pub prox_delta: f64,
    pub mode: Mode,
    pub precision: Precision,
}

/// `H + (δ/2) I` blockwise.
pub fn regularize_hessian<T: Real>(h: &BlockDiagonal<T>, delta: f64) -> BlockDiagonal<T> {
    let shift = T::of_f64(delta / 2.0);
    BlockDiagonal::new(
        h.blocks
            .iter()
            .map(|b| {
                let mut b = b.clone();
                for i in 0..b.nrows() {
                    b[(i, i)] += shift;
                }
                b
            })
            .collect(),
    )
}

/// The `d`-independent part of the backward pass: Hessian factors,
/// `H⁻¹Aᵀ` and the factored Schur complement.
pub struct PreparedBackward<'a, T: Real> {
    a: &'a BlockBandedA<T>,
    factors: Vec<BlockFactor<T>>,
    yr: Vec<DMatrix<T>>,
    yl: Vec<DMatrix<T>>,
    schur: BlockThomasFactor<T>,
}

/// Result of the adjoint solve: `p = H⁻¹Aᵀz − w` per column block and `z = S⁻¹Aw` per row block.
#[derive(Debug, Clone)]
pub struct Adjoint<T: Real> {
    pub p: Vec<DVector<T>>,
    pub z: Vec<DVector<T>>,
}

impl<'a, T: Real> PreparedBackward<'a, T> {
    pub fn new(h: &BlockDiagonal<T>, a: &'a BlockBandedA<T>, prox_delta: f64) -> Result<Self> {
        if prox_delta < 0.0 || !prox_delta.is_finite() {
            return Err(Error::Invalid(format!("prox_delta must be finite and ≥ 0, got {prox_delta}")));
        }
        a.check_against(h)?;
        let factors = if prox_delta > 0.0 {
            factor_hessian(&regularize_hessian(h, prox_delta))?
        } else {
            factor_hessian(h)?
        };
        let y = schur_products(&factors, a);
        let s = schur_from_products(a, &y);
        let schur = match s.factor() {
            Ok(f) => f,
            Err(e) => return Err(rank_error(a).unwrap_or(e)),
        };
        Ok(Self {
            a,
            factors,
            yr: y.yr,
            yl: y.yl,
            schur,
        })
    }

    pub fn horizon(&self) -> usize {
        self.a.horizon()
    }

    pub fn schur_factor(&self) -> &BlockThomasFactor<T> {
        &self.schur
    }

    pub fn hessian_factors(&self) -> &[BlockFactor<T>] {
        &self.factors
    }

    /// `(Dξ, Dλ)` blocks for the given `B` and `C` blocks (any column count).
    pub fn solve(&self, b: &[DMatrix<T>], c: &[DMatrix<T>]) -> Result<(Vec<DMatrix<T>>, Vec<DMatrix<T>>)> {
        let horizon = self.horizon();
        if b.len() != horizon + 1 || c.len() != horizon + 2 {
            return Err(Error::DimensionMismatch {
                what: "right-hand side block count",
                index: None,
                expected: horizon + 1,
                found: b.len(),
            });
        }
        let w: Vec<DMatrix<T>> = self.factors.par_iter().zip(b).map(|(f, bj)| f.solve(bj)).collect();
        let r: Vec<DMatrix<T>> = (0..horizon + 2)
            .into_par_iter()
            .map(|k| {
                let mut rk = -c[k].clone();
                if let Some(l) = self.a.left(k) {
                    rk += l * &w[k - 1];
                }
                if let Some(rt) = self.a.right(k) {
                    rk += rt * &w[k];
                }
                rk
            })
            .collect();
        let z = self.schur.solve_blocks(&r);
        let dxi: Vec<DMatrix<T>> = (0..=horizon)
            .into_par_iter()
            .map(|j| &self.yr[j] * &z[j] + &self.yl[j] * &z[j + 1] - &w[j])
            .collect();
        Ok((dxi, z))
    }

    /// Adjoint vectors for an outer-loss gradient `v` split into column blocks.
    pub fn vjp_adjoint(&self, v: &[DVector<T>]) -> Adjoint<T> {
        let horizon = self.horizon();
        let w: Vec<DVector<T>> = self.factors.par_iter().zip(v).map(|(f, vj)| f.solve_vector(vj)).collect();
        let a: Vec<DVector<T>> = (0..horizon + 2)
            .map(|k| {
                let mut ak = DVector::zeros(self.a.row_block_size(k));
                if let Some(l) = self.a.left(k) {
                    ak += l * &w[k - 1];
                }
                if let Some(rt) = self.a.right(k) {
                    ak += rt * &w[k];
                }
                ak
            })
            .collect();
        let z = self.schur.solve_vector(&a);
        let p = (0..=horizon)
            .into_par_iter()
            .map(|j| &self.yr[j] * &z[j] + &self.yl[j] * &z[j + 1] - &w[j])
            .collect();
        Adjoint { p, z }
    }
}

/// `Σ_j B_jᵀ p_j − Σ_k C_kᵀ z_k`.
pub fn contract<T: Real>(adj: &Adjoint<T>, b: &[DMatrix<T>], c: &[DMatrix<T>], d: usize) -> DVector<T> {
    let from_b = b
        .par_iter()
        .zip(&adj.p)
        .map(|(bj, pj)| bj.tr_mul(pj))
        .reduce(|| DVector::zeros(d), |x, y| x + y);
    let from_c = c
        .par_iter()
        .zip(&adj.z)
        .map(|(ck, zk)| ck.tr_mul(zk))
        .reduce(|| DVector::zeros(d), |x, y| x + y);
    from_b - from_c
}

fn stack_rows<T: Real>(blocks: &[DMatrix<T>], cols: usize) -> DMatrix<T> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.nrows()).copy_from(b);
        off += b.nrows();
    }
    out
}

fn derivative_in<T: Real>(blocks: &KktBlocks<T>, prox_delta: f64) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let prepared = PreparedBackward::new(&blocks.h, &blocks.a, prox_delta)?;
    let (dxi, dlam) = prepared.solve(&blocks.b, &blocks.c)?;
    Ok((stack_rows(&dxi, blocks.d), stack_rows(&dlam, blocks.d)))
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, t: 0 })
    }
}

/// `(Dξ, Dλ)` by the structured elimination, in the requested precision.
pub fn trajectory_and_multiplier_derivative(
    blocks: &KktBlocks<f64>,
    opts: &BackwardOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    blocks.check()?;
    let (dxi, dlam) = match opts.precision {
        Precision::Double => derivative_in(blocks, opts.prox_delta)?,
        Precision::Single => {
            let (x, l) = derivative_in(&blocks.cast::<f32>(), opts.prox_delta)?;
            (cast_matrix(&x), cast_matrix(&l))
        }
    };
    check_finite(&dxi, "trajectory derivative")?;
    Ok((dxi, dlam))
}

/// `Dξ(θ)`, an `n_ξ × d` matrix.
pub fn trajectory_derivative(blocks: &KktBlocks<f64>, opts: &BackwardOptions) -> Result<DMatrix<f64>> {
    trajectory_and_multiplier_derivative(blocks, opts).map(|(dxi, _)| dxi)
}

fn vjp_in<T: Real>(blocks: &KktBlocks<T>, v: &DVector<T>, prox_delta: f64) -> Result<DVector<T>> {
    let prepared = PreparedBackward::new(&blocks.h, &blocks.a, prox_delta)?;
    let v_blocks = split_rows(v, &blocks.a.col_sizes());
    let adj = prepared.vjp_adjoint(&v_blocks);
    Ok(contract(&adj, &blocks.b, &blocks.c, blocks.d))
}

/// `vᵀ Dξ(θ)` without forming `Dξ`.
pub fn vjp(v: &DVector<f64>, blocks: &KktBlocks<f64>, opts: &BackwardOptions) -> Result<DVector<f64>> {
    blocks.check()?;
    if v.len() != blocks.n_xi() {
        return Err(Error::DimensionMismatch {
            what: "loss gradient",
            index: None,
            expected: blocks.n_xi(),
            found: v.len(),
        });
    }
    let g = match opts.precision {
        Precision::Double => vjp_in(blocks, v, opts.prox_delta)?,
        Precision::Single => cast_vector(&vjp_in(&blocks.cast::<f32>(), &cast_vector(v), opts.prox_delta)?),
    };
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "vector-Jacobian product",
            t: 0,
        });
    }
    Ok(g)
}

/// Gradient of an outer loss through either mode.
pub fn loss_gradient(v: &DVector<f64>, blocks: &KktBlocks<f64>, opts: &BackwardOptions) -> Result<DVector<f64>> {
    match opts.mode {
        Mode::Vjp => vjp(v, blocks, opts),
        Mode::FullJacobian => Ok(trajectory_derivative(blocks, opts)?.tr_mul(v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocktri::dense_kkt_solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random equality-constrained blocks with PD Hessians and one extra
    /// equality row at t = 1.
    pub(crate) fn random_blocks(seed: u64, n: usize, m: usize, horizon: usize, d: usize) -> KktBlocks<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let sizes: Vec<usize> = (0..=horizon).map(|t| if t < horizon { n + m } else { n }).collect();
        let h = sizes
            .iter()
            .map(|&s| {
                let x = g(s, s);
                &x * x.transpose() + DMatrix::identity(s, s)
            })
            .collect();
        let extra = |t: usize| usize::from(t == 1);
        let mut diag = Vec::new();
        let mut sub = Vec::new();
        for t in 0..=horizon {
            let dyn_rows = if t < horizon { n } else { 0 };
            diag.push(g(extra(t) + dyn_rows, sizes[t]));
            if t < horizon {
                let mut s = DMatrix::zeros(extra(t) + n, sizes[t + 1]);
                for i in 0..n {
                    s[(extra(t) + i, i)] = 1.0;
                }
                sub.push(s);
            }
        }
        let mut init = DMatrix::zeros(n, sizes[0]);
        for i in 0..n {
            init[(i, i)] = 1.0;
        }
        let a = BlockBandedA {
            init_block: init,
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
        let blocks = random_blocks(1, 3, 2, 5, 4);
        let (dense, dlam_dense) = dense_kkt_solve(&blocks).unwrap();
        let (dxi, dlam) = trajectory_and_multiplier_derivative(&blocks, &BackwardOptions::default()).unwrap();
        assert!((&dxi - &dense).amax() <= 1e-9, "{}", (&dxi - &dense).amax());
        assert!((&dlam - &dlam_dense).amax() <= 1e-8);
    }

    #[test]
    fn constant_cost_shift_gives_zero_derivative() {
        let mut blocks = random_blocks(2, 2, 1, 4, 3);
        for b in &mut blocks.b {
            b.fill(0.0);
        }
        for c in &mut blocks.c {
            c.fill(0.0);
        }
        let dxi = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
        assert_eq!(dxi.amax(), 0.0);
    }

    #[test]
    fn vjp_agrees_with_full_jacobian() {
        let blocks = random_blocks(3, 3, 2, 5, 4);
        let dxi = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let v = DVector::from_fn(blocks.n_xi(), |_, _| rng.random_range(-1.0..1.0));
            let direct = vjp(&v, &blocks, &BackwardOptions::default()).unwrap();
            let reference = dxi.tr_mul(&v);
            let rel = (&direct - &reference).amax() / reference.amax().max(1e-300);
            assert!(rel <= 1e-10, "relative error {rel}");
        }
        let zero = vjp(&DVector::zeros(blocks.n_xi()), &blocks, &BackwardOptions::default()).unwrap();
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn regularization_shifts_spectrum() {
        let h = BlockDiagonal::new(vec![DMatrix::<f64>::zeros(3, 3), DMatrix::zeros(2, 2)]);
        let r = regularize_hessian(&h, 2.0);
        assert_eq!(r.blocks[0], DMatrix::identity(3, 3));
        let blocks = random_blocks(4, 2, 1, 2, 1);
        let b0 = &blocks.h.blocks[0];
        let shifted = regularize_hessian(&regularize_hessian(&blocks.h, 0.3), 0.5);
        let e0 = b0.clone().symmetric_eigen().eigenvalues;
        let e1 = shifted.blocks[0].clone().symmetric_eigen().eigenvalues;
        let mut a: Vec<f64> = e0.iter().map(|x| x + 0.4).collect();
        let mut b: Vec<f64> = e1.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_block_errors_and_recommends_regularization() {
        let mut blocks = random_blocks(5, 2, 1, 3, 2);
        blocks.h.blocks[3] = DMatrix::zeros(2, 2);
        let err = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularHessian { t: 3, .. }), "{err}");
        assert!(err.to_string().contains("prox_delta"));
        let ok = trajectory_derivative(
            &blocks,
            &BackwardOptions {
                prox_delta: 1e-6,
                ..Default::default()
            },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn single_precision_close_to_double() {
        let blocks = random_blocks(6, 3, 2, 8, 3);
        let d64 = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
        let d32 = trajectory_derivative(
            &blocks,
            &BackwardOptions {
                precision: Precision::Single,
                ..Default::default()
            },
        )
        .unwrap();
        let mae = (d64 - d32).abs().mean();
        assert!(mae < 1e-3, "{mae}");
    }
}
