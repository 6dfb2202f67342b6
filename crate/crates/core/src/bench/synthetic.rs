//! Random equality-constrained KKT instances with controlled Hessian conditioning.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockBandedA, BlockDiagonal, KktBlocks};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub horizon: usize,
    /// Target condition number of every Hessian block.
    pub kappa: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 50,
            m: 10,
            d: 100,
            horizon: 100,
            kappa: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 || self.horizon == 0 {
            return Err(Error::Invalid(format!(
                "synthetic dimensions must be positive, got n={}, m={}, d={}, T={}",
                self.n, self.m, self.d, self.horizon
            )));
        }
        if !(self.kappa >= 1.0 && self.kappa.is_finite()) {
            return Err(Error::Invalid(format!("kappa must be finite and ≥ 1, got {}", self.kappa)));
        }
        Ok(())
    }

    fn stage_sizes(&self) -> Vec<usize> {
        (0..=self.horizon)
            .map(|t| if t < self.horizon { self.n + self.m } else { self.n })
            .collect()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Everything but the parameter columns, plus an outer-loss gradient `v`.
#[derive(Debug, Clone)]
pub struct SyntheticStructure {
    pub h: BlockDiagonal<f64>,
    pub a: BlockBandedA<f64>,
    pub v: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub blocks: KktBlocks<f64>,
    pub v: DVector<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Symmetric positive definite block with the eigenvectors of a symmetrized
/// Gaussian draw and eigenvalues spread log-uniformly over `[1, κ]`.
fn conditioned_block(rng: &mut ChaCha8Rng, size: usize, kappa: f64) -> DMatrix<f64> {
    let g = gaussian(rng, size, size);
    let sym = (&g + g.transpose()) * 0.5;
    let q = SymmetricEigen::new(sym).eigenvectors;
    let lambda = DVector::from_fn(size, |i, _| match i {
        0 => 1.0,
        _ if i + 1 == size => kappa,
        _ => kappa.powf(rng.random::<f64>()),
    });
    let mut h = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    crate::linalg::symmetrize(&mut h);
    h
}

pub fn generate_structure(spec: &SyntheticSpec) -> Result<SyntheticStructure> {
    spec.validate()?;
    let (n, horizon) = (spec.n, spec.horizon);
    let sizes = spec.stage_sizes();
    let mut rng = spec.rng(0);
    let h = sizes.iter().map(|&s| conditioned_block(&mut rng, s, spec.kappa)).collect();
    let mut diag: Vec<DMatrix<f64>> = (0..horizon)
        .map(|t| {
            let g = gaussian(&mut rng, n, sizes[t]);
            let norm = g.clone().singular_values().max();
            g / norm
        })
        .collect();
    diag.push(DMatrix::zeros(0, n));
    let sub = (0..horizon).map(|t| DMatrix::identity(n, sizes[t + 1])).collect();
    let a = BlockBandedA {
        init_block: DMatrix::identity(n, sizes[0]),
        diag,
        sub,
    };
    let n_xi: usize = sizes.iter().sum();
    let v = DVector::from_fn(n_xi, |_, _| StandardNormal.sample(&mut rng));
    Ok(SyntheticStructure {
        h: BlockDiagonal::new(h),
        a,
        v,
    })
}

/// Parameter columns `start .. start + count` of `B` and `C`; each column
/// has its own random stream, so chunks agree with a full generation.
pub fn generate_columns(spec: &SyntheticSpec, a: &BlockBandedA<f64>, start: usize, count: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let sizes = spec.stage_sizes();
    let rows = a.row_sizes();
    let mut b: Vec<DMatrix<f64>> = sizes.iter().map(|&s| DMatrix::zeros(s, count)).collect();
    let mut c: Vec<DMatrix<f64>> = rows.iter().map(|&r| DMatrix::zeros(r, count)).collect();
    for j in 0..count {
        let mut rng = spec.rng(1 + (start + j) as u64);
        for blk in b.iter_mut().chain(c.iter_mut()) {
            for i in 0..blk.nrows() {
                blk[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
    }
    (b, c)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    let s = generate_structure(spec)?;
    let (b, c) = generate_columns(spec, &s.a, 0, spec.d);
    let blocks = KktBlocks {
        n: spec.n,
        m: spec.m,
        horizon: spec.horizon,
        d: spec.d,
        h: s.h,
        a: s.a,
        b,
        c,
        lambda: DVector::zeros(0),
    };
    blocks.check()?;
    Ok(SyntheticInstance { blocks, v: s.v })
}

/// `max|λ| / min|λ|` of a symmetric block.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(h.clone()).eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, x| a.min(x.abs()));
    max / min
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kappa: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: 6,
            m: 3,
            d: 4,
            horizon: 5,
            kappa,
            seed,
        }
    }

    #[test]
    fn blocks_hit_target_condition_number() {
        for kappa in [1.0, 1e2, 1e4, 1e6] {
            let inst = generate_synthetic(&small(kappa, 3)).unwrap();
            for h in &inst.blocks.h.blocks {
                let k = condition_number(h);
                assert!((k / kappa - 1.0).abs() < 0.05, "target {kappa}, got {k}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(10.0, 9)).unwrap();
        let b = generate_synthetic(&small(10.0, 9)).unwrap();
        assert_eq!(a.blocks.b_dense(), b.blocks.b_dense());
        assert_eq!(a.blocks.c_dense(), b.blocks.c_dense());
        assert_eq!(a.blocks.h.to_dense(), b.blocks.h.to_dense());
        assert_eq!(a.v, b.v);
        let c = generate_synthetic(&small(10.0, 10)).unwrap();
        assert_ne!(a.v, c.v);
    }

    #[test]
    fn chunks_match_full_generation() {
        let spec = small(5.0, 1);
        let full = generate_synthetic(&spec).unwrap();
        let (b, c) = generate_columns(&spec, &full.blocks.a, 2, 2);
        for (x, y) in b.iter().zip(&full.blocks.b) {
            assert_eq!(x, &y.columns(2, 2).into_owned());
        }
        for (x, y) in c.iter().zip(&full.blocks.c) {
            assert_eq!(x, &y.columns(2, 2).into_owned());
        }
    }

    #[test]
    fn default_dimensions() {
        let spec = SyntheticSpec::default();
        assert_eq!((spec.n, spec.m), (50, 10));
        assert!(SyntheticSpec { kappa: 0.5, ..spec }.validate().is_err());
    }
}
