//! Block-tridiagonal factor/solve, the Schur complement `A H⁻¹ Aᵀ`, and a
//! dense KKT oracle.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::blocks::{BlockBandedA, BlockDiagonal, KktBlocks};
use crate::error::{Error, Result};
use crate::linalg::{inertia, BlockFactor, Inertia, Real};

/// Square block-tridiagonal matrix with blocks of possibly different sizes.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal<T: Real> {
    pub diag: Vec<DMatrix<T>>,
    /// `off[i]` is block `(i+1, i)`.
    pub off: Vec<DMatrix<T>>,
    /// `upper[i]` is block `(i, i+1)`; ignored when `symmetric`.
    pub upper: Vec<DMatrix<T>>,
    pub symmetric: bool,
}

impl<T: Real> BlockTridiagonal<T> {
    pub fn symmetric(diag: Vec<DMatrix<T>>, off: Vec<DMatrix<T>>) -> Result<Self> {
        let m = Self {
            diag,
            off,
            upper: Vec::new(),
            symmetric: true,
        };
        m.check()?;
        Ok(m)
    }

    pub fn general(diag: Vec<DMatrix<T>>, off: Vec<DMatrix<T>>, upper: Vec<DMatrix<T>>) -> Result<Self> {
        let m = Self {
            diag,
            off,
            upper,
            symmetric: false,
        };
        m.check()?;
        Ok(m)
    }

    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.diag.iter().map(|d| d.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.diag.iter().map(|d| d.nrows()).sum()
    }

    fn check(&self) -> Result<()> {
        let n = self.diag.len();
        if n == 0 {
            return Err(Error::Invalid("block-tridiagonal matrix needs at least one block".into()));
        }
        if self.off.len() + 1 != n {
            return Err(Error::DimensionMismatch {
                what: "off-diagonal block count",
                index: None,
                expected: n - 1,
                found: self.off.len(),
            });
        }
        if !self.symmetric && self.upper.len() + 1 != n {
            return Err(Error::DimensionMismatch {
                what: "upper block count",
                index: None,
                expected: n - 1,
                found: self.upper.len(),
            });
        }
        for (i, d) in self.diag.iter().enumerate() {
            if d.nrows() != d.ncols() {
                return Err(Error::DimensionMismatch {
                    what: "diagonal block columns",
                    index: Some(i),
                    expected: d.nrows(),
                    found: d.ncols(),
                });
            }
        }
        for (i, l) in self.off.iter().enumerate() {
            if l.nrows() != self.diag[i + 1].nrows() || l.ncols() != self.diag[i].nrows() {
                return Err(Error::DimensionMismatch {
                    what: "off-diagonal block",
                    index: Some(i),
                    expected: self.diag[i + 1].nrows() * self.diag[i].nrows(),
                    found: l.nrows() * l.ncols(),
                });
            }
        }
        if !self.symmetric {
            for (i, u) in self.upper.iter().enumerate() {
                if u.nrows() != self.diag[i].nrows() || u.ncols() != self.diag[i + 1].nrows() {
                    return Err(Error::DimensionMismatch {
                        what: "upper block",
                        index: Some(i),
                        expected: self.diag[i].nrows() * self.diag[i + 1].nrows(),
                        found: u.nrows() * u.ncols(),
                    });
                }
            }
        }
        Ok(())
    }

    fn upper_block(&self, i: usize) -> DMatrix<T> {
        if self.symmetric {
            self.off[i].transpose()
        } else {
            self.upper[i].clone()
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let sizes = self.block_sizes();
        let offsets = offsets(&sizes);
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, dim);
        for (i, d) in self.diag.iter().enumerate() {
            out.view_mut((offsets[i], offsets[i]), (sizes[i], sizes[i])).copy_from(d);
        }
        for i in 0..self.off.len() {
            out.view_mut((offsets[i + 1], offsets[i]), (sizes[i + 1], sizes[i]))
                .copy_from(&self.off[i]);
            out.view_mut((offsets[i], offsets[i + 1]), (sizes[i], sizes[i + 1]))
                .copy_from(&self.upper_block(i));
        }
        out
    }

    /// Block-Thomas factorization (forward elimination).
    pub fn factor(&self) -> Result<BlockThomasFactor<T>> {
        let n = self.num_blocks();
        let mut pivots = Vec::with_capacity(n);
        let mut pivot_blocks = Vec::with_capacity(n);
        let mut gains: Vec<DMatrix<T>> = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut d = self.diag[i].clone();
            if i > 0 {
                d -= &self.off[i - 1] * &gains[i - 1];
            }
            let f = BlockFactor::new(&d).map_err(|rcond| Error::SingularPivot { block: i, rcond })?;
            if i + 1 < n {
                gains.push(f.solve(&self.upper_block(i)));
            }
            pivots.push(f);
            pivot_blocks.push(d);
        }
        Ok(BlockThomasFactor {
            pivots,
            pivot_blocks,
            gains,
            lower: self.off.clone(),
            sizes: self.block_sizes(),
        })
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0;
    out.push(0);
    for s in sizes {
        acc += s;
        out.push(acc);
    }
    out
}

/// A factored block-tridiagonal system that can be solved for many right-hand sides.
///
/// Implemented by the sequential block-Thomas recursion; other schemes such as
/// cyclic reduction can plug in behind the same interface.
pub trait BlockTridiagonalSolver<T: Real>: Send + Sync {
    fn block_sizes(&self) -> &[usize];

    /// Solves with the right-hand side partitioned into row blocks.
    fn solve_blocks(&self, rhs: &[DMatrix<T>]) -> Vec<DMatrix<T>>;

    fn solve(&self, rhs: &DMatrix<T>) -> Result<DMatrix<T>> {
        let sizes = self.block_sizes();
        let total: usize = sizes.iter().sum();
        if rhs.nrows() != total {
            return Err(Error::DimensionMismatch {
                what: "block-tridiagonal right-hand side",
                index: None,
                expected: total,
                found: rhs.nrows(),
            });
        }
        let offs = offsets(sizes);
        let blocks: Vec<DMatrix<T>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| rhs.rows(offs[i], s).into_owned())
            .collect();
        let x = self.solve_blocks(&blocks);
        let mut out = DMatrix::zeros(total, rhs.ncols());
        for (i, xi) in x.iter().enumerate() {
            out.rows_mut(offs[i], sizes[i]).copy_from(xi);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct BlockThomasFactor<T: Real> {
    pivots: Vec<BlockFactor<T>>,
    pivot_blocks: Vec<DMatrix<T>>,
    /// `G_i = D'_i⁻¹ U_i`
    gains: Vec<DMatrix<T>>,
    lower: Vec<DMatrix<T>>,
    sizes: Vec<usize>,
}

impl<T: Real> BlockThomasFactor<T> {
    /// Inertia of the matrix, read off the eliminated pivot blocks.
    pub fn inertia(&self) -> Inertia {
        let mut total = Inertia::default();
        for d in &self.pivot_blocks {
            total += inertia(&crate::linalg::cast_matrix::<T, f64>(d));
        }
        total
    }

    /// True when every pivot block was accepted by Cholesky.
    pub fn all_pivots_positive_definite(&self) -> bool {
        self.pivots.iter().all(|p| p.is_cholesky())
    }

    pub fn solve_vector(&self, rhs: &[DVector<T>]) -> Vec<DVector<T>> {
        let mats: Vec<DMatrix<T>> = rhs
            .iter()
            .map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
            .collect();
        self.solve_blocks(&mats)
            .into_iter()
            .map(|m| m.column(0).into_owned())
            .collect()
    }
}

impl<T: Real> BlockTridiagonalSolver<T> for BlockThomasFactor<T> {
    fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn solve_blocks(&self, rhs: &[DMatrix<T>]) -> Vec<DMatrix<T>> {
        let n = self.pivots.len();
        assert_eq!(rhs.len(), n, "right-hand side block count");
        let mut w: Vec<DMatrix<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rhs[i].clone();
            if i > 0 {
                r -= &self.lower[i - 1] * &w[i - 1];
            }
            w.push(self.pivots[i].solve(&r));
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let corr = &self.gains[i] * &w[i + 1];
            w[i] -= corr;
        }
        w
    }
}

/// Solves `M X = rhs` by block-Thomas elimination.
pub fn solve_block_tridiagonal<T: Real>(m: &BlockTridiagonal<T>, rhs: &DMatrix<T>) -> Result<DMatrix<T>> {
    m.factor()?.solve(rhs)
}

/// Per-column products `H_j⁻¹ right_jᵀ` and `H_j⁻¹ left_{j+1}ᵀ`.
pub(crate) struct SchurProducts<T: Real> {
    pub yr: Vec<DMatrix<T>>,
    pub yl: Vec<DMatrix<T>>,
}

pub(crate) fn factor_hessian<T: Real>(h: &BlockDiagonal<T>) -> Result<Vec<BlockFactor<T>>> {
    h.blocks
        .par_iter()
        .enumerate()
        .map(|(t, b)| BlockFactor::new(b).map_err(|rcond| Error::SingularHessian { t, rcond }))
        .collect()
}

pub(crate) fn schur_products<T: Real>(factors: &[BlockFactor<T>], a: &BlockBandedA<T>) -> SchurProducts<T> {
    let (yr, yl): (Vec<_>, Vec<_>) = factors
        .par_iter()
        .enumerate()
        .map(|(j, f)| {
            let right = a.right(j).expect("every column has a right block");
            let left = a.left(j + 1).expect("every column has a left block");
            (f.solve(&right.transpose()), f.solve(&left.transpose()))
        })
        .unzip();
    SchurProducts { yr, yl }
}

pub(crate) fn schur_from_products<T: Real>(a: &BlockBandedA<T>, y: &SchurProducts<T>) -> BlockTridiagonal<T> {
    let horizon = a.horizon();
    let diag: Vec<DMatrix<T>> = (0..horizon + 2)
        .into_par_iter()
        .map(|k| {
            let size = a.row_block_size(k);
            let mut s = DMatrix::zeros(size, size);
            if let Some(left) = a.left(k) {
                s += left * &y.yl[k - 1];
            }
            if let Some(right) = a.right(k) {
                s += right * &y.yr[k];
            }
            crate::linalg::symmetrize(&mut s);
            s
        })
        .collect();
    let off: Vec<DMatrix<T>> = (0..horizon + 1)
        .into_par_iter()
        .map(|k| a.left(k + 1).expect("left block") * &y.yr[k])
        .collect();
    BlockTridiagonal {
        diag,
        off,
        upper: Vec::new(),
        symmetric: true,
    }
}

/// `A H⁻¹ Aᵀ` assembled blockwise; `T + 2` diagonal blocks.
pub fn form_schur<T: Real>(h: &BlockDiagonal<T>, a: &BlockBandedA<T>) -> Result<BlockTridiagonal<T>> {
    a.check_against(h)?;
    let factors = factor_hessian(h)?;
    let y = schur_products(&factors, a);
    Ok(schur_from_products(a, &y))
}

/// Dense `[[H, Aᵀ], [A, 0]]`.
pub fn dense_kkt_matrix(blocks: &KktBlocks<f64>) -> DMatrix<f64> {
    let h = blocks.h.to_dense();
    let a = blocks.a.to_dense();
    let (nx, nr) = (h.nrows(), a.nrows());
    let mut k = DMatrix::zeros(nx + nr, nx + nr);
    k.view_mut((0, 0), (nx, nx)).copy_from(&h);
    k.view_mut((nx, 0), (nr, nx)).copy_from(&a);
    k.view_mut((0, nx), (nx, nr)).copy_from(&a.transpose());
    k
}

/// Ground-truth `(Dξ, Dλ)` from a dense LU of the differential KKT system
/// `K [Dξ; −Dλ] + [B; C] = 0`.
pub fn dense_kkt_solve(blocks: &KktBlocks<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    blocks.check()?;
    let k = dense_kkt_matrix(blocks);
    let nx = blocks.h.dim();
    let b = blocks.b_dense();
    let c = blocks.c_dense();
    let d = blocks.d;
    let mut rhs = DMatrix::zeros(k.nrows(), d);
    rhs.rows_mut(0, nx).copy_from(&(-b));
    rhs.rows_mut(nx, k.nrows() - nx).copy_from(&(-c));
    let lu = k.clone().lu();
    let u = lu.u();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..u.nrows() {
        lo = lo.min(u[(i, i)].abs());
        hi = hi.max(u[(i, i)].abs());
    }
    let rcond = if hi > 0.0 { lo / hi } else { 0.0 };
    if !(rcond > f64::EPSILON * k.nrows() as f64) {
        return Err(Error::SingularKkt { rcond });
    }
    let sol = lu.solve(&rhs).ok_or(Error::SingularKkt { rcond })?;
    let dxi = sol.rows(0, nx).into_owned();
    let dlam = -sol.rows(nx, k.nrows() - nx).into_owned();
    Ok((dxi, dlam))
}
