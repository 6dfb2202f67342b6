//! The structured quadruple `(H, A, B, C)` and multiplier recovery.
//!
//! With `L = J − λᵀr`, `H = D²_ξξ L` is block diagonal with `T + 1` blocks,
//! `A = D_ξ r` is block banded with two blocks per block row, `B = D²_θξ L`
//! has one row block per timestep and `C = D_θ r` one per residual block.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::blocktri::{factor_hessian, schur_from_products, schur_products};
use crate::error::{Error, Result};
use crate::linalg::{cast_matrix, cast_vector, numerical_rank, symmetrize, Real};
use crate::problem::{validate_inputs, ActiveSet, ConstraintKind, Evaluator, ProblemDefinition, Trajectory};

#[derive(Debug, Clone)]
pub struct BlockDiagonal<T: Real> {
    pub blocks: Vec<DMatrix<T>>,
}

impl<T: Real> BlockDiagonal<T> {
    pub fn new(blocks: Vec<DMatrix<T>>) -> Self {
        Self { blocks }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, dim);
        let mut off = 0;
        for b in &self.blocks {
            out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
            off += b.nrows();
        }
        out
    }

    pub fn cast<U: Real>(&self) -> BlockDiagonal<U> {
        BlockDiagonal {
            blocks: self.blocks.iter().map(cast_matrix).collect(),
        }
    }
}

/// `A = D_ξ r` stored by row block `k = 0, …, T + 1` (`k = 0` is `r₋₁`).
///
/// Row block `k ≥ 1` (residual `r_{k−1}`) touches column blocks `k − 1`
/// through `diag[k − 1]` and `k` through `sub[k − 1]`; row block `0` touches
/// column block `0` only.
#[derive(Debug, Clone)]
pub struct BlockBandedA<T: Real> {
    /// `D_{ξ₀} r₋₁ = [I 0]`
    pub init_block: DMatrix<T>,
    /// `diag[t] = D_{ξ_t} r_t`, `T + 1` blocks.
    pub diag: Vec<DMatrix<T>>,
    /// `sub[t] = D_{ξ_{t+1}} r_t`, `T` blocks.
    pub sub: Vec<DMatrix<T>>,
}

impl<T: Real> BlockBandedA<T> {
    pub fn horizon(&self) -> usize {
        self.sub.len()
    }

    /// Block of row block `k` in column block `k − 1`.
    pub fn left(&self, k: usize) -> Option<&DMatrix<T>> {
        if k == 0 {
            None
        } else {
            self.diag.get(k - 1)
        }
    }

    /// Block of row block `k` in column block `k`.
    pub fn right(&self, k: usize) -> Option<&DMatrix<T>> {
        if k == 0 {
            Some(&self.init_block)
        } else {
            self.sub.get(k - 1)
        }
    }

    pub fn row_block_size(&self, k: usize) -> usize {
        if k == 0 {
            self.init_block.nrows()
        } else {
            self.diag[k - 1].nrows()
        }
    }

    pub fn row_sizes(&self) -> Vec<usize> {
        (0..self.horizon() + 2).map(|k| self.row_block_size(k)).collect()
    }

    pub fn col_sizes(&self) -> Vec<usize> {
        self.diag.iter().map(|d| d.ncols()).collect()
    }

    pub fn nrows(&self) -> usize {
        self.row_sizes().iter().sum()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let rows = self.row_sizes();
        let cols = self.col_sizes();
        let row_off = prefix(&rows);
        let col_off = prefix(&cols);
        let mut out = DMatrix::zeros(row_off[rows.len()], col_off[cols.len()]);
        for k in 0..rows.len() {
            if let Some(l) = self.left(k) {
                out.view_mut((row_off[k], col_off[k - 1]), (l.nrows(), l.ncols())).copy_from(l);
            }
            if let Some(r) = self.right(k) {
                out.view_mut((row_off[k], col_off[k]), (r.nrows(), r.ncols())).copy_from(r);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> BlockBandedA<U> {
        BlockBandedA {
            init_block: cast_matrix(&self.init_block),
            diag: self.diag.iter().map(cast_matrix).collect(),
            sub: self.sub.iter().map(cast_matrix).collect(),
        }
    }

    pub(crate) fn check_against(&self, h: &BlockDiagonal<T>) -> Result<()> {
        let horizon = self.horizon();
        if self.diag.len() != horizon + 1 || h.blocks.len() != horizon + 1 {
            return Err(Error::DimensionMismatch {
                what: "block count",
                index: None,
                expected: horizon + 1,
                found: self.diag.len().min(h.blocks.len()),
            });
        }
        for (t, hb) in h.blocks.iter().enumerate() {
            if hb.nrows() != hb.ncols() {
                return Err(Error::DimensionMismatch {
                    what: "H block columns",
                    index: Some(t),
                    expected: hb.nrows(),
                    found: hb.ncols(),
                });
            }
            if self.diag[t].ncols() != hb.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "A diagonal block columns",
                    index: Some(t),
                    expected: hb.nrows(),
                    found: self.diag[t].ncols(),
                });
            }
        }
        if self.init_block.ncols() != h.blocks[0].nrows() {
            return Err(Error::DimensionMismatch {
                what: "A initial block columns",
                index: None,
                expected: h.blocks[0].nrows(),
                found: self.init_block.ncols(),
            });
        }
        for (t, s) in self.sub.iter().enumerate() {
            if s.nrows() != self.diag[t].nrows() || s.ncols() != h.blocks[t + 1].nrows() {
                return Err(Error::DimensionMismatch {
                    what: "A sub block",
                    index: Some(t),
                    expected: self.diag[t].nrows() * h.blocks[t + 1].nrows(),
                    found: s.nrows() * s.ncols(),
                });
            }
        }
        Ok(())
    }
}

fn prefix(sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len() + 1];
    for (i, s) in sizes.iter().enumerate() {
        out[i + 1] = out[i] + s;
    }
    out
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct KktBlocks<T: Real> {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub d: usize,
    pub h: BlockDiagonal<T>,
    pub a: BlockBandedA<T>,
    /// `T + 1` blocks of shape `|ξ_t| × d`.
    pub b: Vec<DMatrix<T>>,
    /// `T + 2` blocks of shape `|r_k| × d`.
    pub c: Vec<DMatrix<T>>,
    /// Multipliers partitioned like the residual.
    pub lambda: DVector<T>,
}

impl<T: Real> KktBlocks<T> {
    pub fn n_xi(&self) -> usize {
        (self.n + self.m) * self.horizon + self.n
    }

    pub fn n_r(&self) -> usize {
        self.a.nrows()
    }

    pub fn cast<U: Real>(&self) -> KktBlocks<U> {
        KktBlocks {
            n: self.n,
            m: self.m,
            horizon: self.horizon,
            d: self.d,
            h: self.h.cast(),
            a: self.a.cast(),
            b: self.b.iter().map(cast_matrix).collect(),
            c: self.c.iter().map(cast_matrix).collect(),
            lambda: cast_vector(&self.lambda),
        }
    }

    pub fn b_dense(&self) -> DMatrix<T> {
        stack(&self.b, self.d)
    }

    pub fn c_dense(&self) -> DMatrix<T> {
        stack(&self.c, self.d)
    }

    /// Structural consistency of every block.
    pub fn check(&self) -> Result<()> {
        let horizon = self.horizon;
        if self.a.sub.len() != horizon {
            return Err(Error::DimensionMismatch {
                what: "A sub block count",
                index: None,
                expected: horizon,
                found: self.a.sub.len(),
            });
        }
        for t in 0..=horizon {
            let expected = if t < horizon { self.n + self.m } else { self.n };
            let found = self.h.blocks.get(t).map_or(0, |b| b.nrows());
            if found != expected {
                return Err(Error::DimensionMismatch {
                    what: "H block",
                    index: Some(t),
                    expected,
                    found,
                });
            }
        }
        self.a.check_against(&self.h)?;
        if self.b.len() != horizon + 1 {
            return Err(Error::DimensionMismatch {
                what: "B block count",
                index: None,
                expected: horizon + 1,
                found: self.b.len(),
            });
        }
        for (t, b) in self.b.iter().enumerate() {
            if b.nrows() != self.h.blocks[t].nrows() || b.ncols() != self.d {
                return Err(Error::DimensionMismatch {
                    what: "B block",
                    index: Some(t),
                    expected: self.h.blocks[t].nrows() * self.d,
                    found: b.nrows() * b.ncols(),
                });
            }
        }
        if self.c.len() != horizon + 2 {
            return Err(Error::DimensionMismatch {
                what: "C block count",
                index: None,
                expected: horizon + 2,
                found: self.c.len(),
            });
        }
        for (k, c) in self.c.iter().enumerate() {
            let rows = self.a.row_block_size(k);
            if c.nrows() != rows || c.ncols() != self.d {
                return Err(Error::DimensionMismatch {
                    what: "C block",
                    index: Some(k),
                    expected: rows * self.d,
                    found: c.nrows() * c.ncols(),
                });
            }
        }
        if !self.lambda.is_empty() && self.lambda.len() != self.n_r() {
            return Err(Error::DimensionMismatch {
                what: "multiplier vector",
                index: None,
                expected: self.n_r(),
                found: self.lambda.len(),
            });
        }
        Ok(())
    }
}

fn stack<T: Real>(blocks: &[DMatrix<T>], cols: usize) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.nrows()).copy_from(b);
        off += b.nrows();
    }
    out
}

/// First-order data of one timestep: `∇c_t`, `D_{ξ_t} r_t` and `D_θ r_t`.
struct StageFirstOrder {
    grad: DVector<f64>,
    jac_z: DMatrix<f64>,
    jac_theta: DMatrix<f64>,
    /// Row offsets of the `(g̃, h, dyn)` groups inside `r_t`.
    groups: [usize; 3],
}

fn stage_first_order<P: ProblemDefinition + ?Sized>(
    eval: &Evaluator<'_, P>,
    t: usize,
    z: &DVector<f64>,
    theta: &DVector<f64>,
    active: &ActiveSet,
) -> Result<StageFirstOrder> {
    let dims = eval.problem.dims();
    let grad = eval.cost_gradient(t, z, theta)?;
    let rows = active.active_rows(t);
    let jg = eval.jacobian(ConstraintKind::Inequality, t, z, theta)?;
    let jh = eval.jacobian(ConstraintKind::Equality, t, z, theta)?;
    let n_dyn = if t < dims.horizon { dims.n } else { 0 };
    let total = rows.len() + jh.wrt_z.nrows() + n_dyn;
    let mut jac_z = DMatrix::zeros(total, z.len());
    let mut jac_theta = DMatrix::zeros(total, theta.len());
    for (r, &i) in rows.iter().enumerate() {
        jac_z.row_mut(r).copy_from(&jg.wrt_z.row(i));
        jac_theta.row_mut(r).copy_from(&jg.wrt_theta.row(i));
    }
    let h0 = rows.len();
    jac_z.rows_mut(h0, jh.wrt_z.nrows()).copy_from(&jh.wrt_z);
    jac_theta.rows_mut(h0, jh.wrt_theta.nrows()).copy_from(&jh.wrt_theta);
    let f0 = h0 + jh.wrt_z.nrows();
    if n_dyn > 0 {
        let jf = eval.jacobian(ConstraintKind::Dynamics, t, z, theta)?;
        jac_z.rows_mut(f0, n_dyn).copy_from(&(-jf.wrt_z));
        jac_theta.rows_mut(f0, n_dyn).copy_from(&(-jf.wrt_theta));
    }
    Ok(StageFirstOrder {
        grad,
        jac_z,
        jac_theta,
        groups: [0, h0, f0],
    })
}

fn sub_block(dims_n: usize, rows: usize, dyn_offset: usize, cols: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(rows, cols);
    for i in 0..dims_n {
        s[(dyn_offset + i, i)] = 1.0;
    }
    s
}

fn init_block(n: usize, cols: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, cols);
    for i in 0..n {
        b[(i, i)] = 1.0;
    }
    b
}

fn check_finite(m: &DMatrix<f64>, what: &'static str, t: usize) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, t })
    }
}

/// Builds `(H, A, B, C)` at a solution; per-timestep work runs in parallel.
pub fn assemble_kkt_blocks<P: ProblemDefinition + ?Sized>(
    p: &P,
    xi: &Trajectory,
    theta: &DVector<f64>,
    active: &ActiveSet,
    lambda: &DVector<f64>,
) -> Result<KktBlocks<f64>> {
    assemble_with(&Evaluator::new(p), xi, theta, active, lambda)
}

pub(crate) fn assemble_with<P: ProblemDefinition + ?Sized>(
    eval: &Evaluator<'_, P>,
    xi: &Trajectory,
    theta: &DVector<f64>,
    active: &ActiveSet,
    lambda: &DVector<f64>,
) -> Result<KktBlocks<f64>> {
    let p = eval.problem;
    validate_inputs(p, xi, theta)?;
    let dims = p.dims();
    active.check(dims)?;
    let row_sizes = dims.row_block_sizes(active);
    if lambda.len() != dims.n_r(active) {
        return Err(Error::DimensionMismatch {
            what: "multiplier vector",
            index: None,
            expected: dims.n_r(active),
            found: lambda.len(),
        });
    }
    let row_off = prefix(&row_sizes);
    let horizon = dims.horizon;

    let stages = (0..=horizon)
        .into_par_iter()
        .map(|t| {
            let z = xi.block(t);
            let first = stage_first_order(eval, t, &z, theta, active)?;
            let lam = lambda.rows(row_off[t + 1], row_sizes[t + 1]).into_owned();
            let cost = eval.cost_hessian(t, &z, theta)?;
            let mut h = cost.zz;
            let mut b = cost.z_theta;

            let [_, h0, f0] = first.groups;
            let q = dims.ineq_counts[t];
            if h0 > 0 {
                let mut w = DVector::zeros(q);
                for (r, i) in active.active_rows(t).into_iter().enumerate() {
                    w[i] = lam[r];
                }
                let sd = eval.weighted_hessian(ConstraintKind::Inequality, t, &z, theta, &w)?;
                h -= sd.zz;
                b -= sd.z_theta;
            }
            if f0 > h0 {
                let w = lam.rows(h0, f0 - h0).into_owned();
                let sd = eval.weighted_hessian(ConstraintKind::Equality, t, &z, theta, &w)?;
                h -= sd.zz;
                b -= sd.z_theta;
            }
            if t < horizon {
                let w = lam.rows(f0, dims.n).into_owned();
                let sd = eval.weighted_hessian(ConstraintKind::Dynamics, t, &z, theta, &w)?;
                h += sd.zz;
                b += sd.z_theta;
            }
            symmetrize(&mut h);
            check_finite(&h, "Hessian block", t)?;
            check_finite(&b, "B block", t)?;
            check_finite(&first.jac_z, "constraint Jacobian", t)?;
            check_finite(&first.jac_theta, "constraint parameter Jacobian", t)?;
            let sub = (t < horizon).then(|| sub_block(dims.n, row_sizes[t + 1], f0, dims.stage_dim(t + 1)));
            Ok((h, b, first.jac_z, first.jac_theta, sub))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut h_blocks = Vec::with_capacity(horizon + 1);
    let mut b_blocks = Vec::with_capacity(horizon + 1);
    let mut diag = Vec::with_capacity(horizon + 1);
    let mut sub = Vec::with_capacity(horizon);
    let mut c = Vec::with_capacity(horizon + 2);
    c.push(DMatrix::zeros(dims.n, dims.d));
    for (h, b, jz, jt, s) in stages {
        h_blocks.push(h);
        b_blocks.push(b);
        diag.push(jz);
        c.push(jt);
        if let Some(s) = s {
            sub.push(s);
        }
    }
    Ok(KktBlocks {
        n: dims.n,
        m: dims.m,
        horizon,
        d: dims.d,
        h: BlockDiagonal::new(h_blocks),
        a: BlockBandedA {
            init_block: init_block(dims.n, dims.stage_dim(0)),
            diag,
            sub,
        },
        b: b_blocks,
        c,
        lambda: lambda.clone(),
    })
}

/// `A` and `∇J` at a trajectory, block by block.
pub(crate) fn constraint_jacobian_and_gradient<P: ProblemDefinition + ?Sized>(
    eval: &Evaluator<'_, P>,
    xi: &Trajectory,
    theta: &DVector<f64>,
    active: &ActiveSet,
) -> Result<(BlockBandedA<f64>, Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
    let p = eval.problem;
    validate_inputs(p, xi, theta)?;
    let dims = p.dims();
    active.check(dims)?;
    let row_sizes = dims.row_block_sizes(active);
    let horizon = dims.horizon;
    let stages = (0..=horizon)
        .into_par_iter()
        .map(|t| stage_first_order(eval, t, &xi.block(t), theta, active))
        .collect::<Result<Vec<_>>>()?;
    let mut diag = Vec::with_capacity(horizon + 1);
    let mut sub = Vec::with_capacity(horizon);
    let mut grads = Vec::with_capacity(horizon + 1);
    let mut c = vec![DMatrix::zeros(dims.n, dims.d)];
    for (t, s) in stages.into_iter().enumerate() {
        if t < horizon {
            sub.push(sub_block(dims.n, row_sizes[t + 1], s.groups[2], dims.stage_dim(t + 1)));
        }
        diag.push(s.jac_z);
        c.push(s.jac_theta);
        grads.push(s.grad);
    }
    let a = BlockBandedA {
        init_block: init_block(dims.n, dims.stage_dim(0)),
        diag,
        sub,
    };
    Ok((a, c, grads))
}

/// `Aᵀλ` computed blockwise; one output block per column block.
pub fn a_transpose_times<T: Real>(a: &BlockBandedA<T>, lambda: &[DVector<T>]) -> Vec<DVector<T>> {
    (0..=a.horizon())
        .map(|j| {
            let right = a.right(j).expect("right block");
            let left = a.left(j + 1).expect("left block");
            right.transpose() * &lambda[j] + left.transpose() * &lambda[j + 1]
        })
        .collect()
}

pub(crate) fn split_rows<T: Real>(v: &DVector<T>, sizes: &[usize]) -> Vec<DVector<T>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        out.push(v.rows(off, s).into_owned());
        off += s;
    }
    out
}

pub(crate) fn join_rows<T: Real>(blocks: &[DVector<T>]) -> DVector<T> {
    let len = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.len()).copy_from(b);
        off += b.len();
    }
    out
}

/// `‖Aᵀλ − ∇J‖_∞`.
pub fn stationarity_residual(a: &BlockBandedA<f64>, lambda: &DVector<f64>, grad: &[DVector<f64>]) -> f64 {
    let lam = split_rows(lambda, &a.row_sizes());
    a_transpose_times(a, &lam)
        .iter()
        .zip(grad)
        .map(|(x, g)| (x - g).amax())
        .fold(0.0, f64::max)
}

/// Multipliers and the stationarity residual they leave.
#[derive(Debug, Clone)]
pub struct RecoveredMultipliers {
    pub lambda: DVector<f64>,
    pub residual: f64,
}

/// Least-squares solution of `Aᵀλ = ∇J` through the normal equations
/// `AAᵀλ = A∇J`, which are block tridiagonal.
pub fn recover_multipliers<P: ProblemDefinition + ?Sized>(
    p: &P,
    xi: &Trajectory,
    theta: &DVector<f64>,
    active: &ActiveSet,
) -> Result<RecoveredMultipliers> {
    let eval = Evaluator::new(p);
    let (a, _, grad) = constraint_jacobian_and_gradient(&eval, xi, theta, active)?;
    let lambda = least_squares_multipliers(&a, &grad)?;
    let residual = stationarity_residual(&a, &lambda, &grad);
    Ok(RecoveredMultipliers { lambda, residual })
}

pub(crate) fn least_squares_multipliers(a: &BlockBandedA<f64>, grad: &[DVector<f64>]) -> Result<DVector<f64>> {
    let identity = BlockDiagonal::new(a.col_sizes().iter().map(|&s| DMatrix::identity(s, s)).collect());
    let factors = factor_hessian(&identity)?;
    let y = schur_products(&factors, a);
    let gram = schur_from_products(a, &y);
    let rhs: Vec<DVector<f64>> = (0..a.horizon() + 2)
        .map(|k| {
            let mut r = DVector::zeros(a.row_block_size(k));
            if let Some(l) = a.left(k) {
                r += l * &grad[k - 1];
            }
            if let Some(rb) = a.right(k) {
                r += rb * &grad[k];
            }
            r
        })
        .collect();
    let factor = match gram.factor() {
        Ok(f) => f,
        Err(e) => return Err(rank_error(a).unwrap_or(e)),
    };
    Ok(join_rows(&factor.solve_vector(&rhs)))
}

/// Dense rank test of `A`, used only after an elimination has already failed.
pub(crate) fn rank_error<T: Real>(a: &BlockBandedA<T>) -> Option<Error> {
    let rows = a.nrows();
    let cols: usize = a.col_sizes().iter().sum();
    if rows.saturating_mul(cols) > 4_000_000 {
        return None;
    }
    let dense = cast_matrix::<T, f64>(&a.to_dense());
    let rank = numerical_rank(&dense);
    (rank < rows).then_some(Error::RankDeficient { rank, expected: rows })
}
