//! Dense kernels shared by the structured solvers: a scalar trait covering
//! `f32`/`f64`, per-block factorizations and inertia counting.

use nalgebra::{DMatrix, DVector, Dyn, PermutationSequence, RealField};

/// Floating-point scalar usable by the backward-pass kernels.
pub trait Real: RealField + Copy + Send + Sync + 'static {
    fn of_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

pub fn cast_matrix<S: Real, T: Real>(m: &DMatrix<S>) -> DMatrix<T> {
    m.map(|x| T::of_f64(x.to_f64()))
}

pub fn cast_vector<S: Real, T: Real>(v: &DVector<S>) -> DVector<T> {
    v.map(|x| T::of_f64(x.to_f64()))
}

pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let half = T::of_f64(0.5);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Factorization of one square block.
///
/// Cholesky is tried first; symmetric indefinite blocks fall back to LU with
/// partial pivoting. A block is rejected as singular when the pivot-ratio
/// estimate of its reciprocal condition number drops to machine epsilon.
/// Inverses of the triangular factors are kept so that solves with many
/// right-hand sides are matrix products.
#[derive(Debug, Clone)]
pub enum BlockFactor<T: Real> {
    Empty,
    /// `M = L Lᵀ`.
    Cholesky {
        l: DMatrix<T>,
        l_inv: DMatrix<T>,
        l_inv_t: DMatrix<T>,
    },
    /// `P M = L U` with unit lower `L`.
    Lu {
        p: PermutationSequence<Dyn>,
        l: DMatrix<T>,
        u: DMatrix<T>,
        l_inv: DMatrix<T>,
        u_inv: DMatrix<T>,
    },
}

impl<T: Real> BlockFactor<T> {
    /// Returns the reciprocal condition estimate on failure.
    pub fn new(m: &DMatrix<T>) -> Result<Self, f64> {
        assert_eq!(m.nrows(), m.ncols(), "block must be square");
        let n = m.nrows();
        if n == 0 {
            return Ok(BlockFactor::Empty);
        }
        let eps = T::default_epsilon().to_f64();
        if is_symmetric(m) {
            if let Some(chol) = m.clone().cholesky() {
                let l = chol.unpack();
                let (lo, hi) = diag_range(&l);
                let rcond = (lo / hi).powi(2);
                if rcond.is_finite() && rcond > eps {
                    let mut l_inv = DMatrix::identity(n, n);
                    l.solve_lower_triangular_mut(&mut l_inv);
                    let l_inv_t = l_inv.transpose();
                    return Ok(BlockFactor::Cholesky { l, l_inv, l_inv_t });
                }
            }
        }
        let (p, l, u) = m.clone().lu().unpack();
        let (lo, hi) = diag_range(&u);
        let rcond = lo / hi;
        if rcond.is_finite() && rcond > eps {
            let mut l_inv = DMatrix::identity(n, n);
            l.solve_lower_triangular_with_diag_mut(&mut l_inv, T::one());
            let mut u_inv = DMatrix::identity(n, n);
            u.solve_upper_triangular_mut(&mut u_inv);
            Ok(BlockFactor::Lu { p, l, u, l_inv, u_inv })
        } else {
            Err(if rcond.is_finite() { rcond } else { 0.0 })
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BlockFactor::Empty => 0,
            BlockFactor::Cholesky { l, .. } => l.nrows(),
            BlockFactor::Lu { l, .. } => l.nrows(),
        }
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self, BlockFactor::Cholesky { .. } | BlockFactor::Empty)
    }

    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        match self {
            BlockFactor::Empty => b.clone(),
            BlockFactor::Cholesky { l_inv, l_inv_t, .. } => l_inv_t * (l_inv * b),
            BlockFactor::Lu { p, l_inv, u_inv, .. } => {
                let mut pb = b.clone();
                p.permute_rows(&mut pb);
                u_inv * (l_inv * pb)
            }
        }
    }

    pub fn solve_vector(&self, b: &DVector<T>) -> DVector<T> {
        let mut x = b.clone();
        match self {
            BlockFactor::Empty => {}
            BlockFactor::Cholesky { l, .. } => {
                l.solve_lower_triangular_mut(&mut x);
                l.tr_solve_lower_triangular_mut(&mut x);
            }
            BlockFactor::Lu { p, l, u, .. } => {
                p.permute_rows(&mut x);
                l.solve_lower_triangular_with_diag_mut(&mut x, T::one());
                u.solve_upper_triangular_mut(&mut x);
            }
        }
        x
    }
}

fn is_symmetric<T: Real>(m: &DMatrix<T>) -> bool {
    let scale = m.amax().to_f64();
    let tol = scale * T::default_epsilon().to_f64().sqrt();
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)].to_f64() - m[(j, i)].to_f64()).abs() <= tol))
}

fn diag_range<T: Real>(m: &DMatrix<T>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..m.nrows().min(m.ncols()) {
        let v = m[(i, i)].to_f64().abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == 0.0 {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Counts of positive, negative and (numerically) zero eigenvalues.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl std::ops::AddAssign for Inertia {
    fn add_assign(&mut self, rhs: Self) {
        self.positive += rhs.positive;
        self.negative += rhs.negative;
        self.zero += rhs.zero;
    }
}

pub fn inertia(m: &DMatrix<f64>) -> Inertia {
    if m.nrows() == 0 {
        return Inertia::default();
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let tol = scale * 1e-13 * m.nrows() as f64;
    let mut out = Inertia::default();
    for &l in eig.eigenvalues.iter() {
        if l > tol {
            out.positive += 1;
        } else if l < -tol {
            out.negative += 1;
        } else {
            out.zero += 1;
        }
    }
    out
}

/// Numerical rank from singular values with the usual `max(m,n)·eps·σ_max` cutoff.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.amax();
    let tol = smax * f64::EPSILON * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Reciprocal condition number from singular values (dense, small matrices only).
pub fn rcond_svd(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.amax();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax == 0.0 {
        0.0
    } else {
        smin / smax
    }
}
