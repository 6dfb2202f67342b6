//! Parameterized constrained optimal control problems, the timestep-blocked
//! decision vector and the stacked constraint residual.
//!
//! The decision vector is ordered `ξ = (x₀, u₀, x₁, u₁, …, x_T)`; block `t < T`
//! is `ξ_t = (x_t, u_t)` of length `n + m` and the last block is `ξ_T = x_T`.
//! Every per-timestep callback receives `t` and the block `z = ξ_t`.
//!
//! The residual is stacked in `T + 2` blocks `(r₋₁, r₀, …, r_T)` with
//! `r₋₁ = x₀ − x_init`, `r_t = (g̃_t, h_t, x_{t+1} − f_t)` for `t < T` and
//! `r_T = (g̃_T, h_T)`, where `g̃_t` keeps only the active inequality rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default activity threshold on inequality values.
pub const DEFAULT_ACTIVE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Parameter dimension.
    pub d: usize,
    /// Number of control steps.
    pub horizon: usize,
    /// Inequality rows per timestep, `T + 1` entries.
    pub ineq_counts: Vec<usize>,
    /// Additional equality rows per timestep, `T + 1` entries.
    pub eq_counts: Vec<usize>,
}

impl Dimensions {
    /// Dimensions with no path or terminal constraints beyond the dynamics.
    pub fn new(n: usize, m: usize, d: usize, horizon: usize) -> Result<Self> {
        Self::with_constraints(n, m, d, horizon, vec![0; horizon + 1], vec![0; horizon + 1])
    }

    pub fn with_constraints(
        n: usize,
        m: usize,
        d: usize,
        horizon: usize,
        ineq_counts: Vec<usize>,
        eq_counts: Vec<usize>,
    ) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 || horizon == 0 {
            return Err(Error::Invalid(format!(
                "dimensions must be positive (n={n}, m={m}, d={d}, T={horizon})"
            )));
        }
        for (what, counts) in [("inequality counts", &ineq_counts), ("equality counts", &eq_counts)] {
            if counts.len() != horizon + 1 {
                return Err(Error::DimensionMismatch {
                    what,
                    index: None,
                    expected: horizon + 1,
                    found: counts.len(),
                });
            }
        }
        Ok(Self {
            n,
            m,
            d,
            horizon,
            ineq_counts,
            eq_counts,
        })
    }

    /// `n_ξ = (n + m)·T + n`.
    pub fn n_xi(&self) -> usize {
        (self.n + self.m) * self.horizon + self.n
    }

    /// Length of block `ξ_t`.
    pub fn stage_dim(&self, t: usize) -> usize {
        if t < self.horizon {
            self.n + self.m
        } else {
            self.n
        }
    }

    /// Offset of block `ξ_t` inside the decision vector.
    pub fn stage_offset(&self, t: usize) -> usize {
        (self.n + self.m) * t
    }

    pub fn total_equalities(&self) -> usize {
        self.eq_counts.iter().sum()
    }

    pub fn total_inequalities(&self) -> usize {
        self.ineq_counts.iter().sum()
    }

    pub fn has_inequalities(&self) -> bool {
        self.total_inequalities() > 0
    }

    /// Sizes of the `T + 2` residual blocks `(r₋₁, r₀, …, r_T)` for an active set.
    pub fn row_block_sizes(&self, active: &ActiveSet) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.horizon + 2);
        sizes.push(self.n);
        for t in 0..=self.horizon {
            let dyn_rows = if t < self.horizon { self.n } else { 0 };
            sizes.push(active.count_at(t) + self.eq_counts[t] + dyn_rows);
        }
        sizes
    }

    /// `n_r = (T + 1)·n + s + q` with `q` the number of active inequality rows.
    pub fn n_r(&self, active: &ActiveSet) -> usize {
        (self.horizon + 1) * self.n + self.total_equalities() + active.count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub data: DVector<f64>,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
}

impl Trajectory {
    pub fn zeros(n: usize, m: usize, horizon: usize) -> Self {
        Self {
            data: DVector::zeros((n + m) * horizon + n),
            n,
            m,
            horizon,
        }
    }

    pub fn from_data(dims: &Dimensions, data: DVector<f64>) -> Result<Self> {
        if data.len() != dims.n_xi() {
            return Err(Error::DimensionMismatch {
                what: "trajectory data",
                index: None,
                expected: dims.n_xi(),
                found: data.len(),
            });
        }
        Ok(Self {
            data,
            n: dims.n,
            m: dims.m,
            horizon: dims.horizon,
        })
    }

    /// Interleaves `T + 1` states and `T` controls into `(x₀, u₀, …, x_T)`.
    pub fn pack(dims: &Dimensions, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Result<Self> {
        let (n, m, horizon) = (dims.n, dims.m, dims.horizon);
        if states.len() != horizon + 1 {
            return Err(Error::DimensionMismatch {
                what: "state list",
                index: None,
                expected: horizon + 1,
                found: states.len(),
            });
        }
        if controls.len() != horizon {
            return Err(Error::DimensionMismatch {
                what: "control list",
                index: None,
                expected: horizon,
                found: controls.len(),
            });
        }
        let mut traj = Self::zeros(n, m, horizon);
        for (t, x) in states.iter().enumerate() {
            if x.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "state",
                    index: Some(t),
                    expected: n,
                    found: x.len(),
                });
            }
            traj.data.rows_mut((n + m) * t, n).copy_from(x);
        }
        for (t, u) in controls.iter().enumerate() {
            if u.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "control",
                    index: Some(t),
                    expected: m,
                    found: u.len(),
                });
            }
            traj.data.rows_mut((n + m) * t + n, m).copy_from(u);
        }
        Ok(traj)
    }

    pub fn unpack(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let states = (0..=self.horizon).map(|t| self.state(t)).collect();
        let controls = (0..self.horizon).map(|t| self.control(t)).collect();
        (states, controls)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block_len(&self, t: usize) -> usize {
        if t < self.horizon {
            self.n + self.m
        } else {
            self.n
        }
    }

    /// Block `ξ_t` as an owned vector.
    pub fn block(&self, t: usize) -> DVector<f64> {
        self.data.rows((self.n + self.m) * t, self.block_len(t)).into_owned()
    }

    pub fn set_block(&mut self, t: usize, z: &DVector<f64>) {
        let len = self.block_len(t);
        self.data.rows_mut((self.n + self.m) * t, len).copy_from(z);
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        self.data.rows((self.n + self.m) * t, self.n).into_owned()
    }

    pub fn control(&self, t: usize) -> DVector<f64> {
        assert!(t < self.horizon, "no control at the terminal step");
        self.data.rows((self.n + self.m) * t + self.n, self.m).into_owned()
    }
}

/// Which inequality rows are treated as active equalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub masks: Vec<Vec<bool>>,
    pub epsilon: f64,
}

impl ActiveSet {
    /// Every inequality row inactive.
    pub fn empty(dims: &Dimensions) -> Self {
        Self {
            masks: dims.ineq_counts.iter().map(|&q| vec![false; q]).collect(),
            epsilon: DEFAULT_ACTIVE_EPSILON,
        }
    }

    pub fn count(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|&&a| a).count()).sum()
    }

    pub fn count_at(&self, t: usize) -> usize {
        self.masks[t].iter().filter(|&&a| a).count()
    }

    /// Indices of the active rows of `g_t`.
    pub fn active_rows(&self, t: usize) -> Vec<usize> {
        self.masks[t]
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn check(&self, dims: &Dimensions) -> Result<()> {
        if self.masks.len() != dims.horizon + 1 {
            return Err(Error::DimensionMismatch {
                what: "active-set masks",
                index: None,
                expected: dims.horizon + 1,
                found: self.masks.len(),
            });
        }
        for (t, (mask, &q)) in self.masks.iter().zip(&dims.ineq_counts).enumerate() {
            if mask.len() != q {
                return Err(Error::DimensionMismatch {
                    what: "active-set mask",
                    index: Some(t),
                    expected: q,
                    found: mask.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    /// `f_t`, the next-state map (`t < T` only).
    Dynamics,
    /// `g_t ≤ 0`.
    Inequality,
    /// `h_t = 0`.
    Equality,
}

impl ConstraintKind {
    fn name(self) -> &'static str {
        match self {
            ConstraintKind::Dynamics => "dynamics",
            ConstraintKind::Inequality => "inequality",
            ConstraintKind::Equality => "equality",
        }
    }
}

/// First derivatives of a vector function of `(ξ_t, θ)`.
#[derive(Debug, Clone)]
pub struct Jacobians {
    /// `rows × |ξ_t|`
    pub wrt_z: DMatrix<f64>,
    /// `rows × d`
    pub wrt_theta: DMatrix<f64>,
}

/// Second derivatives of a scalar (or weighted sum of vector entries) of `(ξ_t, θ)`.
#[derive(Debug, Clone)]
pub struct SecondDerivatives {
    /// `|ξ_t| × |ξ_t|`
    pub zz: DMatrix<f64>,
    /// `|ξ_t| × d`, i.e. `D_θ (D_ξ ·)ᵀ`.
    pub z_theta: DMatrix<f64>,
}

/// A parameterized constrained optimal control problem.
///
/// Implementations must be pure: identical inputs give bitwise identical
/// outputs, and every method may be called concurrently. Derivative methods
/// return `None` when not provided; central finite differences are then used
/// unless the caller disables the fallback.
pub trait ProblemDefinition: Send + Sync {
    fn dims(&self) -> &Dimensions;

    fn x_init(&self) -> &DVector<f64>;

    /// `c_t(ξ_t; θ)` for `t < T`, `c_T(x_T; θ)` for `t = T`.
    fn cost(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> f64;

    /// `f_t(x_t, u_t; θ)` for `t < T`.
    fn dynamics(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;

    /// `g_t(ξ_t; θ)` with `ineq_counts[t]` rows.
    fn inequality(&self, _t: usize, _z: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// `h_t(ξ_t; θ)` with `eq_counts[t]` rows.
    fn equality(&self, _t: usize, _z: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// `∇_{ξ_t} c_t`.
    fn cost_gradient(&self, _t: usize, _z: &DVector<f64>, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn cost_hessian(&self, _t: usize, _z: &DVector<f64>, _theta: &DVector<f64>) -> Option<SecondDerivatives> {
        None
    }

    fn jacobian(
        &self,
        _kind: ConstraintKind,
        _t: usize,
        _z: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<Jacobians> {
        None
    }

    /// Second derivatives of `Σ_i w_i F_i(ξ_t; θ)` for the chosen constraint function `F`.
    fn weighted_hessian(
        &self,
        _kind: ConstraintKind,
        _t: usize,
        _z: &DVector<f64>,
        _theta: &DVector<f64>,
        _weights: &DVector<f64>,
    ) -> Option<SecondDerivatives> {
        None
    }
}

/// Checked evaluation of a problem's callbacks with the finite-difference fallback.
pub struct Evaluator<'a, P: ProblemDefinition + ?Sized> {
    pub problem: &'a P,
    pub fallback: bool,
}

/// Central-difference step for a coordinate with value `v`.
fn fd_step(v: f64) -> f64 {
    (1e-7 * v.abs()).max(1e-6)
}

/// Outer step when the differentiated quantity is itself a finite difference.
fn fd_step_nested(v: f64) -> f64 {
    (1e-4 * v.abs()).max(1e-4)
}

fn central_jacobian(
    x: &DVector<f64>,
    out_len: usize,
    nested: bool,
    mut f: impl FnMut(&DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(out_len, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = if nested { fd_step_nested(x[j]) } else { fd_step(x[j]) };
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        jac.column_mut(j).copy_from(&((fp - fm) / (2.0 * h)));
    }
    jac
}

impl<'a, P: ProblemDefinition + ?Sized> Evaluator<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        Self { problem, fallback: true }
    }

    pub fn without_fallback(problem: &'a P) -> Self {
        Self {
            problem,
            fallback: false,
        }
    }

    fn dims(&self) -> &Dimensions {
        self.problem.dims()
    }

    fn expected_rows(&self, kind: ConstraintKind, t: usize) -> usize {
        let dims = self.dims();
        match kind {
            ConstraintKind::Dynamics => dims.n,
            ConstraintKind::Inequality => dims.ineq_counts[t],
            ConstraintKind::Equality => dims.eq_counts[t],
        }
    }

    fn raw(&self, kind: ConstraintKind, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        match kind {
            ConstraintKind::Dynamics => self.problem.dynamics(t, z, theta),
            ConstraintKind::Inequality => self.problem.inequality(t, z, theta),
            ConstraintKind::Equality => self.problem.equality(t, z, theta),
        }
    }

    pub fn cost(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Result<f64> {
        let c = self.problem.cost(t, z, theta);
        if !c.is_finite() {
            return Err(Error::Callback {
                what: "cost",
                t,
                message: format!("non-finite value {c}"),
            });
        }
        Ok(c)
    }

    pub fn constraint(
        &self,
        kind: ConstraintKind,
        t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if kind == ConstraintKind::Dynamics && t >= self.dims().horizon {
            return Ok(DVector::zeros(0));
        }
        let v = self.raw(kind, t, z, theta);
        let expected = self.expected_rows(kind, t);
        if v.len() != expected {
            return Err(Error::Callback {
                what: kind.name(),
                t,
                message: format!("returned {} rows, expected {expected}", v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Callback {
                what: kind.name(),
                t,
                message: "non-finite entry".into(),
            });
        }
        Ok(v)
    }

    fn missing(&self, what: &'static str, t: usize) -> Result<()> {
        if self.fallback {
            Ok(())
        } else {
            Err(Error::MissingDerivative { what, t })
        }
    }

    pub fn cost_gradient(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(g) = self.problem.cost_gradient(t, z, theta) {
            check_shape("cost gradient", t, g.len(), 1, z.len(), 1)?;
            return Ok(g);
        }
        self.missing("cost gradient", t)?;
        let p = self.problem;
        let jac = central_jacobian(z, 1, false, |zz| DVector::from_element(1, p.cost(t, zz, theta)));
        Ok(jac.row(0).transpose())
    }

    pub fn cost_hessian(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Result<SecondDerivatives> {
        if let Some(h) = self.problem.cost_hessian(t, z, theta) {
            check_second("cost Hessian", t, &h, z.len(), theta.len())?;
            return Ok(h);
        }
        self.missing("cost Hessian", t)?;
        let nested = self.problem.cost_gradient(t, z, theta).is_none();
        let grad = |zz: &DVector<f64>, th: &DVector<f64>| self.cost_gradient(t, zz, th).unwrap_or_else(|_| nan_vec(z.len()));
        let mut zz = central_jacobian(z, z.len(), nested, |zz| grad(zz, theta));
        crate::linalg::symmetrize(&mut zz);
        let z_theta = central_jacobian(theta, z.len(), nested, |th| grad(z, th));
        Ok(SecondDerivatives { zz, z_theta })
    }

    pub fn jacobian(
        &self,
        kind: ConstraintKind,
        t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<Jacobians> {
        let rows = self.expected_rows(kind, t);
        if rows == 0 {
            return Ok(Jacobians {
                wrt_z: DMatrix::zeros(0, z.len()),
                wrt_theta: DMatrix::zeros(0, theta.len()),
            });
        }
        if let Some(j) = self.problem.jacobian(kind, t, z, theta) {
            check_shape(kind.name(), t, j.wrt_z.nrows(), j.wrt_z.ncols(), rows, z.len())?;
            check_shape(kind.name(), t, j.wrt_theta.nrows(), j.wrt_theta.ncols(), rows, theta.len())?;
            return Ok(j);
        }
        self.missing("constraint Jacobian", t)?;
        let wrt_z = central_jacobian(z, rows, false, |zz| self.raw(kind, t, zz, theta));
        let wrt_theta = central_jacobian(theta, rows, false, |th| self.raw(kind, t, z, th));
        Ok(Jacobians { wrt_z, wrt_theta })
    }

    pub fn weighted_hessian(
        &self,
        kind: ConstraintKind,
        t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> Result<SecondDerivatives> {
        let rows = self.expected_rows(kind, t);
        if rows == 0 || weights.iter().all(|&w| w == 0.0) {
            return Ok(SecondDerivatives {
                zz: DMatrix::zeros(z.len(), z.len()),
                z_theta: DMatrix::zeros(z.len(), theta.len()),
            });
        }
        if weights.len() != rows {
            return Err(Error::DimensionMismatch {
                what: "Hessian weights",
                index: Some(t),
                expected: rows,
                found: weights.len(),
            });
        }
        if let Some(h) = self.problem.weighted_hessian(kind, t, z, theta, weights) {
            check_second("constraint Hessian", t, &h, z.len(), theta.len())?;
            return Ok(h);
        }
        self.missing("constraint Hessian", t)?;
        let nested = self.problem.jacobian(kind, t, z, theta).is_none();
        let weighted_grad = |zz: &DVector<f64>, th: &DVector<f64>| match self.jacobian(kind, t, zz, th) {
            Ok(j) => j.wrt_z.transpose() * weights,
            Err(_) => nan_vec(z.len()),
        };
        let mut zz = central_jacobian(z, z.len(), nested, |zz| weighted_grad(zz, theta));
        crate::linalg::symmetrize(&mut zz);
        let z_theta = central_jacobian(theta, z.len(), nested, |th| weighted_grad(z, th));
        Ok(SecondDerivatives { zz, z_theta })
    }
}

fn nan_vec(n: usize) -> DVector<f64> {
    DVector::from_element(n, f64::NAN)
}

fn check_shape(what: &'static str, t: usize, r: usize, c: usize, er: usize, ec: usize) -> Result<()> {
    if r != er || c != ec {
        return Err(Error::Callback {
            what,
            t,
            message: format!("returned a {r}x{c} result, expected {er}x{ec}"),
        });
    }
    Ok(())
}

fn check_second(what: &'static str, t: usize, h: &SecondDerivatives, nz: usize, d: usize) -> Result<()> {
    check_shape(what, t, h.zz.nrows(), h.zz.ncols(), nz, nz)?;
    check_shape(what, t, h.z_theta.nrows(), h.z_theta.ncols(), nz, d)
}

fn check_problem_inputs<P: ProblemDefinition + ?Sized>(p: &P, xi: &Trajectory, theta: &DVector<f64>) -> Result<()> {
    let dims = p.dims();
    if xi.len() != dims.n_xi() || xi.n != dims.n || xi.m != dims.m || xi.horizon != dims.horizon {
        return Err(Error::DimensionMismatch {
            what: "trajectory",
            index: None,
            expected: dims.n_xi(),
            found: xi.len(),
        });
    }
    if theta.len() != dims.d {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            index: None,
            expected: dims.d,
            found: theta.len(),
        });
    }
    if p.x_init().len() != dims.n {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            index: None,
            expected: dims.n,
            found: p.x_init().len(),
        });
    }
    Ok(())
}

pub(crate) fn validate_inputs<P: ProblemDefinition + ?Sized>(
    p: &P,
    xi: &Trajectory,
    theta: &DVector<f64>,
) -> Result<()> {
    check_problem_inputs(p, xi, theta)
}

/// Stacked residual `(r₋₁, r₀, …, r_T)` of length `n_r` for the given active set.
pub fn constraint_residuals<P: ProblemDefinition + ?Sized>(
    p: &P,
    xi: &Trajectory,
    theta: &DVector<f64>,
    active: &ActiveSet,
) -> Result<DVector<f64>> {
    check_problem_inputs(p, xi, theta)?;
    let dims = p.dims();
    active.check(dims)?;
    let eval = Evaluator::new(p);
    let mut out = Vec::with_capacity(dims.n_r(active));
    out.extend((xi.state(0) - p.x_init()).iter());
    for t in 0..=dims.horizon {
        let z = xi.block(t);
        let g = eval.constraint(ConstraintKind::Inequality, t, &z, theta)?;
        out.extend(active.active_rows(t).into_iter().map(|i| g[i]));
        out.extend(eval.constraint(ConstraintKind::Equality, t, &z, theta)?.iter());
        if t < dims.horizon {
            let f = eval.constraint(ConstraintKind::Dynamics, t, &z, theta)?;
            out.extend((xi.state(t + 1) - f).iter());
        }
    }
    Ok(DVector::from_vec(out))
}

/// Flags row `i` of `g_t` iff `g_t(ξ_t; θ)_i ≥ −epsilon`.
pub fn detect_active_set<P: ProblemDefinition + ?Sized>(
    p: &P,
    xi: &Trajectory,
    theta: &DVector<f64>,
    epsilon: f64,
) -> Result<ActiveSet> {
    check_problem_inputs(p, xi, theta)?;
    let dims = p.dims();
    let eval = Evaluator::new(p);
    let masks = (0..=dims.horizon)
        .map(|t| {
            let g = eval.constraint(ConstraintKind::Inequality, t, &xi.block(t), theta)?;
            Ok(g.iter().map(|&gi| gi >= -epsilon).collect())
        })
        .collect::<Result<Vec<Vec<bool>>>>()?;
    Ok(ActiveSet { masks, epsilon })
}
