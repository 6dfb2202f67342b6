//! Primal-dual interior-point solver for the forward problem.
//!
//! Inequalities become `g + s = 0` with slacks `s > 0` and a log barrier
//! `−γ Σ log s`. Each Newton step eliminates the slack and its multiplier,
//! leaving a KKT system with the same block structure as the backward pass,
//! so it is solved with the same elimination. Steps are globalized with an
//! ℓ1 merit function and backtracking; `γ` is reduced geometrically. The
//! barrier solution is finally polished by Newton's method on the detected
//! active set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{assemble_with, split_rows, stationarity_residual, BlockBandedA, BlockDiagonal};
use crate::error::{Error, Result};
use crate::idoc::PreparedBackward;
use crate::linalg::{inertia, Inertia};
use crate::problem::{
    constraint_residuals, detect_active_set, validate_inputs, ActiveSet, ConstraintKind, Evaluator,
    ProblemDefinition, Trajectory, DEFAULT_ACTIVE_EPSILON,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stationarity and feasibility tolerance, ∞-norm.
    pub kkt_tolerance: f64,
    pub barrier_gamma_init: f64,
    pub barrier_reduction: f64,
    pub barrier_gamma_min: f64,
    pub backtracking: f64,
    pub armijo: f64,
    /// Smallest nonzero diagonal shift tried on indefinite Newton blocks.
    pub regularization_floor: f64,
    pub fraction_to_boundary: f64,
    pub active_epsilon: f64,
    pub fd_fallback: bool,
    /// Newton polish on the detected active set after the barrier loop.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            kkt_tolerance: 1e-6,
            barrier_gamma_init: 0.01,
            barrier_reduction: 0.2,
            barrier_gamma_min: 1e-8,
            backtracking: 0.5,
            armijo: 1e-4,
            regularization_floor: 1e-8,
            fraction_to_boundary: 0.995,
            active_epsilon: DEFAULT_ACTIVE_EPSILON,
            fd_fallback: true,
            polish: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kkt_tolerance", self.kkt_tolerance),
            ("barrier_gamma_init", self.barrier_gamma_init),
            ("barrier_gamma_min", self.barrier_gamma_min),
            ("armijo", self.armijo),
            ("regularization_floor", self.regularization_floor),
            ("active_epsilon", self.active_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("barrier_reduction", self.barrier_reduction),
            ("backtracking", self.backtracking),
            ("fraction_to_boundary", self.fraction_to_boundary),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.armijo >= 1.0 {
            return Err(Error::Invalid("armijo must be below 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CocSolution {
    pub trajectory: Trajectory,
    /// Multipliers of `L = J − λᵀr`, partitioned like the residual of `active`.
    pub lambda: DVector<f64>,
    /// Non-negative multipliers of `g_t ≤ 0`, all rows, per timestep.
    pub inequality_multipliers: Vec<DVector<f64>>,
    /// `γ / s_i` at the last barrier iterate, all rows, per timestep.
    pub barrier_multiplier_estimates: Vec<DVector<f64>>,
    pub active: ActiveSet,
    pub converged: bool,
    pub iterations: usize,
    /// max(stationarity, equality feasibility, inequality violation), ∞-norm.
    pub final_kkt_residual: f64,
    /// max_i μ_i·(−g_i).
    pub complementarity: f64,
    pub polished: bool,
    pub message: String,
}

/// `x₀ = x_init`, `x_{t+1} = f_t(x_t, u_t; θ)`.
pub fn rollout<P: ProblemDefinition + ?Sized>(
    p: &P,
    theta: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let dims = p.dims();
    if controls.len() != dims.horizon {
        return Err(Error::DimensionMismatch {
            what: "control list",
            index: None,
            expected: dims.horizon,
            found: controls.len(),
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
    let eval = Evaluator::new(p);
    let mut traj = Trajectory::zeros(dims.n, dims.m, dims.horizon);
    let mut x = p.x_init().clone();
    if x.len() != dims.n {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            index: None,
            expected: dims.n,
            found: x.len(),
        });
    }
    for (t, u) in controls.iter().enumerate() {
        if u.len() != dims.m {
            return Err(Error::DimensionMismatch {
                what: "control",
                index: Some(t),
                expected: dims.m,
                found: u.len(),
            });
        }
        let mut z = DVector::zeros(dims.n + dims.m);
        z.rows_mut(0, dims.n).copy_from(&x);
        z.rows_mut(dims.n, dims.m).copy_from(u);
        traj.set_block(t, &z);
        x = eval
            .constraint(ConstraintKind::Dynamics, t, &z, theta)
            .map_err(|_| Error::NonFinite { what: "rollout state", t: t + 1 })?;
    }
    traj.set_block(dims.horizon, &x);
    Ok(traj)
}

/// Zero-control rollout, the default initializer.
pub fn default_initial_trajectory<P: ProblemDefinition + ?Sized>(p: &P, theta: &DVector<f64>) -> Result<Trajectory> {
    let dims = p.dims();
    rollout(p, theta, &vec![DVector::zeros(dims.m); dims.horizon])
}

/// Per-timestep values and first derivatives at the current iterate.
struct Stage {
    cost: f64,
    grad: DVector<f64>,
    g: DVector<f64>,
    jg: DMatrix<f64>,
    /// `(h_t, x_{t+1} − f_t)` and its Jacobian wrt `ξ_t`.
    c: DVector<f64>,
    jc: DMatrix<f64>,
}

struct Iterate {
    xi: Trajectory,
    s: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
    lambda: DVector<f64>,
}

struct Values {
    cost: f64,
    eq_l1: f64,
    ineq: Vec<DVector<f64>>,
}

struct Solver<'a, P: ProblemDefinition + ?Sized> {
    eval: Evaluator<'a, P>,
    theta: &'a DVector<f64>,
    opts: &'a SolverOptions,
    last_shift: f64,
}

impl<'a, P: ProblemDefinition + ?Sized> Solver<'a, P> {
    fn dims(&self) -> &crate::problem::Dimensions {
        self.eval.problem.dims()
    }

    fn stages(&self, xi: &Trajectory) -> Result<Vec<Stage>> {
        let dims = self.dims();
        let horizon = dims.horizon;
        (0..=horizon)
            .map(|t| {
                let z = xi.block(t);
                let cost = self.eval.cost(t, &z, self.theta)?;
                let grad = self.eval.cost_gradient(t, &z, self.theta)?;
                let g = self.eval.constraint(ConstraintKind::Inequality, t, &z, self.theta)?;
                let jg = self.eval.jacobian(ConstraintKind::Inequality, t, &z, self.theta)?.wrt_z;
                let h = self.eval.constraint(ConstraintKind::Equality, t, &z, self.theta)?;
                let jh = self.eval.jacobian(ConstraintKind::Equality, t, &z, self.theta)?.wrt_z;
                let n_dyn = if t < horizon { dims.n } else { 0 };
                let mut c = DVector::zeros(h.len() + n_dyn);
                let mut jc = DMatrix::zeros(h.len() + n_dyn, z.len());
                c.rows_mut(0, h.len()).copy_from(&h);
                jc.rows_mut(0, h.len()).copy_from(&jh);
                if t < horizon {
                    let f = self.eval.constraint(ConstraintKind::Dynamics, t, &z, self.theta)?;
                    let jf = self.eval.jacobian(ConstraintKind::Dynamics, t, &z, self.theta)?.wrt_z;
                    c.rows_mut(h.len(), n_dyn).copy_from(&(xi.state(t + 1) - f));
                    jc.rows_mut(h.len(), n_dyn).copy_from(&(-jf));
                }
                Ok(Stage {
                    cost,
                    grad,
                    g,
                    jg,
                    c,
                    jc,
                })
            })
            .collect()
    }

    fn values(&self, xi: &Trajectory) -> Result<Values> {
        let dims = self.dims();
        let horizon = dims.horizon;
        let mut cost = 0.0;
        let mut eq_l1 = 0.0;
        let mut ineq = Vec::with_capacity(horizon + 1);
        let init = xi.state(0) - self.eval.problem.x_init();
        eq_l1 += init.lp_norm(1);
        for t in 0..=horizon {
            let z = xi.block(t);
            cost += self.eval.cost(t, &z, self.theta)?;
            ineq.push(self.eval.constraint(ConstraintKind::Inequality, t, &z, self.theta)?);
            let h = self.eval.constraint(ConstraintKind::Equality, t, &z, self.theta)?;
            eq_l1 += h.lp_norm(1);
            if t < horizon {
                let f = self.eval.constraint(ConstraintKind::Dynamics, t, &z, self.theta)?;
                let r = xi.state(t + 1) - f;
                eq_l1 += r.lp_norm(1);
            }
        }
        Ok(Values {
            cost,
            eq_l1,
            ineq,
        })
    }

    fn equality_a(&self, stages: &[Stage]) -> BlockBandedA<f64> {
        let dims = self.dims();
        let horizon = dims.horizon;
        let mut init = DMatrix::zeros(dims.n, dims.stage_dim(0));
        init.view_mut((0, 0), (dims.n, dims.n)).fill_with_identity();
        let sub = (0..horizon)
            .map(|t| {
                let rows = stages[t].c.len();
                let mut s = DMatrix::zeros(rows, dims.stage_dim(t + 1));
                let off = dims.eq_counts[t];
                for i in 0..dims.n {
                    s[(off + i, i)] = 1.0;
                }
                s
            })
            .collect();
        BlockBandedA {
            init_block: init,
            diag: stages.iter().map(|s| s.jc.clone()).collect(),
            sub,
        }
    }

    /// `∇²J − Σλ∇²c + Σμ∇²g` per block.
    fn lagrangian_hessian(&self, xi: &Trajectory, lambda_blocks: &[DVector<f64>], mu: &[DVector<f64>]) -> Result<Vec<DMatrix<f64>>> {
        let dims = self.dims();
        let horizon = dims.horizon;
        (0..=horizon)
            .map(|t| {
                let z = xi.block(t);
                let mut h = self.eval.cost_hessian(t, &z, self.theta)?.zz;
                let lam = &lambda_blocks[t + 1];
                let s_t = dims.eq_counts[t];
                if s_t > 0 {
                    let w = lam.rows(0, s_t).into_owned();
                    h -= self.eval.weighted_hessian(ConstraintKind::Equality, t, &z, self.theta, &w)?.zz;
                }
                if t < horizon {
                    let w = lam.rows(s_t, dims.n).into_owned();
                    h += self.eval.weighted_hessian(ConstraintKind::Dynamics, t, &z, self.theta, &w)?.zz;
                }
                if !mu[t].is_empty() {
                    h += self.eval.weighted_hessian(ConstraintKind::Inequality, t, &z, self.theta, &mu[t])?.zz;
                }
                crate::linalg::symmetrize(&mut h);
                Ok(h)
            })
            .collect()
    }

    /// Solves the condensed Newton system, shifting the Hessian until the
    /// KKT matrix has the inertia of a local minimizer.
    fn newton_step(
        &mut self,
        w: &[DMatrix<f64>],
        a: &BlockBandedA<f64>,
        q: &[DVector<f64>],
        c: &[DVector<f64>],
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        let n_xi = self.dims().n_xi();
        let b: Vec<DMatrix<f64>> = q.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice())).collect();
        let cm: Vec<DMatrix<f64>> = c.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice())).collect();
        let mut shift = 0.0;
        for attempt in 0..40 {
            let blocks: Vec<DMatrix<f64>> = w
                .iter()
                .map(|h| {
                    let mut h = h.clone();
                    for i in 0..h.nrows() {
                        h[(i, i)] += shift;
                    }
                    h
                })
                .collect();
            let hd = BlockDiagonal::new(blocks);
            let accepted = match PreparedBackward::new(&hd, a, 0.0) {
                Ok(prep) if inertia_correct(&prep, &hd, n_xi) => Some(prep.solve(&b, &cm)?),
                _ => None,
            };
            if let Some((dxi, dlam)) = accepted {
                if shift > 0.0 {
                    self.last_shift = shift;
                }
                let dxi = dxi.into_iter().map(|m| m.column(0).into_owned()).collect();
                let dlam = dlam.into_iter().map(|m| m.column(0).into_owned()).collect();
                return Ok((dxi, dlam, hd.blocks));
            }
            shift = if attempt == 0 {
                if self.last_shift > 0.0 {
                    (self.last_shift / 3.0).max(self.opts.regularization_floor)
                } else {
                    self.opts.regularization_floor
                }
            } else {
                shift * 10.0
            };
            if shift > 1e12 {
                break;
            }
        }
        Err(Error::SolveFailed("Newton system could not be regularized".into()))
    }
}

fn inertia_correct(prep: &PreparedBackward<'_, f64>, h: &BlockDiagonal<f64>, n_xi: usize) -> bool {
    if prep.hessian_factors().iter().all(|f| f.is_cholesky()) {
        return true;
    }
    let mut ih = Inertia::default();
    for b in &h.blocks {
        ih += inertia(b);
    }
    let is = prep.schur_factor().inertia();
    ih.zero == 0 && is.zero == 0 && ih.positive + is.negative == n_xi
}

fn max_abs(blocks: &[DVector<f64>]) -> f64 {
    blocks.iter().map(|b| b.amax()).fold(0.0, f64::max)
}

/// Solves the problem from `init` (the zero-control rollout when `None`).
pub fn solve_coc<P: ProblemDefinition + ?Sized>(
    p: &P,
    theta: &DVector<f64>,
    init: Option<&Trajectory>,
    opts: &SolverOptions,
) -> Result<CocSolution> {
    let xi = match init {
        Some(t) => t.clone(),
        None => default_initial_trajectory(p, theta)?,
    };
    solve_from(p, theta, xi, None, opts)
}

/// Warm start from a previous solution, reusing its inequality multipliers.
pub fn solve_coc_warm<P: ProblemDefinition + ?Sized>(
    p: &P,
    theta: &DVector<f64>,
    warm: &CocSolution,
    opts: &SolverOptions,
) -> Result<CocSolution> {
    solve_from(p, theta, warm.trajectory.clone(), Some(&warm.inequality_multipliers), opts)
}

fn solve_from<P: ProblemDefinition + ?Sized>(
    p: &P,
    theta: &DVector<f64>,
    xi: Trajectory,
    warm_mu: Option<&Vec<DVector<f64>>>,
    opts: &SolverOptions,
) -> Result<CocSolution> {
    opts.validate()?;
    validate_inputs(p, &xi, theta)?;
    let dims = p.dims().clone();
    let horizon = dims.horizon;
    let has_ineq = dims.has_inequalities();
    let eval = if opts.fd_fallback {
        Evaluator::new(p)
    } else {
        Evaluator::without_fallback(p)
    };
    let mut solver = Solver {
        eval,
        theta,
        opts,
        last_shift: 0.0,
    };

    let values = solver.values(&xi)?;
    let mut gamma = if has_ineq { opts.barrier_gamma_init } else { 0.0 };
    let s: Vec<DVector<f64>> = values
        .ineq
        .iter()
        .map(|g| g.map(|gi| (-gi).max(1e-2)))
        .collect();
    let mu: Vec<DVector<f64>> = match warm_mu {
        Some(prev) if prev.len() == horizon + 1 && prev.iter().zip(&s).all(|(a, b)| a.len() == b.len()) => prev
            .iter()
            .zip(&s)
            .map(|(m, s)| m.zip_map(s, |mi, si| mi.max(gamma / si).min(1e3)))
            .collect(),
        _ => s.iter().map(|s| s.map(|si| gamma / si)).collect(),
    };
    let empty = ActiveSet::empty(&dims);
    let mut it = Iterate {
        xi,
        s,
        mu,
        lambda: DVector::zeros(dims.n_r(&empty)),
    };
    let row_sizes = dims.row_block_sizes(&empty);
    let mut nu = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut message = String::new();

    loop {
        let stages = solver.stages(&it.xi)?;
        let a = solver.equality_a(&stages);
        let lam_blocks = split_rows(&it.lambda, &row_sizes);
        let at_lam = crate::blocks::a_transpose_times(&a, &lam_blocks);
        let mut c_blocks = Vec::with_capacity(horizon + 2);
        c_blocks.push(it.xi.state(0) - p.x_init());
        c_blocks.extend(stages.iter().map(|s| s.c.clone()));

        let r_d: Vec<DVector<f64>> = (0..=horizon)
            .map(|t| &stages[t].grad - &at_lam[t] + stages[t].jg.tr_mul(&it.mu[t]))
            .collect();
        let r_g: Vec<DVector<f64>> = (0..=horizon).map(|t| &stages[t].g + &it.s[t]).collect();
        let compl = (0..=horizon)
            .map(|t| it.mu[t].component_mul(&it.s[t]).add_scalar(-gamma).amax())
            .fold(0.0, f64::max);
        let stat = max_abs(&r_d);
        let feas = max_abs(&c_blocks).max(max_abs(&r_g));
        let err = stat.max(feas).max(compl);

        if has_ineq {
            let at_floor = gamma <= opts.barrier_gamma_min * (1.0 + 1e-12);
            if at_floor && stat.max(feas) <= opts.kkt_tolerance && compl <= 10.0 * gamma.max(opts.kkt_tolerance) {
                converged = true;
                break;
            }
            if !at_floor && err <= 10.0 * gamma {
                gamma = (gamma * opts.barrier_reduction).max(opts.barrier_gamma_min);
                for t in 0..=horizon {
                    let (s_t, mu_t) = (&it.s[t], &mut it.mu[t]);
                    *mu_t = mu_t.zip_map(s_t, |m, s| m.clamp(gamma / (1e10 * s), 1e10 * gamma / s));
                }
                continue;
            }
        } else if err <= opts.kkt_tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            message = format!("maximum iterations reached (residual {err:.3e})");
            break;
        }
        iterations += 1;

        let sigma: Vec<DVector<f64>> = (0..=horizon).map(|t| it.mu[t].component_div(&it.s[t])).collect();
        let mut w = solver.lagrangian_hessian(&it.xi, &lam_blocks, &it.mu)?;
        let mut q = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let jg = &stages[t].jg;
            if jg.nrows() > 0 {
                let mut scaled = jg.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= sigma[t][i];
                }
                w[t] += jg.tr_mul(&scaled);
            }
            let inner = it.s[t].map(|si| gamma / si) + sigma[t].component_mul(&r_g[t]);
            q.push(&stages[t].grad + jg.tr_mul(&inner));
        }
        let (dxi, lam_plus, w_used) = match solver.newton_step(&w, &a, &q, &c_blocks) {
            Ok(v) => v,
            Err(e) => {
                message = e.to_string();
                break;
            }
        };
        let ds: Vec<DVector<f64>> = (0..=horizon).map(|t| -&r_g[t] - &stages[t].jg * &dxi[t]).collect();
        let dmu: Vec<DVector<f64>> = (0..=horizon)
            .map(|t| it.s[t].map(|si| gamma / si) - &it.mu[t] - sigma[t].component_mul(&ds[t]))
            .collect();

        let tau = opts.fraction_to_boundary;
        let alpha_max = max_step(&it.s, &ds, tau);
        let alpha_dual = max_step(&it.mu, &dmu, tau);

        let grad_dot: f64 = (0..=horizon).map(|t| stages[t].grad.dot(&dxi[t])).sum();
        let barrier_dot: f64 = (0..=horizon)
            .map(|t| -gamma * it.s[t].iter().zip(ds[t].iter()).map(|(s, d)| d / s).sum::<f64>())
            .sum();
        let curvature: f64 = (0..=horizon).map(|t| dxi[t].dot(&(&w_used[t] * &dxi[t]))).sum();
        let infeas_l1: f64 = c_blocks.iter().map(|c| c.lp_norm(1)).sum::<f64>()
            + r_g.iter().map(|r| r.lp_norm(1)).sum::<f64>();
        let rho = 0.1;
        if infeas_l1 > 0.0 {
            let sigma_c = if curvature > 0.0 { 0.5 * curvature } else { 0.0 };
            let bound = (grad_dot + barrier_dot + sigma_c) / ((1.0 - rho) * infeas_l1);
            if nu < bound {
                nu = bound + 1e-4 * bound.abs().max(1.0);
            }
        }
        let merit = |cost: f64, eq_l1: f64, s: &[DVector<f64>], g: &[DVector<f64>]| -> f64 {
            let log_term: f64 = s.iter().map(|s| s.iter().map(|x| x.ln()).sum::<f64>()).sum();
            let ineq_l1: f64 = s.iter().zip(g).map(|(s, g)| (s + g).lp_norm(1)).sum();
            cost - gamma * log_term + nu * (eq_l1 + ineq_l1)
        };
        let cost0: f64 = stages.iter().map(|s| s.cost).sum();
        let eq_l1_0: f64 = c_blocks.iter().map(|c| c.lp_norm(1)).sum();
        let g0: Vec<DVector<f64>> = stages.iter().map(|s| s.g.clone()).collect();
        let phi0 = merit(cost0, eq_l1_0, &it.s, &g0);
        let slope = grad_dot + barrier_dot - nu * infeas_l1;

        let mut alpha = alpha_max;
        let mut accepted = None;
        while alpha > 1e-14 {
            let mut trial = it.xi.clone();
            for t in 0..=horizon {
                let z = trial.block(t) + &dxi[t] * alpha;
                trial.set_block(t, &z);
            }
            let s_trial: Vec<DVector<f64>> = (0..=horizon).map(|t| &it.s[t] + &ds[t] * alpha).collect();
            if let Ok(v) = solver.values(&trial) {
                let phi = merit(v.cost, v.eq_l1, &s_trial, &v.ineq);
                if phi.is_finite() && phi <= phi0 + opts.armijo * alpha * slope.min(0.0) {
                    accepted = Some((trial, s_trial));
                    break;
                }
                if slope >= 0.0 && err < 1e3 * f64::EPSILON * (1.0 + cost0.abs()) {
                    accepted = Some((trial, s_trial));
                    break;
                }
            }
            alpha *= opts.backtracking;
        }
        let Some((trial, s_trial)) = accepted else {
            message = format!("line search failed (residual {err:.3e})");
            break;
        };
        it.xi = trial;
        it.s = s_trial;
        let lam_plus = crate::blocks::join_rows(&lam_plus);
        it.lambda = &it.lambda + (lam_plus - &it.lambda) * alpha;
        for t in 0..=horizon {
            let mu_new = &it.mu[t] + &dmu[t] * alpha_dual;
            it.mu[t] = mu_new.zip_map(&it.s[t], |m, s| m.clamp(gamma / (1e10 * s), 1e10 * gamma / s));
        }
    }

    finish(&mut solver, it, gamma, converged, iterations, message)
}

/// Barrier multipliers laid out on the residual of `active`, with `λ = −μ` on inequality rows.
fn barrier_lambda(dims: &crate::problem::Dimensions, it: &Iterate, active: &ActiveSet) -> DVector<f64> {
    let row_sizes = dims.row_block_sizes(active);
    let eq_sizes = dims.row_block_sizes(&ActiveSet::empty(dims));
    let eq_blocks = split_rows(&it.lambda, &eq_sizes);
    let mut blocks = Vec::with_capacity(dims.horizon + 2);
    blocks.push(eq_blocks[0].clone());
    for t in 0..=dims.horizon {
        let rows = active.active_rows(t);
        let mut b = DVector::zeros(row_sizes[t + 1]);
        for (r, &i) in rows.iter().enumerate() {
            b[r] = -it.mu[t][i];
        }
        b.rows_mut(rows.len(), eq_sizes[t + 1]).copy_from(&eq_blocks[t + 1]);
        blocks.push(b);
    }
    crate::blocks::join_rows(&blocks)
}

fn max_step(x: &[DVector<f64>], dx: &[DVector<f64>], tau: f64) -> f64 {
    let mut alpha = 1.0f64;
    for (x, d) in x.iter().zip(dx) {
        for (xi, di) in x.iter().zip(d.iter()) {
            if *di < 0.0 {
                alpha = alpha.min(-tau * xi / di);
            }
        }
    }
    alpha
}

fn finish<P: ProblemDefinition + ?Sized>(
    solver: &mut Solver<'_, P>,
    it: Iterate,
    gamma: f64,
    converged: bool,
    iterations: usize,
    mut message: String,
) -> Result<CocSolution> {
    let p = solver.eval.problem;
    let theta = solver.theta;
    let opts = solver.opts;
    let dims = p.dims().clone();
    let horizon = dims.horizon;
    let barrier_estimates: Vec<DVector<f64>> = it.s.iter().map(|s| s.map(|si| gamma / si)).collect();
    let detected = detect_active_set(p, &it.xi, theta, opts.active_epsilon)?;
    let mut xi = it.xi.clone();
    let mut active = detected.clone();
    let mut lambda = barrier_lambda(&dims, &it, &active);
    let mut polished = false;

    if opts.polish {
        // Rows whose multiplier dominates the slack are weakly active at the barrier iterate.
        let mut candidate = detected.clone();
        for t in 0..=horizon {
            for (i, flag) in candidate.masks[t].iter_mut().enumerate() {
                *flag |= it.mu[t][i] > it.s[t][i];
            }
        }
        let mut tried: Vec<ActiveSet> = Vec::new();
        let mut failure = None;
        while tried.len() < 8 && !tried.contains(&candidate) {
            let start = barrier_lambda(&dims, &it, &candidate);
            let outcome = polish(&solver.eval, theta, &it.xi, &candidate, &start, opts);
            tried.push(candidate.clone());
            match outcome {
                Ok(Polish::Accepted(x, l)) => {
                    xi = x;
                    lambda = l;
                    active = candidate;
                    polished = true;
                    break;
                }
                Ok(Polish::Adjust { drop, add }) => {
                    for (t, i) in drop {
                        candidate.masks[t][i] = false;
                    }
                    for (t, i) in add {
                        candidate.masks[t][i] = true;
                    }
                }
                Ok(Polish::Failed) => {
                    failure = Some("active-set polish rejected; barrier solution returned".to_string());
                    candidate = detected.clone();
                }
                Err(e) => {
                    failure = Some(format!("active-set polish failed: {e}"));
                    candidate = detected.clone();
                }
            }
        }
        if !polished && message.is_empty() {
            message = failure.unwrap_or_else(|| "active-set polish did not settle; barrier solution returned".into());
        }
    }
    let row_sizes = dims.row_block_sizes(&active);

    let lam_blocks = split_rows(&lambda, &row_sizes);
    let mut mu_out: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        if polished {
            let mut m = DVector::zeros(dims.ineq_counts[t]);
            for (r, i) in active.active_rows(t).into_iter().enumerate() {
                m[i] = -lam_blocks[t + 1][r];
            }
            mu_out.push(m);
        } else {
            mu_out.push(it.mu[t].clone());
        }
    }
    let (a, _, grad) = crate::blocks::constraint_jacobian_and_gradient(&solver.eval, &xi, theta, &active)?;
    let stat = stationarity_residual(&a, &lambda, &grad);
    let r = constraint_residuals(p, &xi, theta, &active)?;
    let mut ineq_violation = 0.0f64;
    let mut complementarity = 0.0f64;
    for t in 0..=horizon {
        let g = solver.eval.constraint(ConstraintKind::Inequality, t, &xi.block(t), theta)?;
        for i in 0..g.len() {
            ineq_violation = ineq_violation.max(g[i]);
            complementarity = complementarity.max(mu_out[t][i] * (-g[i]).max(0.0));
        }
    }
    let final_kkt_residual = stat.max(r.amax()).max(ineq_violation);
    let converged = converged && final_kkt_residual <= opts.kkt_tolerance * 10.0;
    Ok(CocSolution {
        trajectory: xi,
        lambda,
        inequality_multipliers: mu_out,
        barrier_multiplier_estimates: barrier_estimates,
        active,
        converged,
        iterations,
        final_kkt_residual,
        complementarity,
        polished,
        message,
    })
}

enum Polish {
    Accepted(Trajectory, DVector<f64>),
    /// Converged, but these rows have the wrong multiplier sign or are violated.
    Adjust {
        drop: Vec<(usize, usize)>,
        add: Vec<(usize, usize)>,
    },
    Failed,
}

/// Newton's method on `∇J − Aᵀλ = 0`, `r = 0` with the active rows as equalities.
fn polish<P: ProblemDefinition + ?Sized>(
    eval: &Evaluator<'_, P>,
    theta: &DVector<f64>,
    xi: &Trajectory,
    active: &ActiveSet,
    lambda: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Polish> {
    let p = eval.problem;
    let dims = p.dims();
    let horizon = dims.horizon;
    let mut xi = xi.clone();
    let mut lambda = lambda.clone();
    let mut best = f64::INFINITY;
    for _ in 0..12 {
        let blocks = assemble_with(eval, &xi, theta, active, &lambda)?;
        let (_, _, grad) = crate::blocks::constraint_jacobian_and_gradient(eval, &xi, theta, active)?;
        let r = constraint_residuals(p, &xi, theta, active)?;
        let stat = stationarity_residual(&blocks.a, &lambda, &grad);
        let err = stat.max(r.amax());
        let scale = 1.0 + grad.iter().map(|g| g.amax()).fold(0.0, f64::max);
        if err <= 1e-13 * scale || (err >= 0.5 * best && err <= 1e-9 * scale) {
            break;
        }
        best = best.min(err);
        let prep = match PreparedBackward::new(&blocks.h, &blocks.a, 0.0) {
            Ok(p) => p,
            Err(_) => return Ok(Polish::Failed),
        };
        let b: Vec<DMatrix<f64>> = grad.iter().map(|g| DMatrix::from_column_slice(g.len(), 1, g.as_slice())).collect();
        let rb = split_rows(&r, &blocks.a.row_sizes());
        let c: Vec<DMatrix<f64>> = rb.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice())).collect();
        let (dxi, lam_new) = prep.solve(&b, &c)?;
        for t in 0..=horizon {
            let z = xi.block(t) + dxi[t].column(0);
            xi.set_block(t, &z);
        }
        lambda = crate::blocks::join_rows(&lam_new.iter().map(|m| m.column(0).into_owned()).collect::<Vec<_>>());
    }
    let blocks_r = constraint_residuals(p, &xi, theta, active)?;
    let (a, _, grad) = crate::blocks::constraint_jacobian_and_gradient(eval, &xi, theta, active)?;
    let stat = stationarity_residual(&a, &lambda, &grad);
    if !(stat.max(blocks_r.amax()) <= opts.kkt_tolerance) {
        return Ok(Polish::Failed);
    }
    let row_sizes = dims.row_block_sizes(active);
    let lam_blocks = split_rows(&lambda, &row_sizes);
    let (mut drop, mut add) = (Vec::new(), Vec::new());
    for t in 0..=horizon {
        let g = eval.constraint(ConstraintKind::Inequality, t, &xi.block(t), theta)?;
        for (i, &gi) in g.iter().enumerate() {
            if !active.masks[t][i] && gi > opts.kkt_tolerance {
                add.push((t, i));
            }
        }
        for (r, i) in active.active_rows(t).into_iter().enumerate() {
            if lam_blocks[t + 1][r] > opts.kkt_tolerance {
                drop.push((t, i));
            }
        }
    }
    if drop.is_empty() && add.is_empty() {
        Ok(Polish::Accepted(xi, lambda))
    } else {
        Ok(Polish::Adjust { drop, add })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Dimensions;

    /// `x_{t+1} = x_t + u_t`, cost `Σ x² + u²`, optional `u ≥ −u_max`.
    struct Integrator {
        dims: Dimensions,
        x_init: DVector<f64>,
        bound: Option<f64>,
    }

    impl Integrator {
        fn new(horizon: usize, bound: Option<f64>) -> Self {
            let q = usize::from(bound.is_some());
            let mut ineq = vec![q; horizon + 1];
            ineq[horizon] = 0;
            Self {
                dims: Dimensions::with_constraints(1, 1, 1, horizon, ineq, vec![0; horizon + 1]).unwrap(),
                x_init: DVector::from_element(1, 2.0),
                bound,
            }
        }
    }

    impl ProblemDefinition for Integrator {
        fn dims(&self) -> &Dimensions {
            &self.dims
        }
        fn x_init(&self) -> &DVector<f64> {
            &self.x_init
        }
        fn cost(&self, _t: usize, z: &DVector<f64>, th: &DVector<f64>) -> f64 {
            th[0] * z.norm_squared()
        }
        fn dynamics(&self, _t: usize, z: &DVector<f64>, _th: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, z[0] + z[1])
        }
        fn inequality(&self, t: usize, z: &DVector<f64>, _th: &DVector<f64>) -> DVector<f64> {
            match self.bound {
                Some(b) if t < self.dims.horizon => DVector::from_element(1, -z[1] - b),
                _ => DVector::zeros(0),
            }
        }
    }

    #[test]
    fn zero_controls_keep_integrator_constant() {
        let p = Integrator::new(4, None);
        let traj = default_initial_trajectory(&p, &DVector::from_element(1, 1.0)).unwrap();
        for t in 0..=4 {
            assert_eq!(traj.state(t)[0], 2.0);
        }
    }

    #[test]
    fn unconstrained_solve_and_warm_start() {
        let p = Integrator::new(6, None);
        let th = DVector::from_element(1, 1.0);
        let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "{}", sol.message);
        assert!(sol.final_kkt_residual < 1e-9);
        let again = solve_coc_warm(&p, &th, &sol, &SolverOptions::default()).unwrap();
        assert!(again.converged && again.iterations <= 2);
        let (_, controls) = sol.trajectory.unpack();
        let replay = rollout(&p, &th, &controls).unwrap();
        assert!((replay.data - &sol.trajectory.data).amax() < 1e-10);
    }

    #[test]
    fn box_constraint_becomes_active() {
        let p = Integrator::new(6, Some(0.5));
        let th = DVector::from_element(1, 1.0);
        let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "{}", sol.message);
        assert!(sol.polished);
        assert!(sol.active.count() >= 1);
        assert!((sol.trajectory.control(0)[0] + 0.5).abs() < 1e-9);
        for m in &sol.inequality_multipliers {
            assert!(m.iter().all(|&x| x >= -1e-6));
        }
        let rec = crate::blocks::recover_multipliers(&p, &sol.trajectory, &th, &sol.active).unwrap();
        assert!((rec.lambda - &sol.lambda).amax() < 1e-6);
    }
}
