//! Learning from demonstrations: recover `θ` by gradient descent on the
//! mean-squared imitation error `L = (1/N) Σ_i ‖ξ_i(θ) − ξ_i^demo‖²`.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Backend;
use crate::blocks::assemble_kkt_blocks;
use crate::envs::cartpole::{Cartpole, CartpoleParams};
use crate::envs::lqr::LqrProblem;
use crate::error::{Error, Result};
use crate::forward::{rollout, solve_coc, solve_coc_warm, CocSolution, SolverOptions};
use crate::problem::{ProblemDefinition, Trajectory};

pub const LFD_HEADER: &str = "iter,loss,grad_norm,theta_json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    Cartpole,
    Lqr,
}

impl std::str::FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvId::Cartpole),
            "lqr" => Ok(EnvId::Lqr),
            other => Err(Error::Invalid(format!("unknown environment '{other}' (expected cartpole or lqr)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfdConfig {
    pub env: EnvId,
    pub constrained: bool,
    pub n_demos: usize,
    pub lr: f64,
    pub iterations: usize,
    /// `θ₀ = θ★ + U(−1, 1) · noise · |θ★|`, elementwise.
    pub noise: f64,
    pub backend: Backend,
    pub seed: u64,
    pub horizon: usize,
    pub dt: f64,
    pub prox_delta: f64,
    pub solver: SolverOptions,
}

impl LfdConfig {
    /// Cartpole defaults: `T = 30`, five demonstrations and `lr = 1e-4`
    /// without constraints; `T = 35`, one demonstration, `lr = 8e-5` and
    /// `γ₀ = 0.01` with them.
    pub fn cartpole(constrained: bool) -> Self {
        let solver = SolverOptions {
            barrier_gamma_init: 0.01,
            ..SolverOptions::default()
        };
        Self {
            env: EnvId::Cartpole,
            constrained,
            n_demos: if constrained { 1 } else { 5 },
            lr: if constrained { 8e-5 } else { 1e-4 },
            iterations: if constrained { 500 } else { 100 },
            noise: 0.5,
            backend: Backend::IdocFull,
            seed: 0,
            horizon: if constrained { 35 } else { 30 },
            dt: 0.1,
            prox_delta: 0.0,
            solver,
        }
    }

    pub fn lqr() -> Self {
        Self {
            env: EnvId::Lqr,
            constrained: false,
            n_demos: 3,
            lr: 1e-2,
            iterations: 100,
            noise: 0.5,
            backend: Backend::IdocFull,
            seed: 0,
            horizon: 20,
            dt: 0.1,
            prox_delta: 0.0,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.n_demos == 0 {
            return Err(Error::Invalid("at least one demonstration is required".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid(format!("noise scale must be non-negative, got {}", self.noise)));
        }
        if self.env == EnvId::Lqr && self.constrained {
            return Err(Error::Invalid("the LQR environment has no inequality constraints".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        self.solver.validate()
    }
}

/// Problems (one per demonstration initial state), `θ★` and the demonstrations.
pub struct LfdTask {
    pub problems: Vec<Box<dyn ProblemDefinition>>,
    pub theta_true: DVector<f64>,
    pub demos: Vec<Trajectory>,
}

fn build_problems(cfg: &LfdConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Box<dyn ProblemDefinition>>, DVector<f64>)> {
    let mut problems: Vec<Box<dyn ProblemDefinition>> = Vec::with_capacity(cfg.n_demos);
    match cfg.env {
        EnvId::Cartpole => {
            let theta = CartpoleParams::default().to_theta(cfg.constrained);
            for _ in 0..cfg.n_demos {
                let x0 = DVector::from_vec(vec![
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ]);
                problems.push(Box::new(Cartpole::new(cfg.horizon, cfg.dt, cfg.constrained)?.with_initial_state(x0)?));
            }
            Ok((problems, theta))
        }
        EnvId::Lqr => {
            let base = crate::envs::lqr::lqr_problem(4, 2, cfg.horizon, cfg.seed)?;
            let theta = base.nominal_theta();
            for _ in 0..cfg.n_demos {
                let x0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
                let p: LqrProblem = base.clone().with_initial_state(x0)?;
                problems.push(Box::new(p));
            }
            Ok((problems, theta))
        }
    }
}

/// Generates the demonstrations at `θ★` and the noisy starting point `θ₀`.
pub fn build_task(cfg: &LfdConfig) -> Result<(LfdTask, DVector<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (problems, theta_true) = build_problems(cfg, &mut rng)?;
    let mut demos = Vec::with_capacity(problems.len());
    for (i, p) in problems.iter().enumerate() {
        let sol = solve_coc(p.as_ref(), &theta_true, None, &cfg.solver)?;
        if !sol.converged {
            return Err(Error::SolveFailed(format!("demonstration {i} did not converge: {}", sol.message)));
        }
        demos.push(sol.trajectory);
    }
    let theta0 = theta_true.map(|t| t + rng.random_range(-1.0..1.0) * cfg.noise * t.abs());
    Ok((
        LfdTask {
            problems,
            theta_true,
            demos,
        },
        theta0,
    ))
}

/// Loss and backend gradient at `θ`, warm-starting from (and updating) `warm`.
pub fn loss_and_gradient(
    task: &LfdTask,
    theta: &DVector<f64>,
    backend: Backend,
    prox_delta: f64,
    opts: &SolverOptions,
    warm: &mut [Option<CocSolution>],
) -> Result<(f64, DVector<f64>)> {
    let n = task.problems.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for (i, p) in task.problems.iter().enumerate() {
        let sol = forward(p.as_ref(), theta, opts, warm[i].as_ref(), &task.demos[i])?;
        let diff = &sol.trajectory.data - &task.demos[i].data;
        loss += diff.norm_squared() / n;
        let v = diff * (2.0 / n);
        let blocks = assemble_kkt_blocks(p.as_ref(), &sol.trajectory, theta, &sol.active, &sol.lambda)?;
        grad += backend.loss_gradient(&blocks, &v, prox_delta)?;
        warm[i] = Some(sol);
    }
    Ok((loss, grad))
}

/// Warm solve when available, then a rollout of the demonstrated controls,
/// then the zero-control start.
fn forward(
    p: &dyn ProblemDefinition,
    theta: &DVector<f64>,
    opts: &SolverOptions,
    warm: Option<&CocSolution>,
    demo: &Trajectory,
) -> Result<CocSolution> {
    let from_demo = || -> Result<CocSolution> {
        let (_, controls) = demo.unpack();
        solve_coc(p, theta, Some(&rollout(p, theta, &controls)?), opts)
    };
    let mut sol = match warm {
        Some(w) => solve_coc_warm(p, theta, w, opts)?,
        None => from_demo()?,
    };
    if !sol.converged && warm.is_some() {
        sol = from_demo()?;
    }
    if !sol.converged {
        sol = solve_coc(p, theta, None, opts)?;
    }
    if !sol.converged {
        return Err(Error::SolveFailed(format!(
            "forward solve did not converge (residual {:.3e}): {}",
            sol.final_kkt_residual, sol.message
        )));
    }
    Ok(sol)
}

fn loss_from(task: &LfdTask, theta: &DVector<f64>, opts: &SolverOptions, warm: &[Option<CocSolution>]) -> Result<f64> {
    let n = task.problems.len() as f64;
    let mut loss = 0.0;
    for (i, p) in task.problems.iter().enumerate() {
        let sol = forward(p.as_ref(), theta, opts, warm[i].as_ref(), &task.demos[i])?;
        loss += (&sol.trajectory.data - &task.demos[i].data).norm_squared() / n;
    }
    Ok(loss)
}

/// Imitation loss through cold forward solves.
pub fn imitation_loss(task: &LfdTask, theta: &DVector<f64>, opts: &SolverOptions) -> Result<f64> {
    loss_from(task, theta, opts, &vec![None; task.problems.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfdRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub theta: Vec<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LfdRun {
    pub rows: Vec<LfdRow>,
    pub theta_true: Vec<f64>,
    pub theta_init: Vec<f64>,
    pub aborted: Option<String>,
    pub final_lr: f64,
}

impl LfdRun {
    pub fn initial_loss(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.iter().rev().find(|r| !r.failed).map_or(f64::NAN, |r| r.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| !r.failed).map(|r| r.loss).collect()
    }
}

/// Runs `iterations` gradient steps and records `iterations + 1` iterates.
///
/// A failed forward or backward solve rejects the step that produced the
/// iterate and retries it with half the learning rate; a second failure
/// stops the run.
pub fn run_lfd(cfg: &LfdConfig) -> Result<LfdRun> {
    let (task, theta0) = build_task(cfg)?;
    run_lfd_on(cfg, &task, theta0)
}

pub fn run_lfd_on(cfg: &LfdConfig, task: &LfdTask, theta0: DVector<f64>) -> Result<LfdRun> {
    let mut warm: Vec<Option<CocSolution>> = vec![None; task.problems.len()];
    let mut theta = theta0.clone();
    let mut lr = cfg.lr;
    let mut halved = false;
    let mut rows = Vec::with_capacity(cfg.iterations + 1);
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut aborted = None;
    let mut k = 0;
    while k <= cfg.iterations {
        match loss_and_gradient(task, &theta, cfg.backend, cfg.prox_delta, &cfg.solver, &mut warm) {
            Ok((loss, grad)) => {
                rows.push(LfdRow {
                    iter: k,
                    loss,
                    grad_norm: grad.norm(),
                    theta: theta.iter().copied().collect(),
                    failed: false,
                });
                let next = &theta - &grad * lr;
                prev = Some((theta, grad));
                theta = next;
                k += 1;
            }
            Err(e) => {
                rows.push(LfdRow {
                    iter: k,
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    theta: theta.iter().copied().collect(),
                    failed: true,
                });
                let Some((th_prev, g_prev)) = prev.as_ref() else {
                    return Err(e);
                };
                if halved {
                    aborted = Some(format!("iteration {k}: {e}"));
                    break;
                }
                halved = true;
                lr *= 0.5;
                theta = th_prev - g_prev * lr;
            }
        }
    }
    Ok(LfdRun {
        rows,
        theta_true: task.theta_true.iter().copied().collect(),
        theta_init: theta0.iter().copied().collect(),
        aborted,
        final_lr: lr,
    })
}

pub fn write_lfd_csv<W: Write>(rows: &[LfdRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LFD_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            serde_json::to_string(&r.theta)?,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    /// `‖g − g_fd‖_∞ / ‖g_fd‖_∞`.
    pub max_rel_err: f64,
}

/// Backend gradient of the imitation loss against central differences
/// through the forward solver, step `h·max(1, |θ_j|)`. The perturbed
/// solves are warm-started at the solution for `θ`.
pub fn gradient_check(
    task: &LfdTask,
    theta: &DVector<f64>,
    backend: Backend,
    prox_delta: f64,
    opts: &SolverOptions,
    h: f64,
) -> Result<GradientCheck> {
    let mut warm = vec![None; task.problems.len()];
    let (_, g) = loss_and_gradient(task, theta, backend, prox_delta, opts, &mut warm)?;
    let mut fd = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let step = h * theta[j].abs().max(1.0);
        let mut tp = theta.clone();
        tp[j] += step;
        let mut tm = theta.clone();
        tm[j] -= step;
        fd[j] = (loss_from(task, &tp, opts, &warm)? - loss_from(task, &tm, opts, &warm)?) / (2.0 * step);
    }
    let max_rel_err = (&g - &fd).amax() / fd.amax().max(f64::MIN_POSITIVE);
    Ok(GradientCheck {
        analytic: g.iter().copied().collect(),
        finite_difference: fd.iter().copied().collect(),
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::constraint_residuals;
    use crate::problem::ActiveSet;

    #[test]
    fn zero_noise_starts_at_the_minimum() {
        let cfg = LfdConfig {
            noise: 0.0,
            iterations: 0,
            ..LfdConfig::cartpole(false)
        };
        let run = run_lfd(&cfg).unwrap();
        assert_eq!(run.rows.len(), 1);
        assert!(run.rows[0].loss < 1e-12);
        assert!(run.rows[0].grad_norm < 1e-6);
    }

    #[test]
    fn demonstrations_satisfy_their_constraints() {
        let cfg = LfdConfig::cartpole(true);
        let (task, _) = build_task(&cfg).unwrap();
        for (p, demo) in task.problems.iter().zip(&task.demos) {
            let full = ActiveSet {
                masks: p.dims().ineq_counts.iter().map(|&q| vec![true; q]).collect(),
                epsilon: 0.0,
            };
            let r = constraint_residuals(p.as_ref(), demo, &task.theta_true, &full).unwrap();
            let n_init = p.dims().n;
            let mut off = n_init;
            for t in 0..=p.dims().horizon {
                let q = p.dims().ineq_counts[t];
                assert!(r.rows(off, q).max() <= 1e-6);
                let eq = if t < p.dims().horizon { p.dims().n } else { 0 };
                assert!(r.rows(off + q, eq).amax() <= 1e-6);
                off += q + eq;
            }
            assert!(r.rows(0, n_init).amax() <= 1e-12);
        }
    }

    #[test]
    fn lqr_learning_reduces_loss_and_csv_is_stable() {
        let cfg = LfdConfig {
            iterations: 20,
            ..LfdConfig::lqr()
        };
        let a = run_lfd(&cfg).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(a.rows.len(), 21);
        assert!(a.final_loss() < a.initial_loss());
        let b = run_lfd(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_lfd_csv(&a.rows, &mut x).unwrap();
        write_lfd_csv(&b.rows, &mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with(LFD_HEADER));
    }

    #[test]
    fn lqr_gradient_matches_differences() {
        let cfg = LfdConfig::lqr();
        let (task, theta0) = build_task(&cfg).unwrap();
        for backend in Backend::ALL {
            let gc = gradient_check(&task, &theta0, backend, 0.0, &cfg.solver, 1e-5).unwrap();
            assert!(gc.max_rel_err < 1e-5, "{backend}: {}", gc.max_rel_err);
        }
    }
}
