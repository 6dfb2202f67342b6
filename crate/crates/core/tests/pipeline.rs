use nalgebra::DVector;

use idoc::blocks::assemble_kkt_blocks;
use idoc::envs::cartpole::{Cartpole, CartpoleParams};
use idoc::envs::lqr::lqr_problem;
use idoc::forward::{solve_coc, solve_coc_warm, SolverOptions};
use idoc::idoc::{trajectory_derivative, BackwardOptions};
use idoc::problem::ProblemDefinition;
use idoc::riccati::riccati_trajectory_derivative;

fn resolve_difference(p: &dyn ProblemDefinition, theta: &DVector<f64>, j: usize, h: f64, opts: &SolverOptions) -> DVector<f64> {
    let base = solve_coc(p, theta, None, opts).unwrap();
    let mut tp = theta.clone();
    tp[j] += h;
    let mut tm = theta.clone();
    tm[j] -= h;
    let xp = solve_coc_warm(p, &tp, &base, opts).unwrap();
    let xm = solve_coc_warm(p, &tm, &base, opts).unwrap();
    assert!(xp.converged && xm.converged);
    (xp.trajectory.data - xm.trajectory.data) / (2.0 * h)
}

#[test]
fn lqr_derivative_matches_closed_form_differences() {
    let p = lqr_problem(4, 2, 15, 3).unwrap();
    let th = p.nominal_theta();
    let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
    let blocks = assemble_kkt_blocks(&p, &sol.trajectory, &th, &sol.active, &sol.lambda).unwrap();
    let dxi = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
    let ric = riccati_trajectory_derivative(&blocks).unwrap();
    assert!((&dxi - &ric).amax() < 1e-10);
    let h = 1e-6;
    for j in 0..th.len() {
        let mut tp = th.clone();
        tp[j] += h;
        let mut tm = th.clone();
        tm[j] -= h;
        let fd = (p.closed_form(&tp).unwrap().data - p.closed_form(&tm).unwrap().data) / (2.0 * h);
        assert!((dxi.column(j) - fd).amax() < 1e-6, "column {j}");
    }
}

#[test]
fn constrained_cartpole_derivative_matches_resolves() {
    let p = Cartpole::new(35, 0.1, true).unwrap();
    let th = CartpoleParams::default().to_theta(true);
    let opts = SolverOptions {
        kkt_tolerance: 1e-9,
        ..SolverOptions::default()
    };
    let sol = solve_coc(&p, &th, None, &opts).unwrap();
    assert!(sol.converged);
    assert!(sol.active.count() > 0, "swing-up should touch a bound");
    let blocks = assemble_kkt_blocks(&p, &sol.trajectory, &th, &sol.active, &sol.lambda).unwrap();
    let dxi = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
    for j in [0, 5, 8] {
        let fd = resolve_difference(&p, &th, j, 1e-5, &opts);
        let err = (dxi.column(j) - &fd).amax() / fd.amax().max(1e-8);
        assert!(err < 1e-3, "parameter {j}: relative error {err:.3e}");
    }
}

#[test]
fn unconstrained_cartpole_solution_is_stationary() {
    let p = Cartpole::new(30, 0.1, false).unwrap();
    let th = CartpoleParams::default().to_theta(false);
    let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.final_kkt_residual <= 1e-6);
    assert_eq!(sol.active.count(), 0);
    assert_eq!(sol.trajectory.len(), p.dims().n_xi());
}
