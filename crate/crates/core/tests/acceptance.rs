//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (bypassing output capture) and then asserts on it.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idoc::bench::lfd::{build_task, gradient_check, run_lfd, LfdConfig};
use idoc::bench::precision::{run_precision, summarize, PrecisionConfig};
use idoc::bench::scaling::{fit_exponent, run_scaling, time_backward, ScalingConfig};
use idoc::bench::synthetic::{generate_synthetic, SyntheticSpec};
use idoc::bench::Backend;
use idoc::blocks::{assemble_kkt_blocks, BlockBandedA, BlockDiagonal, KktBlocks};
use idoc::blocktri::dense_kkt_solve;
use idoc::envs::lqr::{LqrParameterization, LqrProblem, TerminalCost};
use idoc::forward::{solve_coc, SolverOptions};
use idoc::idoc::{trajectory_derivative, vjp, BackwardOptions, Mode};
use idoc::problem::{ActiveSet, ProblemDefinition};
use idoc::riccati::riccati_trajectory_derivative;
use idoc::Error;

static SERIAL: Mutex<()> = Mutex::new(());

/// Timing criteria must not share the machine with the other checks.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout();
    let _ = writeln!(out, "criterion {id} [{verdict}] {name}: {detail}");
    let _ = out.flush();
}

/// Blocks with random PD Hessians and `active[t]` extra equality rows at
/// stage `t`, placed ahead of the dynamics rows.
fn random_active_blocks(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize, d: usize, active: &[usize]) -> KktBlocks<f64> {
    let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let sizes: Vec<usize> = (0..=horizon).map(|t| if t < horizon { n + m } else { n }).collect();
    let h = sizes
        .iter()
        .map(|&s| {
            let x = g(s, s);
            &x * x.transpose() + DMatrix::identity(s, s) * 0.5
        })
        .collect();
    let mut diag = Vec::new();
    let mut sub = Vec::new();
    for t in 0..=horizon {
        let dyn_rows = if t < horizon { n } else { 0 };
        let blk = g(active[t] + dyn_rows, sizes[t]);
        if t < horizon {
            let mut s = DMatrix::zeros(active[t] + n, sizes[t + 1]);
            for i in 0..n {
                s[(active[t] + i, i)] = 1.0;
            }
            sub.push(s);
        }
        diag.push(blk);
    }
    let a = BlockBandedA {
        init_block: DMatrix::identity(n, sizes[0]),
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

/// Active-row counts satisfying `Σ_{s ≤ t} k_s ≤ m (t + 1)` and
/// `Σ k ≤ m T`, so generic rows keep `A` full rank.
fn random_active_counts(rng: &mut ChaCha8Rng, m: usize, horizon: usize, with_active: bool) -> Vec<usize> {
    let mut counts = vec![0; horizon + 1];
    if !with_active {
        return counts;
    }
    for c in counts.iter_mut().take(horizon) {
        *c = rng.random_range(0..=m);
    }
    let used: usize = counts.iter().sum();
    if used < m * horizon && rng.random_bool(0.5) {
        counts[horizon] = 1;
    }
    counts
}

#[test]
fn criterion_1_oracle_equivalence() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut with_rows = 0;
    let mut failures = Vec::new();
    for k in 0..50 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=3);
        let horizon = rng.random_range(1..=10);
        let d = rng.random_range(1..=6);
        let active = random_active_counts(&mut rng, m, horizon, k % 5 != 0);
        if active.iter().any(|&c| c > 0) {
            with_rows += 1;
        }
        let blocks = random_active_blocks(&mut rng, n, m, horizon, d, &active);
        let (dense, _) = dense_kkt_solve(&blocks).unwrap();
        match trajectory_derivative(&blocks, &BackwardOptions::default()) {
            Ok(dxi) => {
                let scaled = (&dxi - &dense).amax() / (1.0 + dense.amax());
                worst = worst.max(scaled);
                if scaled > 1e-8 {
                    failures.push(format!("instance {k}: {scaled:.2e}"));
                }
            }
            Err(e) => failures.push(format!("instance {k}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 10.0;
    report(
        1,
        "oracle equivalence",
        pass,
        &format!("50 instances ({with_rows} with active rows), worst scaled error {worst:.2e}, {secs:.2}s"),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_2_finite_difference_gradient() {
    let _guard = serial();
    let start = Instant::now();
    let mut errs = Vec::new();
    for constrained in [false, true] {
        let cfg = LfdConfig::cartpole(constrained);
        let (task, theta0) = build_task(&cfg).unwrap();
        let check = gradient_check(&task, &theta0, Backend::IdocFull, 0.0, &cfg.solver, 1e-5).unwrap();
        errs.push(check.max_rel_err);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = errs.iter().all(|&e| e <= 1e-3) && secs < 120.0;
    report(
        2,
        "finite-difference gradient",
        pass,
        &format!("max rel err {:.2e} (equality-only, T=30), {:.2e} (constrained, T=35), {secs:.1}s", errs[0], errs[1]),
    );
    assert!(pass);
}

#[test]
fn criterion_3_idoc_riccati_agreement() {
    let _guard = serial();
    let mut worst = 0.0f64;
    let mut compare = |blocks: &KktBlocks<f64>| {
        let a = trajectory_derivative(blocks, &BackwardOptions::default()).unwrap();
        let b = riccati_trajectory_derivative(blocks).unwrap();
        worst = worst.max((&a - &b).amax() / (1.0 + b.amax()));
    };
    for seed in 0..10 {
        let spec = SyntheticSpec {
            n: 6,
            m: 3,
            d: 5,
            horizon: 40,
            kappa: 1e2,
            seed,
        };
        compare(&generate_synthetic(&spec).unwrap().blocks);
    }
    let cfg = LfdConfig::cartpole(false);
    let (task, theta0) = build_task(&cfg).unwrap();
    for p in &task.problems {
        let sol = solve_coc(p.as_ref(), &theta0, None, &cfg.solver).unwrap();
        assert!(sol.converged);
        compare(&assemble_kkt_blocks(p.as_ref(), &sol.trajectory, &theta0, &sol.active, &sol.lambda).unwrap());
    }

    let idoc_run = run_lfd(&cfg).unwrap();
    let ric_run = run_lfd(&LfdConfig {
        backend: Backend::Riccati,
        ..cfg.clone()
    })
    .unwrap();
    let (la, lb) = (idoc_run.losses(), ric_run.losses());
    let curve_err = la
        .iter()
        .zip(&lb)
        .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
        .fold(0.0f64, f64::max);
    let complete = la.len() == cfg.iterations + 1 && lb.len() == cfg.iterations + 1;
    let pass = worst <= 1e-7 && curve_err <= 1e-6 && complete;
    report(
        3,
        "IDOC and Riccati agreement",
        pass,
        &format!(
            "Dξ scaled difference {worst:.2e}; {} loss-curve points, max rel difference {curve_err:.2e}",
            la.len().min(lb.len())
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_linear_scaling() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = ScalingConfig {
        backends: vec![Backend::IdocFull, Backend::IdocVjp],
        threads: 1,
        ..ScalingConfig::default()
    };
    let rows = run_scaling(&cfg).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for backend in &cfg.backends {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.backend == *backend)
            .map(|r| (r.horizon as f64, r.median_s))
            .collect();
        let (ts, times): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        let at = |t: f64| pts.iter().find(|p| p.0 == t).unwrap().1;
        let ratio = at(2000.0) / at(1000.0);
        let p = fit_exponent(&ts, &times);
        pass &= ratio <= 2.5 && p <= 1.2;
        details.push(format!("{backend}: T2000/T1000 = {ratio:.2}, exponent {p:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    report(4, "linear scaling", pass, &format!("{}, {secs:.0}s", details.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_5_vjp_advantage() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..=5), rng.random_range(1..=3));
        let horizon = rng.random_range(1..=10);
        let d = rng.random_range(1..=6);
        let active = random_active_counts(&mut rng, m, horizon, true);
        let blocks = random_active_blocks(&mut rng, n, m, horizon, d, &active);
        let v = DVector::from_fn(blocks.n_xi(), |_, _| rng.random_range(-1.0..1.0));
        let opts = BackwardOptions {
            mode: Mode::Vjp,
            ..BackwardOptions::default()
        };
        let g = vjp(&v, &blocks, &opts).unwrap();
        let reference = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap().tr_mul(&v);
        worst = worst.max((&g - &reference).amax() / reference.amax());
    }

    let spec = SyntheticSpec {
        n: 50,
        m: 10,
        d: 10_000,
        horizon: 1000,
        kappa: 10.0,
        seed: 0,
    };
    let (t_vjp, _) = time_backward(&spec, Backend::IdocVjp, 5, 1000).unwrap();
    let (t_full, _) = time_backward(&spec, Backend::IdocFull, 5, 1000).unwrap();
    let speedup = t_full / t_vjp;
    let pass = speedup >= 5.0 && worst <= 1e-10;
    report(
        5,
        "VJP advantage",
        pass,
        &format!("full {t_full:.2}s, vjp {t_vjp:.2}s, speed-up {speedup:.1}x; vjp vs vᵀDξ rel error {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_precision_stability() {
    let _guard = serial();
    let cfg = PrecisionConfig::default();
    let rows = run_precision(&cfg).unwrap();
    let summary = summarize(&rows);
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{:<10} {:>8} {:>12} {:>12} {:>10}", "backend", "kappa", "median_mae", "mean_mae", "non_finite");
    for s in &summary {
        let _ = writeln!(
            out,
            "{:<10} {:>8.0e} {:>12.3e} {:>12.3e} {:>10}",
            s.backend.name(),
            s.kappa,
            s.median_mae,
            s.mean_mae,
            s.non_finite
        );
    }
    let idoc_finite = rows.iter().filter(|r| r.backend == Backend::IdocFull).all(|r| r.mae.is_finite());
    let mut monotone = true;
    for backend in &cfg.backends {
        let medians: Vec<f64> = summary.iter().filter(|s| s.backend == *backend).map(|s| s.median_mae).collect();
        monotone &= medians.windows(2).all(|w| w[0] <= w[1]);
    }
    let pass = idoc_finite && monotone && rows.len() == cfg.backends.len() * 4 * 25;
    report(
        6,
        "precision stability",
        pass,
        &format!("{} rows, IDOC finite everywhere: {idoc_finite}, medians monotone in kappa: {monotone}", rows.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_constrained_lfd() {
    let _guard = serial();
    let start = Instant::now();
    let runs: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    run_lfd(&LfdConfig {
                        seed,
                        ..LfdConfig::cartpole(true)
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut passed = 0;
    let mut ratios = Vec::new();
    for run in &runs {
        match run {
            Ok(r) if r.aborted.is_none() => {
                let ratio = r.final_loss() / r.initial_loss();
                if ratio < 0.1 {
                    passed += 1;
                }
                ratios.push(format!("{ratio:.3}"));
            }
            Ok(r) => ratios.push(format!("aborted ({})", r.aborted.as_deref().unwrap_or_default())),
            Err(e) => ratios.push(format!("error ({e})")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = passed >= 4 && secs < 900.0;
    report(
        7,
        "constrained LfD",
        pass,
        &format!("{passed}/5 seeds below 10% of initial loss, final/initial = [{}], {secs:.0}s", ratios.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_8_singular_hessian_regularization() {
    let _guard = serial();
    let p = LqrProblem::random(3, 2, 10, 11, LqrParameterization::DiagonalAndDynamics, TerminalCost::Zero).unwrap();
    let th = p.nominal_theta();
    let opts = SolverOptions {
        kkt_tolerance: 1e-12,
        ..SolverOptions::default()
    };
    let sol = solve_coc(&p, &th, None, &opts).unwrap();
    assert!(sol.converged);
    let active = ActiveSet::empty(p.dims());
    let blocks = assemble_kkt_blocks(&p, &sol.trajectory, &th, &active, &sol.lambda).unwrap();
    let plain = trajectory_derivative(&blocks, &BackwardOptions::default());
    let clean_error = matches!(&plain, Err(e @ Error::SingularHessian { .. }) if e.is_numerical());

    let dxi = trajectory_derivative(
        &blocks,
        &BackwardOptions {
            prox_delta: 1e-6,
            ..BackwardOptions::default()
        },
    )
    .unwrap();
    let h = 1e-5;
    let mut fd = DMatrix::zeros(dxi.nrows(), dxi.ncols());
    for j in 0..th.len() {
        let mut tp = th.clone();
        tp[j] += h;
        let mut tm = th.clone();
        tm[j] -= h;
        let xp = solve_coc(&p, &tp, None, &opts).unwrap().trajectory.data;
        let xm = solve_coc(&p, &tm, None, &opts).unwrap().trajectory.data;
        fd.set_column(j, &((xp - xm) / (2.0 * h)));
    }
    let rel = (&dxi - &fd).amax() / fd.amax();
    let pass = clean_error && rel <= 1e-3;
    let outcome = match &plain {
        Err(e) => format!("unregularized: {e}"),
        Ok(_) => "unregularized path unexpectedly succeeded".to_string(),
    };
    report(8, "singular-H regularization", pass, &format!("{outcome}; δ=1e-6 vs resolve differences rel error {rel:.2e}"));
    assert!(pass);
}
