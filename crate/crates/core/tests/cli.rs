use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use idoc::cli::{RunConfig, RunManifest, MANIFEST_FILE};

fn idoc(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_idoc"));
    cmd.args(args).env_remove("IDOC_SEED");
    if let Some(s) = seed_env {
        cmd.env("IDOC_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = idoc(&["solve", "--no-such-flag"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_and_version_exit_0() {
    let o = idoc(&["--help"], None);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["solve", "gradcheck", "bench-scaling", "bench-precision", "lfd"] {
        assert!(stdout(&o).contains(sub));
    }
    assert_eq!(idoc(&["--version"], None).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let bad_theta = idoc(&["--out", &out, "solve", "--env", "cartpole", "--theta", "1,2"], None);
    assert_eq!(bad_theta.status.code(), Some(1));
    let bad_backend = idoc(&["--out", &out, "lfd", "--backend", "pdp"], None);
    assert_eq!(bad_backend.status.code(), Some(1));
    let bad_seed = idoc(&["--out", &out, "solve", "--env", "lqr"], Some("abc"));
    assert_eq!(bad_seed.status.code(), Some(1));
    let few_samples = idoc(&["--out", &out, "bench-scaling", "--samples", "2"], None);
    assert_eq!(few_samples.status.code(), Some(1));
    assert!(stderr(&few_samples).contains("at least 5"));
}

#[test]
fn solve_dumps_trajectory_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = idoc(&["--out", &out_arg(dir.path()), "--threads", "1", "solve", "--env", "lqr", "--T", "12"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,x_0,x_1,x_2,x_3,u_0,u_1");
    assert_eq!(lines.len(), 1 + 13);
    assert!(lines[13].starts_with("12,") && lines[13].ends_with(",,"));
    let m = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.subcommand, "solve");
    assert_eq!((m.seed, m.threads), (0, 1));
    assert!(matches!(m.config, RunConfig::Solve(ref c) if c.horizon == 12 && c.theta.len() == 7));
}

#[test]
fn unconverged_solve_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = idoc(
        &["--out", &out_arg(dir.path()), "solve", "--env", "cartpole", "--max-iterations", "1", "--no-polish"],
        None,
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let m = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(m.notes.iter().any(|n| n.contains("did not converge")));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert_eq!(idoc(&["--out", &out, "solve", "--env", "lqr"], Some("17")).status.code(), Some(0));
    assert_eq!(RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap().seed, 17);
    assert_eq!(idoc(&["--out", &out, "--seed", "3", "solve", "--env", "lqr"], Some("17")).status.code(), Some(0));
    assert_eq!(RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap().seed, 3);
}

#[test]
fn manifest_replay_is_byte_identical() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let o = idoc(
        &["--out", &out_arg(first.path()), "--seed", "4", "lfd", "--env", "lqr", "--iters", "5"],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = first.path().join(MANIFEST_FILE);
    let before = fs::read(&manifest).unwrap();
    let o = idoc(
        &["--from-manifest", manifest.to_str().unwrap(), "--out", &out_arg(second.path())],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.path().join("lfd.csv")).unwrap(),
        fs::read(second.path().join("lfd.csv")).unwrap()
    );
    assert_eq!(fs::read(&manifest).unwrap(), before, "input manifest was modified");
    let replayed = RunManifest::load(&second.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(replayed.config, RunManifest::load(&manifest).unwrap().config);
    let csv = fs::read_to_string(second.path().join("lfd.csv")).unwrap();
    assert!(csv.starts_with("iter,loss,grad_norm,theta_json\n"));
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn bench_scaling_has_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let o = idoc(
        &[
            "--out",
            &out_arg(dir.path()),
            "--threads",
            "1",
            "bench-scaling",
            "--T",
            "100,200,400",
            "--d",
            "100",
            "--backend",
            "idoc-full,idoc-vjp",
            "--n",
            "4",
            "--m",
            "2",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "backend,T,d,threads,median_s,stderr_s");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(3) == Some("1")));
}

#[test]
fn bench_precision_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = idoc(
        &[
            "--out",
            &out_arg(dir.path()),
            "bench-precision",
            "--kappa",
            "1,100",
            "--seeds",
            "2",
            "--T",
            "10",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("backend,kappa,median_mae"));
    let csv = fs::read_to_string(dir.path().join("precision.csv")).unwrap();
    assert!(csv.starts_with("backend,kappa,seed,mae\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
}

#[test]
fn gradcheck_cartpole_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = idoc(
        &["--out", &out_arg(dir.path()), "gradcheck", "--env", "cartpole", "--backend", "idoc", "--seed", "0"],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    let err: f64 = line.trim().strip_prefix("max_rel_err ").unwrap().parse().unwrap();
    assert!(err <= 1e-3);
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
}

#[test]
fn gradcheck_tolerance_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = idoc(
        &["--out", &out_arg(dir.path()), "gradcheck", "--env", "lqr", "--tolerance", "0"],
        None,
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
