//! Command-line entry point: forward solves, gradient checks and benchmarks.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bench::lfd::{build_task, gradient_check, run_lfd, write_lfd_csv, EnvId, LfdConfig};
use crate::bench::precision::{run_precision, summarize, write_precision_csv, PrecisionConfig};
use crate::bench::scaling::{run_scaling, write_scaling_csv, ScalingConfig};
use crate::bench::Backend;
use crate::envs::cartpole::{Cartpole, CartpoleParams};
use crate::envs::lqr::lqr_problem;
use crate::error::{Error, Result};
use crate::forward::{solve_coc, CocSolution, SolverOptions};
use crate::problem::{ProblemDefinition, Trajectory};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "idoc", version, about = "Differentiate through constrained optimal control problems")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Seed for all randomness; falls back to IDOC_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads, default = hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Re-run the resolved configuration stored in a manifest.
    #[arg(long, global = true)]
    from_manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve an environment at θ and dump the trajectory.
    Solve(SolveArgs),
    /// Compare a backend's loss gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Backward-pass wall time against horizon and parameter count.
    BenchScaling(ScalingArgs),
    /// Single- versus double-precision error against Hessian conditioning.
    BenchPrecision(PrecisionArgs),
    /// Learning from demonstrations by gradient descent.
    Lfd(LfdArgs),
}

#[derive(Debug, Args, Default)]
struct SolverArgs {
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    kkt_tolerance: Option<f64>,
    /// Initial barrier parameter.
    #[arg(long)]
    gamma: Option<f64>,
    /// Active-set threshold ε.
    #[arg(long)]
    active_epsilon: Option<f64>,
    /// Disable the active-set Newton polish.
    #[arg(long)]
    no_polish: bool,
}

impl SolverArgs {
    fn apply(&self, mut o: SolverOptions) -> SolverOptions {
        if let Some(v) = self.max_iterations {
            o.max_iterations = v;
        }
        if let Some(v) = self.kkt_tolerance {
            o.kkt_tolerance = v;
        }
        if let Some(v) = self.gamma {
            o.barrier_gamma_init = v;
        }
        if let Some(v) = self.active_epsilon {
            o.active_epsilon = v;
        }
        if self.no_polish {
            o.polish = false;
        }
        o
    }
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long, default_value = "cartpole")]
    env: EnvId,
    #[arg(long)]
    constrained: bool,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Comma-separated parameter vector, default θ★.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "cartpole")]
    env: EnvId,
    #[arg(long, default_value = "idoc")]
    backend: Backend,
    #[arg(long)]
    constrained: bool,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Exit with status 2 when the relative error exceeds this.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long)]
    prox_delta: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Args)]
struct ScalingArgs {
    #[arg(long = "T", value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long = "d", value_delimiter = ',')]
    ds: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    backend: Option<Vec<Backend>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    chunk_columns: Option<usize>,
}

#[derive(Debug, Args)]
struct PrecisionArgs {
    #[arg(long, value_delimiter = ',')]
    kappa: Option<Vec<f64>>,
    /// Seeds per κ.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    backend: Option<Vec<Backend>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "T")]
    horizon: Option<usize>,
}

#[derive(Debug, Args)]
struct LfdArgs {
    #[arg(long, default_value = "cartpole")]
    env: EnvId,
    #[arg(long)]
    constrained: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    demos: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    prox_delta: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub env: EnvId,
    pub constrained: bool,
    pub horizon: usize,
    pub dt: f64,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Task the gradient is checked on, evaluated at its noisy `θ₀`.
    pub task: LfdConfig,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "settings", rename_all = "kebab-case")]
pub enum RunConfig {
    Solve(SolveConfig),
    Gradcheck(GradcheckConfig),
    BenchScaling(ScalingConfig),
    BenchPrecision(PrecisionConfig),
    Lfd(LfdConfig),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Solve(_) => "solve",
            RunConfig::Gradcheck(_) => "gradcheck",
            RunConfig::BenchScaling(_) => "bench-scaling",
            RunConfig::BenchPrecision(_) => "bench-precision",
            RunConfig::Lfd(_) => "lfd",
        }
    }

    fn artifact(&self) -> &'static str {
        match self {
            RunConfig::Solve(_) => "trajectory.csv",
            RunConfig::Gradcheck(_) => "gradcheck.csv",
            RunConfig::BenchScaling(_) => "scaling.csv",
            RunConfig::BenchPrecision(_) => "precision.csv",
            RunConfig::Lfd(_) => "lfd.csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: RunConfig,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 on numerical failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("IDOC_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("IDOC_SEED must be an unsigned integer, got '{s}'"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<i32> {
    let (config, seed, threads, out) = match &cli.from_manifest {
        Some(path) => {
            if cli.command.is_some() {
                return Err(Error::Invalid("--from-manifest cannot be combined with a subcommand".into()));
            }
            let m = RunManifest::load(path)?;
            let out = match (&cli.out, m.artifacts.first().and_then(|a| a.parent())) {
                (Some(o), _) => o.clone(),
                (None, Some(p)) => p.to_path_buf(),
                (None, None) => PathBuf::from("."),
            };
            (m.config, m.seed, cli.threads.unwrap_or(m.threads), out)
        }
        None => {
            let Some(command) = cli.command else {
                return Err(Error::Invalid("a subcommand is required (see --help)".into()));
            };
            let seed = match cli.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let threads = cli
                .threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            (resolve(command, seed, threads)?, seed, threads, cli.out.unwrap_or_else(|| PathBuf::from(".")))
        }
    };
    if threads == 0 {
        return Err(Error::Invalid("--threads must be positive".into()));
    }
    fs::create_dir_all(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| execute(config, seed, threads, &out))
}

fn resolve(command: Command, seed: u64, threads: usize) -> Result<RunConfig> {
    let config = match command {
        Command::Solve(a) => {
            let (horizon, dt, theta) = match a.env {
                EnvId::Cartpole => {
                    let preset = LfdConfig::cartpole(a.constrained);
                    let theta = CartpoleParams::default().to_theta(a.constrained);
                    (a.horizon.unwrap_or(preset.horizon), a.dt.unwrap_or(preset.dt), theta)
                }
                EnvId::Lqr => {
                    let preset = LfdConfig::lqr();
                    let horizon = a.horizon.unwrap_or(preset.horizon);
                    let theta = lqr_problem(4, 2, horizon, seed)?.nominal_theta();
                    (horizon, a.dt.unwrap_or(preset.dt), theta)
                }
            };
            let solver = match a.env {
                EnvId::Cartpole => LfdConfig::cartpole(a.constrained).solver,
                EnvId::Lqr => SolverOptions::default(),
            };
            RunConfig::Solve(SolveConfig {
                env: a.env,
                constrained: a.constrained,
                horizon,
                dt,
                theta: a.theta.unwrap_or_else(|| theta.iter().copied().collect()),
                seed,
                solver: a.solver.apply(solver),
            })
        }
        Command::Gradcheck(a) => {
            let mut task = preset(a.env, a.constrained);
            task.backend = a.backend;
            task.seed = seed;
            if let Some(d) = a.prox_delta {
                task.prox_delta = d;
            }
            task.solver = a.solver.apply(task.solver);
            RunConfig::Gradcheck(GradcheckConfig {
                task,
                step: a.step,
                tolerance: a.tolerance,
            })
        }
        Command::BenchScaling(a) => {
            let d = ScalingConfig::default();
            RunConfig::BenchScaling(ScalingConfig {
                n: a.n.unwrap_or(d.n),
                m: a.m.unwrap_or(d.m),
                kappa: a.kappa.unwrap_or(d.kappa),
                seed,
                horizons: a.horizons.unwrap_or(d.horizons),
                ds: a.ds.unwrap_or(d.ds),
                backends: a.backend.unwrap_or(d.backends),
                samples: a.samples.unwrap_or(d.samples),
                repeats: a.repeats.unwrap_or(d.repeats),
                threads,
                chunk_columns: a.chunk_columns.unwrap_or(d.chunk_columns),
            })
        }
        Command::BenchPrecision(a) => {
            let d = PrecisionConfig::default();
            RunConfig::BenchPrecision(PrecisionConfig {
                n: a.n.unwrap_or(d.n),
                m: a.m.unwrap_or(d.m),
                d: a.d.unwrap_or(d.d),
                horizon: a.horizon.unwrap_or(d.horizon),
                kappas: a.kappa.unwrap_or(d.kappas),
                seeds: a.seeds.unwrap_or(d.seeds),
                base_seed: seed,
                backends: a.backend.unwrap_or(d.backends),
            })
        }
        Command::Lfd(a) => {
            let mut c = preset(a.env, a.constrained);
            c.seed = seed;
            if let Some(v) = a.iters {
                c.iterations = v;
            }
            if let Some(v) = a.lr {
                c.lr = v;
            }
            if let Some(v) = a.backend {
                c.backend = v;
            }
            if let Some(v) = a.demos {
                c.n_demos = v;
            }
            if let Some(v) = a.noise {
                c.noise = v;
            }
            if let Some(v) = a.horizon {
                c.horizon = v;
            }
            if let Some(v) = a.prox_delta {
                c.prox_delta = v;
            }
            c.solver = a.solver.apply(c.solver);
            RunConfig::Lfd(c)
        }
    };
    Ok(config)
}

fn preset(env: EnvId, constrained: bool) -> LfdConfig {
    match env {
        EnvId::Cartpole => LfdConfig::cartpole(constrained),
        EnvId::Lqr => LfdConfig {
            constrained,
            ..LfdConfig::lqr()
        },
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn execute(config: RunConfig, seed: u64, threads: usize, out: &Path) -> Result<i32> {
    let artifact = out.join(config.artifact());
    let mut notes = Vec::new();
    let mut code = 0;
    match &config {
        RunConfig::Solve(c) => {
            let sol = run_solve(c)?;
            write_trajectory_csv(&sol.trajectory, create(&artifact)?)?;
            eprintln!(
                "converged {} after {} iterations, residual {:.3e}, {} active rows",
                sol.converged,
                sol.iterations,
                sol.final_kkt_residual,
                sol.active.count()
            );
            if !sol.converged {
                notes.push(format!("forward solve did not converge: {}", sol.message));
                code = 2;
            }
        }
        RunConfig::Gradcheck(c) => {
            let (task, theta0) = build_task(&c.task)?;
            let check = gradient_check(&task, &theta0, c.task.backend, c.task.prox_delta, &c.task.solver, c.step)?;
            let mut w = csv::Writer::from_writer(create(&artifact)?);
            w.write_record(["param", "analytic", "finite_difference"])?;
            for (j, (g, f)) in check.analytic.iter().zip(&check.finite_difference).enumerate() {
                w.write_record([j.to_string(), g.to_string(), f.to_string()])?;
            }
            w.flush()?;
            println!("max_rel_err {:e}", check.max_rel_err);
            if !(check.max_rel_err <= c.tolerance) {
                eprintln!("gradient check exceeds tolerance {:e}", c.tolerance);
                code = 2;
            }
        }
        RunConfig::BenchScaling(c) => {
            let rows = run_scaling(c)?;
            write_scaling_csv(&rows, create(&artifact)?)?;
            for r in rows.iter().filter(|r| r.error.is_some()) {
                notes.push(format!("{} T={} d={}: {}", r.backend, r.horizon, r.d, r.error.as_deref().unwrap_or("")));
            }
        }
        RunConfig::BenchPrecision(c) => {
            let rows = run_precision(c)?;
            write_precision_csv(&rows, create(&artifact)?)?;
            println!("backend,kappa,median_mae,mean_mae,stderr_mae,non_finite");
            for s in summarize(&rows) {
                println!(
                    "{},{},{:e},{:e},{:e},{}",
                    s.backend, s.kappa, s.median_mae, s.mean_mae, s.stderr_mae, s.non_finite
                );
            }
        }
        RunConfig::Lfd(c) => {
            if c.constrained {
                notes.push("forward: log-barrier interior point; backward: active-set equality KKT".into());
            }
            let run = run_lfd(c)?;
            write_lfd_csv(&run.rows, create(&artifact)?)?;
            println!(
                "initial loss {:e}, final loss {:e}, final lr {:e}",
                run.initial_loss(),
                run.final_loss(),
                run.final_lr
            );
            if let Some(reason) = &run.aborted {
                eprintln!("aborted: {reason}");
                notes.push(format!("aborted: {reason}"));
                code = 2;
            }
        }
    }
    let manifest = RunManifest {
        subcommand: config.name().to_string(),
        config,
        seed,
        threads,
        artifacts: vec![artifact],
        version: env!("CARGO_PKG_VERSION").to_string(),
        notes,
    };
    let mut f = create(&out.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    f.flush()?;
    Ok(code)
}

fn run_solve(c: &SolveConfig) -> Result<CocSolution> {
    let theta = DVector::from_column_slice(&c.theta);
    let problem: Box<dyn ProblemDefinition> = match c.env {
        EnvId::Cartpole => {
            CartpoleParams::from_theta(&theta)?.validate()?;
            Box::new(Cartpole::new(c.horizon, c.dt, c.constrained)?)
        }
        EnvId::Lqr => {
            if c.constrained {
                return Err(Error::Invalid("the LQR environment has no inequality constraints".into()));
            }
            Box::new(lqr_problem(4, 2, c.horizon, c.seed)?)
        }
    };
    let dims = problem.dims();
    if theta.len() != dims.d {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            index: None,
            expected: dims.d,
            found: theta.len(),
        });
    }
    solve_coc(problem.as_ref(), &theta, None, &c.solver)
}

/// One row per timestep, `t,x_0..x_{n-1},u_0..u_{m-1}`; controls are empty at `t = T`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let (n, m) = (traj.n, traj.m);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    let horizon = traj.horizon;
    for t in 0..=horizon {
        let mut row = vec![t.to_string()];
        row.extend(traj.state(t).iter().map(|v| v.to_string()));
        if t < horizon {
            row.extend(traj.control(t).iter().map(|v| v.to_string()));
        } else {
            row.extend(std::iter::repeat_n(String::new(), m));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
