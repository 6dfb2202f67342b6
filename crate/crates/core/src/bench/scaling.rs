//! Wall-clock timing of the backward pass against horizon and parameter count.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::synthetic::{generate_columns, generate_structure, SyntheticSpec, SyntheticStructure};
use super::{median_and_stderr, Backend};
use crate::blocks::{split_rows, BlockBandedA, KktBlocks};
use crate::error::{Error, Result};
use crate::idoc::{contract, Adjoint, PreparedBackward};
use crate::riccati::AuxiliaryLqr;

pub const SCALING_HEADER: &str = "backend,T,d,threads,median_s,stderr_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub n: usize,
    pub m: usize,
    pub kappa: f64,
    pub seed: u64,
    pub horizons: Vec<usize>,
    pub ds: Vec<usize>,
    pub backends: Vec<Backend>,
    /// Timed runs per measurement, after one warm-up.
    pub samples: usize,
    /// Independent measurements per configuration, one CSV row each.
    pub repeats: usize,
    pub threads: usize,
    /// Parameter columns are generated and solved in chunks of this size.
    pub chunk_columns: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            n: 50,
            m: 10,
            kappa: 10.0,
            seed: 0,
            horizons: vec![250, 500, 1000, 2000],
            ds: vec![100],
            backends: vec![Backend::IdocFull, Backend::IdocVjp],
            samples: 5,
            repeats: 1,
            threads: rayon::current_num_threads(),
            chunk_columns: 1000,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.ds.is_empty() || self.backends.is_empty() {
            return Err(Error::Invalid("scaling sweep must be nonempty".into()));
        }
        if self.samples < 5 {
            return Err(Error::Invalid(format!("at least 5 timing samples are required, got {}", self.samples)));
        }
        if self.repeats == 0 || self.threads == 0 || self.chunk_columns == 0 {
            return Err(Error::Invalid("repeats, threads and chunk_columns must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub backend: Backend,
    pub horizon: usize,
    pub d: usize,
    pub threads: usize,
    pub median_s: f64,
    pub stderr_s: f64,
    pub error: Option<String>,
}

fn time_samples(samples: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    f()?;
    let mut times = Vec::with_capacity(samples);
    for _ in 0..samples {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median_and_stderr(&times))
}

fn blocks_with(spec: &SyntheticSpec, s: &SyntheticStructure, b: Vec<DMatrix<f64>>, c: Vec<DMatrix<f64>>) -> KktBlocks<f64> {
    KktBlocks {
        n: spec.n,
        m: spec.m,
        horizon: spec.horizon,
        d: b[0].ncols(),
        h: s.h.clone(),
        a: s.a.clone(),
        b,
        c,
        lambda: nalgebra::DVector::zeros(0),
    }
}

fn run_chunk(
    backend: Backend,
    prepared: Option<&PreparedBackward<'_, f64>>,
    adjoint: Option<&Adjoint<f64>>,
    blocks: &KktBlocks<f64>,
) -> Result<()> {
    match (backend, prepared, adjoint) {
        (Backend::IdocFull, Some(p), _) => {
            black_box(p.solve(&blocks.b, &blocks.c)?);
        }
        (Backend::IdocVjp, _, Some(adj)) => {
            black_box(contract(adj, &blocks.b, &blocks.c, blocks.d));
        }
        (Backend::Riccati, _, _) => {
            black_box(AuxiliaryLqr::from_blocks(blocks)?.solve()?);
        }
        _ => return Err(Error::Invalid(format!("{backend} needs a prepared factorization"))),
    }
    Ok(())
}

/// Factorization (and for VJP the adjoint solve) shared by every column.
fn prepare<'a>(
    backend: Backend,
    s: &SyntheticStructure,
    a: &'a BlockBandedA<f64>,
) -> Result<(Option<PreparedBackward<'a, f64>>, Option<Adjoint<f64>>)> {
    if backend == Backend::Riccati {
        return Ok((None, None));
    }
    let p = PreparedBackward::new(&s.h, a, 0.0)?;
    let adj = (backend == Backend::IdocVjp).then(|| p.vjp_adjoint(&split_rows(&s.v, &a.col_sizes())));
    Ok((Some(p), adj))
}

/// Median and standard error of one backward pass, generation excluded.
///
/// Large parameter counts are processed in column chunks: the shared
/// factorization is timed on its own, each chunk's column work is timed
/// separately, and the medians are summed.
pub fn time_backward(spec: &SyntheticSpec, backend: Backend, samples: usize, chunk_columns: usize) -> Result<(f64, f64)> {
    let s = generate_structure(spec)?;
    let a = s.a.clone();
    if spec.d <= chunk_columns {
        let (b, c) = generate_columns(spec, &a, 0, spec.d);
        let blocks = blocks_with(spec, &s, b, c);
        return time_samples(samples, || {
            let (p, adj) = prepare(backend, &s, &a)?;
            run_chunk(backend, p.as_ref(), adj.as_ref(), &blocks)
        });
    }
    let (mut median, mut var) = if backend == Backend::Riccati {
        (0.0, 0.0)
    } else {
        let (m, e) = time_samples(samples, || prepare(backend, &s, &a).map(|x| drop(black_box(x))))?;
        (m, e * e)
    };
    let (p, adj) = prepare(backend, &s, &a)?;
    let mut start = 0;
    while start < spec.d {
        let count = chunk_columns.min(spec.d - start);
        let (b, c) = generate_columns(spec, &a, start, count);
        let blocks = blocks_with(spec, &s, b, c);
        let (m, e) = time_samples(samples, || run_chunk(backend, p.as_ref(), adj.as_ref(), &blocks))?;
        median += m;
        var += e * e;
        start += count;
    }
    Ok((median, var.sqrt()))
}

pub fn run_scaling(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let mut rows = Vec::new();
    for &horizon in &cfg.horizons {
        for &d in &cfg.ds {
            for &backend in &cfg.backends {
                for _ in 0..cfg.repeats {
                    let spec = SyntheticSpec {
                        n: cfg.n,
                        m: cfg.m,
                        d,
                        horizon,
                        kappa: cfg.kappa,
                        seed: cfg.seed,
                    };
                    let result = pool.install(|| time_backward(&spec, backend, cfg.samples, cfg.chunk_columns));
                    let (median_s, stderr_s, error) = match result {
                        Ok((m, e)) => (m, e, None),
                        Err(e) => (f64::NAN, f64::NAN, Some(e.to_string())),
                    };
                    rows.push(ScalingRow {
                        backend,
                        horizon,
                        d,
                        threads: cfg.threads,
                        median_s,
                        stderr_s,
                        error,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCALING_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.backend.name().to_string(),
            r.horizon.to_string(),
            r.d.to_string(),
            r.threads.to_string(),
            r.median_s.to_string(),
            r.stderr_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Exponent `p` of the least-squares fit `time ≈ c·Tᵖ` in log-log space.
pub fn fit_exponent(horizons: &[f64], times: &[f64]) -> f64 {
    let xs: Vec<f64> = horizons.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|y| y.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
