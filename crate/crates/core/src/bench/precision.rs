//! Single- versus double-precision agreement of the trajectory derivative.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::synthetic::{generate_synthetic, SyntheticSpec};
use super::{median_and_stderr, Backend};
use crate::error::{Error, Result};
use crate::idoc::Precision;

pub const PRECISION_HEADER: &str = "backend,kappa,seed,mae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub horizon: usize,
    pub kappas: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
    pub backends: Vec<Backend>,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self {
            n: 10,
            m: 4,
            d: 5,
            horizon: 50,
            kappas: vec![1.0, 1e2, 1e4, 1e6],
            seeds: 25,
            base_seed: 0,
            backends: vec![Backend::IdocFull, Backend::Riccati],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub backend: Backend,
    pub kappa: f64,
    pub seed: u64,
    /// Mean absolute difference; infinite when a path fails or overflows.
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSummary {
    pub backend: Backend,
    pub kappa: f64,
    pub median_mae: f64,
    pub mean_mae: f64,
    pub stderr_mae: f64,
    pub non_finite: usize,
}

/// MAE between the two precisions for one instance.
pub fn precision_gap(spec: &SyntheticSpec, backend: Backend) -> Result<f64> {
    let inst = generate_synthetic(spec)?;
    let double = backend.trajectory_derivative(&inst.blocks, Precision::Double, 0.0)?;
    let single = match backend.trajectory_derivative(&inst.blocks, Precision::Single, 0.0) {
        Ok(s) => s,
        Err(e) if e.is_numerical() => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let mae = (single - double).abs().mean();
    Ok(if mae.is_nan() { f64::INFINITY } else { mae })
}

pub fn run_precision(cfg: &PrecisionConfig) -> Result<Vec<PrecisionRow>> {
    if cfg.kappas.is_empty() || cfg.backends.is_empty() || cfg.seeds == 0 {
        return Err(Error::Invalid("precision sweep must be nonempty".into()));
    }
    let mut rows = Vec::new();
    for &backend in &cfg.backends {
        for &kappa in &cfg.kappas {
            for s in 0..cfg.seeds as u64 {
                let seed = cfg.base_seed + s;
                let spec = SyntheticSpec {
                    n: cfg.n,
                    m: cfg.m,
                    d: cfg.d,
                    horizon: cfg.horizon,
                    kappa,
                    seed,
                };
                let mae = precision_gap(&spec, backend)?;
                rows.push(PrecisionRow { backend, kappa, seed, mae });
            }
        }
    }
    Ok(rows)
}

/// Per-backend, per-κ statistics in sweep order.
pub fn summarize(rows: &[PrecisionRow]) -> Vec<PrecisionSummary> {
    let mut keys: Vec<(Backend, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(b, k)| b == r.backend && k == r.kappa) {
            keys.push((r.backend, r.kappa));
        }
    }
    keys.into_iter()
        .map(|(backend, kappa)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.backend == backend && r.kappa == kappa)
                .map(|r| r.mae)
                .collect();
            let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
            let (median_mae, _) = median_and_stderr(&vals);
            let (_, stderr_mae) = median_and_stderr(&finite);
            let mean_mae = if finite.len() == vals.len() {
                finite.iter().sum::<f64>() / finite.len() as f64
            } else {
                f64::INFINITY
            };
            PrecisionSummary {
                backend,
                kappa,
                median_mae,
                mean_mae,
                stderr_mae,
                non_finite: vals.len() - finite.len(),
            }
        })
        .collect()
}

pub fn write_precision_csv<W: Write>(rows: &[PrecisionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PRECISION_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.backend.name().to_string(), r.kappa.to_string(), r.seed.to_string(), r.mae.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_conditioned_gap_is_small() {
        let cfg = PrecisionConfig {
            kappas: vec![1.0],
            seeds: 3,
            ..PrecisionConfig::default()
        };
        let rows = run_precision(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        assert!(rows.iter().all(|r| r.mae < 1e-3));
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        let mut buf = Vec::new();
        write_precision_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(PRECISION_HEADER));
    }

    #[test]
    fn non_finite_values_are_kept() {
        let rows = vec![
            PrecisionRow {
                backend: Backend::IdocFull,
                kappa: 1.0,
                seed: 0,
                mae: 1e-6,
            },
            PrecisionRow {
                backend: Backend::IdocFull,
                kappa: 1.0,
                seed: 1,
                mae: f64::INFINITY,
            },
        ];
        let s = summarize(&rows);
        assert_eq!(s[0].non_finite, 1);
        assert!(s[0].mean_mae.is_infinite());
    }
}
