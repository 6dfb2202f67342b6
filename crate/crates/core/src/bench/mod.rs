//! Synthetic benchmarks and the learning-from-demonstration loop.

pub mod lfd;
pub mod precision;
pub mod scaling;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::KktBlocks;
use crate::error::{Error, Result};
use crate::idoc::{trajectory_derivative, vjp, BackwardOptions, Mode, Precision};
use crate::riccati::riccati_trajectory_derivative_with;

/// Backward-pass implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    IdocFull,
    IdocVjp,
    Riccati,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::IdocFull, Backend::IdocVjp, Backend::Riccati];

    pub fn name(self) -> &'static str {
        match self {
            Backend::IdocFull => "idoc-full",
            Backend::IdocVjp => "idoc-vjp",
            Backend::Riccati => "riccati",
        }
    }

    /// `Dξ` in the requested precision; the VJP backend has no Jacobian and
    /// falls back to the full solve.
    pub fn trajectory_derivative(self, blocks: &KktBlocks<f64>, precision: Precision, prox_delta: f64) -> Result<DMatrix<f64>> {
        match self {
            Backend::Riccati => {
                if prox_delta > 0.0 {
                    let mut b = blocks.clone();
                    b.h = crate::idoc::regularize_hessian(&b.h, prox_delta);
                    riccati_trajectory_derivative_with(&b, precision)
                } else {
                    riccati_trajectory_derivative_with(blocks, precision)
                }
            }
            _ => trajectory_derivative(
                blocks,
                &BackwardOptions {
                    prox_delta,
                    mode: Mode::FullJacobian,
                    precision,
                },
            ),
        }
    }

    /// `∇_θ L = Dξᵀ v`.
    pub fn loss_gradient(self, blocks: &KktBlocks<f64>, v: &DVector<f64>, prox_delta: f64) -> Result<DVector<f64>> {
        match self {
            Backend::IdocVjp => vjp(
                v,
                blocks,
                &BackwardOptions {
                    prox_delta,
                    mode: Mode::Vjp,
                    precision: Precision::Double,
                },
            ),
            _ => Ok(self.trajectory_derivative(blocks, Precision::Double, prox_delta)?.tr_mul(v)),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "idoc" | "idoc-full" => Ok(Backend::IdocFull),
            "idoc-vjp" | "vjp" => Ok(Backend::IdocVjp),
            "riccati" => Ok(Backend::Riccati),
            other => Err(Error::Invalid(format!(
                "unknown backend '{other}' (expected idoc, idoc-full, idoc-vjp or riccati)"
            ))),
        }
    }
}

/// Median and standard error of the mean.
pub fn median_and_stderr(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    let median = if k % 2 == 1 { s[k / 2] } else { 0.5 * (s[k / 2 - 1] + s[k / 2]) };
    if k < 2 {
        return (median, 0.0);
    }
    let mean = s.iter().sum::<f64>() / k as f64;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (median, (var / k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_backend_names() {
        assert_eq!("idoc".parse::<Backend>().unwrap(), Backend::IdocFull);
        assert_eq!("idoc-vjp".parse::<Backend>().unwrap(), Backend::IdocVjp);
        assert_eq!("riccati".parse::<Backend>().unwrap(), Backend::Riccati);
        assert!("pdp".parse::<Backend>().is_err());
        for b in Backend::ALL {
            assert_eq!(b.name().parse::<Backend>().unwrap(), b);
        }
    }

    #[test]
    fn median_of_samples() {
        let (m, se) = median_and_stderr(&[3.0, 1.0, 2.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(median_and_stderr(&[1.0, 2.0, 3.0, 4.0]).0, 2.5);
    }
}
