use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}{}: expected {expected}, found {found}", index_suffix(*.index))]
    DimensionMismatch {
        what: &'static str,
        index: Option<usize>,
        expected: usize,
        found: usize,
    },

    #[error("callback {what} failed at timestep {t}: {message}")]
    Callback {
        what: &'static str,
        t: usize,
        message: String,
    },

    #[error("no {what} callback at timestep {t} and finite-difference fallback is disabled")]
    MissingDerivative { what: &'static str, t: usize },

    #[error(
        "Hessian block H_{t} is singular (reciprocal condition estimate {rcond:.3e}); \
         set a positive prox_delta to regularize"
    )]
    SingularHessian { t: usize, rcond: f64 },

    #[error("singular pivot block {block} in block-tridiagonal elimination (reciprocal condition estimate {rcond:.3e})")]
    SingularPivot { block: usize, rcond: f64 },

    #[error("singular recursion block at timestep {t} (reciprocal condition estimate {rcond:.3e})")]
    SingularRecursion { t: usize, rcond: f64 },

    #[error("KKT matrix is singular (reciprocal condition estimate {rcond:.3e})")]
    SingularKkt { rcond: f64 },

    #[error("constraint Jacobian is rank deficient: numerical rank {rank} < {expected} rows")]
    RankDeficient { rank: usize, expected: usize },

    #[error("unsupported problem: {0}")]
    Unsupported(String),

    #[error("non-finite value in {what} at timestep {t}")]
    NonFinite { what: &'static str, t: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("forward solve failed: {0}")]
    SolveFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn index_suffix(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" at index {i}"),
        None => String::new(),
    }
}

impl Error {
    /// Numerical failures map to exit code 2 in the CLI; everything else is a validation error.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularHessian { .. }
                | Error::SingularPivot { .. }
                | Error::SingularRecursion { .. }
                | Error::SingularKkt { .. }
                | Error::RankDeficient { .. }
                | Error::NonFinite { .. }
                | Error::SolveFailed(_)
        )
    }
}
