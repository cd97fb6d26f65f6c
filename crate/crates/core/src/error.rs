use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("iteration diverged at step {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("step size bound violated: {0}")]
    StepSize(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("point outside set: {0}")]
    OutsideSet(String),

    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("power iteration did not converge after {iterations} iterations (estimate {estimate}, relative change {change:e})")]
    PowerIteration {
        iterations: usize,
        estimate: f64,
        change: f64,
    },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    SpecDimension {
        path: String,
        line: Option<usize>,
        message: String,
    },

    #[error("{path}: unsupported spec_version {found} (supported: {supported})")]
    Version {
        path: String,
        found: i64,
        supported: i64,
    },

    #[error("cost model is declared external; attach an oracle with `load_spec_with_oracle`")]
    ExternalCost,

    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
