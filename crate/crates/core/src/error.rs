use thiserror::Error;

/// Errors raised by the estimator, the certification routines and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible start: {0}")]
    Infeasible(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("matrix error: {0}")]
    Matrix(String),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("certificate has no quadratic matrix and no evaluator")]
    UnsupportedCertificate,

    #[error("certification failed: no horizon up to cap {cap} satisfies the contraction condition (value at cap = {value_at_cap})")]
    CertificationFailure { cap: usize, value_at_cap: f64 },

    #[error("trace schema error: {0}")]
    TraceSchema(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replicate with seed {seed} failed: {source}")]
    Replicate {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
