use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid value at index {index}: {message}")]
    Validation { index: usize, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("basis is rank deficient: requested rank {requested}, achievable rank {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("spectrum has zero norm")]
    ZeroSpectrum,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(
        "conjugate gradient breakdown at iteration {iteration}: curvature {curvature:e}, residual {residual:e}"
    )]
    CgBreakdown {
        iteration: usize,
        curvature: f64,
        residual: f64,
    },

    #[error("energy increased across outer iteration {iteration}: {before:e} -> {after:e}")]
    EnergyIncrease {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("ground truth is identically zero; LMSE normalization undefined")]
    ZeroGroundTruth,

    #[error("problem too large for the dense oracle: {unknowns} unknowns (limit {limit})")]
    SizeGuard { unknowns: usize, limit: usize },

    #[error("every sweep point failed")]
    SweepFailed,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
