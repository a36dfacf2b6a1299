use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("grid needs at least 4 nodes, got {0}")]
    GridTooSmall(usize),
    #[error("noise model: {0}")]
    Noise(String),
    #[error("correlation matrix is not positive semidefinite")]
    NotPsd,
    #[error("invalid bounds: lower {lo} exceeds upper {hi}")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("tumour radius hit zero at step {step}")]
    Extinction { step: usize },
    #[error("singular implicit operator ({0})")]
    Singular(&'static str),
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("all {0} Monte Carlo paths went extinct")]
    AllExtinct(usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Extinction { .. }
                | Error::Singular(_)
                | Error::NonFinite { .. }
                | Error::AllExtinct(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
