use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("m must be divisible by 10 (got {0})")]
    ScaleNotDivisible(u32),

    #[error("m = {m} exceeds the configured cap of {cap}")]
    AboveCap { m: u32, cap: u32 },

    #[error("topic counts out of bounds at cell ({doc}, {word}): k = {k}, n = {n}")]
    CountsOutOfBounds { doc: usize, word: usize, k: u64, n: u64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point outside domain: {0}")]
    Domain(String),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("mixing threshold {kappa} not reached within {t_max} steps (last tv {last_tv:.6})")]
    NotMixed { kappa: f64, t_max: usize, last_tv: f64 },

    #[error("lumped states differ; pairing coupling requires agreement")]
    LumpedDisagreement,

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
