use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quadrature failed: {what} (estimated error {achieved:.3e}, requested {requested:.3e}, {evaluations} evaluations)")]
    Quadrature {
        what: String,
        achieved: f64,
        requested: f64,
        evaluations: usize,
    },

    #[error("CFL violation: dt = {dt:.6e} exceeds the stability limit {limit:.6e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("inclusion reaches into the sponge layer or outside the computational box")]
    InclusionInSponge,

    #[error("run mismatch: {0}")]
    RunMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
