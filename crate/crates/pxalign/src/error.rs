use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A bias specification, target distribution, or fit/train configuration
    /// is internally inconsistent (empty dimension, unsorted boundaries,
    /// non-positive learning rate, ...).
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// A bias key does not match the specification it is queried against:
    /// wrong arity or a bucket index out of range.
    #[error("bias key mismatch: {0}")]
    KeyMismatch(String),

    /// An input value is outside the domain of the operation (non-finite
    /// reading, classifier label not in {0, 1}, quantile level outside
    /// [0, 1], ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// The data is degenerate for the requested estimate (zero-variance
    /// fallback for a parametric fit, constant input to a rank
    /// correlation, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Two models cannot be merged or used together because they were built
    /// against different specifications or settings.
    #[error("incompatible models: {0}")]
    Incompatible(String),

    /// Iterative training produced a non-finite loss or a loss that grew
    /// past the configured tolerance.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A serialized artifact is malformed, has the wrong kind or format
    /// version, fails an invariant check, or carries a fingerprint that does
    /// not match the current configuration.
    #[error("artifact error: {0}")]
    Artifact(String),

    /// An experiment configuration file is invalid or references undefined
    /// signals or dimensions.
    #[error("config error: {0}")]
    Config(String),

    /// A data file is malformed: missing columns, unparseable fields, or
    /// rows inconsistent with the header.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
