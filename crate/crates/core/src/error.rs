use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    /// Separation left the admissible region; the episode is terminated.
    #[error("separation overflow at |s| = {norm}")]
    OverflowAbort { norm: f64 },

    #[error("degenerate time window: t - t0 = {0}")]
    DegenerateWindow(f64),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    /// Curvature could not be fitted; the mean is still available.
    #[error("degenerate Cramér fit (mean {lambda_bar}): {reason}")]
    DegenerateFit { lambda_bar: f64, reason: String },

    #[error("stationary density is not normalisable: phi = {phi} <= {threshold}")]
    UnboundedDistribution { phi: f64, threshold: f64 },

    #[error("no stationary state: phi = {phi} <= lambda_bar = {lambda_bar}")]
    NoStationaryState { phi: f64, lambda_bar: f64 },

    #[error("unstable regime: 2 phi = {two_phi} <= D~ = {d_tilde}")]
    UnstableRegime { two_phi: f64, d_tilde: f64 },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("training aborted after {0} consecutive skipped updates")]
    TrainingDiverged(usize),

    #[error("serialization: {0}")]
    Serialization(String),
}
