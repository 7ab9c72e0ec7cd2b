use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model mismatch: {left} vs {right}")]
    ModelMismatch { left: String, right: String },

    #[error("invalid group model string `{0}` (expected free:<k> with k >= 2 or zfp:<p>,<q> with p,q >= 2 and (p,q) != (2,2))")]
    InvalidModel(String),

    #[error("cannot parse `{input}`: {reason}")]
    Parse { input: String, reason: String },

    #[error("enumeration refused: predicted {predicted} elements exceeds the cap of {cap} (raise --cap to override)")]
    CapExceeded { predicted: u128, cap: u64 },

    #[error("degenerate growth estimate: radius {radius} is below the minimum of {min}")]
    DegenerateEstimate { radius: usize, min: usize },

    #[error("insufficient depth: the computation needs cylinders of depth at least {required}, got {available}")]
    InsufficientDepth { required: usize, available: usize },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("shadow direction undefined for y = x")]
    UndefinedDirection,

    #[error("orbit sum diverges: exponent s = {s} must exceed the critical exponent {alpha}")]
    Divergence { s: f64, alpha: f64 },

    #[error("density has empty support; no regularity constant exists")]
    EmptySupport,

    #[error("Harish-Chandra estimate violated: {0}")]
    EstimateViolation(String),

    #[error("unsupported approach sequence: {0}")]
    UnsupportedApproach(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty annulus for n = {n}, rho = {rho}")]
    EmptyAnnulus { n: usize, rho: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
