use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model JSON: {0}")]
    Schema(String),

    #[error("numeric fault (NaN) at layer {layer}, position {position}")]
    NumericFault { layer: usize, position: usize },

    #[error("unsupported depth: expected {expected} layer(s), model has {found}")]
    UnsupportedDepth { expected: usize, found: usize },

    #[error("model is outside the two-layer local class: {0}")]
    FClass(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("power iteration did not converge within {iters} iterations")]
    PowerIteration { iters: usize },

    #[error("empty prefix: sequence length {len} must exceed tau = {tau}")]
    EmptyPrefix { len: usize, tau: usize },

    #[error("sequence length {len} is below the hardmax threshold {threshold}")]
    NotHardmax { len: usize, threshold: u64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("construction infeasible: {0}")]
    Infeasible(String),

    #[error("filler token {token} at residue {residue} reaches the maximal logit of model {model}")]
    FillerRejected { token: usize, residue: usize, model: char },

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("undefined target: {0}")]
    UndefinedTarget(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    /// True for errors caused by a model that does not have the structure an
    /// operation requires (wrong depth, outside the two-layer local class).
    pub fn is_shape(&self) -> bool {
        matches!(self, Error::UnsupportedDepth { .. } | Error::FClass(_))
    }
}
