use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("need at least {needed} samples, got {actual}")]
    TooFewSamples { needed: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("top-N size {n} exceeds the {k} available centers")]
    InvalidTopN { n: usize, k: usize },

    #[error("cannot select {count} items out of {available}")]
    SampleTooLarge { count: usize, available: usize },

    #[error("feature change alone already costs KL {kl:.6e} > epsilon {epsilon:.6e}")]
    PreconditionViolated { kl: f64, epsilon: f64 },

    #[error("negative discriminant {0:.6e} in mean projection")]
    NegativeDiscriminant(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
