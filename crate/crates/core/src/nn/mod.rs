//! Dense tensors, reverse-mode differentiation, parameters and optimizer.

pub(crate) mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
pub(crate) mod session;
mod tensor;

pub use attention::{multi_head_self_attention, AttentionOutput};
pub use graph::{Graph, TripletDistance, TripletStats, Var};
pub use params::{lr_schedule, AdamConfig, LrSchedule, ParamStore};
pub use session::Session;
pub use tensor::Tensor;

/// Deterministic RNG used for initialization, dropout and masking.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("attention row {0} has every key masked")]
    FullyMaskedRow(usize),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter or buffer {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
