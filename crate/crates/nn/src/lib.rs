//! Dense tensors with a recorded op graph and reverse-mode gradients.
//!
//! The kernel is intentionally small: it carries exactly the operations the
//! layout decoder and the render front-end need (linear maps, layer norm,
//! softmax attention, GELU/SiLU, dropout, 2-D convolution, gathers) plus an
//! AdamW optimizer, a tensor checkpoint format and a finite-difference
//! gradient checker. Everything is generic over `f32` and `f64`.

pub mod checkpoint;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use float::{DType, Float};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{conv_out_len, Gradients, Graph, Targets, Var};
pub use params::{AdamW, Init, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    Shape { op: &'static str, expected: String, actual: String },
    #[error("width {width} is not divisible by {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error("non-finite gradient produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
