//! Reverse-mode automatic differentiation over 4-D (`[n, c, h, w]`) tensors.
//!
//! The operation set is deliberately narrow: what image-to-image restoration
//! networks with attention and flow-based warping need, and nothing else.
//! Everything runs single-threaded and is bitwise deterministic.

mod conv;
mod graph;
mod params;
mod real;
mod resample;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use resample::Resampler;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;
