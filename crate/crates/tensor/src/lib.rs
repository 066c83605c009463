//! A small reverse-mode automatic differentiation engine.
//!
//! Values are dense `f32` tensors, almost always `C x H x W` feature maps.
//! A [`Graph`] records operations as they execute; [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every parameter reached.
//! Everything runs on one thread in a fixed order, so results are bitwise
//! reproducible.

mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamState};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
