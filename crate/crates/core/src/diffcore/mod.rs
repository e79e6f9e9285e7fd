//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every op evaluates eagerly and records itself on a [`Graph`]; a scalar
//! root can then be differentiated with [`Graph::backward`]. Complex values
//! are carried as pairs of real nodes ([`CVar`]). Ops with hand-derived
//! gradients plug in through [`CustomGrad`].

mod complex;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use complex::CVar;
pub use graph::{CustomGrad, Gradients, Graph, Var};
pub use params::{clip_global_norm, Adam, ParameterStore};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::softplus;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("{0}")]
    Numerical(String),
}
