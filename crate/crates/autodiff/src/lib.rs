//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! The [`Tape`] records tensor operations eagerly and replays them backwards.
//! [`fd_gradient`] provides central finite differences for checking every rule,
//! and [`svd`] holds the polar-factor map used to keep circuit gates orthogonal.

pub mod fd;
pub mod svd;
pub mod tape;
pub mod tensor;

pub use fd::{fd_gradient, fd_scalar, max_rel_err, rel_err};
pub use svd::{orthogonality_defect, svd_unitarize_vjp, unitarize};
pub use tape::{sigmoid, Adjoints, Tape, Var};
pub use tensor::{Gradients, Tensor, TensorMap};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("SVD failure: {0}")]
    Svd(String),
    #[error("non-finite gradient for parameter `{param}`")]
    NonFinite { param: String },
    #[error("backward needs a one-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
