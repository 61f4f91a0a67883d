//! Minimal dense-tensor arithmetic with tape-based reverse-mode
//! differentiation.
//!
//! All values are `f64`. A [`Graph`] records operations on [`Var`] handles;
//! [`Graph::backward`] returns [`Gradients`] for every leaf created with
//! [`Graph::param`]. [`gradcheck`] verifies hand-written backward rules
//! against central finite differences.

pub mod archive;
pub mod error;
pub mod gradcheck;
mod graph;
mod ops;
pub mod params;
mod tensor;

pub use archive::{Archive, Dtype};
pub use error::{ArchiveError, GradCheckError, ShapeError};
pub use gradcheck::{grad_check, grad_check_default, GradCheckReport};
pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use params::{AdamW, AdamWConfig, Binder, ParamId, ParamStore};
pub use tensor::{dot, Tensor};
