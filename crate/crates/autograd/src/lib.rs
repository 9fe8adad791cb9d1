//! Small dense tensor library with reverse-mode differentiation.
//!
//! Values are computed eagerly and recorded on a per-pass [`Graph`]; weights
//! live in a named [`ParamStore`] that maps one-to-one onto the checkpoint
//! format. Everything is generic over [`Real`] so the same model code can be
//! re-run at `f64` for finite-difference checks.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod param;
mod tensor;

pub use error::{CheckpointError, TensorError};
pub use graph::{BatchStats, BnMode, Gradients, Graph, Var, BN_EPS, LN_EPS};
pub use kernels::ConvGeom;
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
