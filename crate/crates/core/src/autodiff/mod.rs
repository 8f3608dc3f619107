//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in execution order. Each recorded
//! node keeps its forward value and a backward rule; [`Tape::backward`]
//! walks the nodes in reverse recording order once, accumulating gradients
//! into every leaf that requires them.

pub mod conv;
mod tape;

pub use conv::ConvGeom;
pub use tape::{BatchStats, CustomBackward, Tape, Var};
