//! Edge-conditioned two-stage image inpainting.
//!
//! An edge generator predicts the missing structure of a damaged image; an
//! image-completion generator built from mask-shrinking convolutions then
//! fills the hole conditioned on those edges.

pub mod autodiff;
pub mod canny;
pub mod completion;
pub mod dataset;
pub mod edge;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod masked;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
