//! Second stage: completing the image from its damaged version and an
//! edge map.
//!
//! Masks passed in from outside use the hole convention (1 = missing).
//! They are flipped once into validity masks for the generator.

mod generator;
mod model;
pub mod structure;

pub use generator::{CompletionGenerator, G2Config, G2Output, MaskedResidual};
pub use model::{CompletionConfig, CompletionModel, EXTRACTOR_SEED};
pub use structure::{NetworkSpec, Segment, DEFAULT_STRUCTURE};

use crate::error::{Error, Result};
use crate::masked::check_binary;
use crate::tensor::Tensor;

/// Ground truth, hole mask and both edge maps of a batch.
#[derive(Clone, Debug)]
pub struct CompositionInputs {
    /// `[N, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[N, 1, H, W]`, 1 = hole.
    pub mask: Tensor,
    /// Canny edges of the full image, `[N, 1, H, W]`.
    pub edges_gt: Tensor,
    /// Edge-model prediction, `[N, 1, H, W]`.
    pub edges_pred: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composed {
    /// Image with holes set to 0.
    pub damaged: Tensor,
    /// Known edges outside the hole, predicted edges inside.
    pub c_comp: Tensor,
    /// `1 − mask`.
    pub validity: Tensor,
}

impl CompositionInputs {
    pub fn validate(&self) -> Result<()> {
        let (n, c, h, w) = self.image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("image has {c} channels, expected 3")));
        }
        for (name, t) in [("mask", &self.mask), ("edges_gt", &self.edges_gt), ("edges_pred", &self.edges_pred)] {
            if t.shape() != [n, 1, h, w] {
                return Err(Error::shape(format!(
                    "{name} {:?} is not aligned with image {:?}",
                    t.shape(),
                    self.image.shape()
                )));
            }
        }
        check_binary(&self.mask)
    }
}

/// Hole mask broadcast over `c` channels.
fn select(keep: &Tensor, fill: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let c = keep.shape()[1];
    let m = if c == 1 { mask.clone() } else { mask.repeat_channels(c)? };
    let out: Vec<_> = keep
        .data()
        .iter()
        .zip(fill.data())
        .zip(m.data())
        .map(|((&k, &f), &m)| if m == 0.0 { k } else { f })
        .collect();
    Tensor::new(keep.shape(), out)
}

/// Builds the generator inputs from ground truth, mask and edges.
pub fn compose_inputs(ci: &CompositionInputs) -> Result<Composed> {
    ci.validate()?;
    Ok(Composed {
        damaged: select(&ci.image, &Tensor::zeros(ci.image.shape()), &ci.mask)?,
        c_comp: select(&ci.edges_gt, &ci.edges_pred, &ci.mask)?,
        validity: ci.mask.map(|m| 1.0 - m),
    })
}

/// Ground truth outside the hole and prediction inside it.
pub fn composite_output(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    pred.expect_same_shape(gt)?;
    let (n, _, h, w) = pred.dims4()?;
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "mask {:?} is not aligned with image {:?}",
            mask.shape(),
            pred.shape()
        )));
    }
    check_binary(mask)?;
    select(gt, pred, mask)
}
