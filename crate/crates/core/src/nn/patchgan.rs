//! 70×70 PatchGAN discriminator body.
//!
//! Five 4×4 convolutions with padding 1 and strides 2, 2, 2, 1, 1; the
//! first four are followed by LeakyReLU(0.2) and the last emits one logit
//! per patch. Each logit sees a 70×70 window of the input.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Activation, Binder, Conv, ConvSpec, ParamStore, LEAKY_SLOPE};

static WARNED: AtomicBool = AtomicBool::new(false);

const KERNEL: usize = 4;
const PAD: usize = 1;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

#[derive(Clone, Debug)]
pub struct PatchGan {
    pub layers: Vec<Conv>,
}

/// Logits plus the post-activation maps of every hidden layer.
pub struct PatchOutput {
    pub logits: Var,
    pub features: Vec<Var>,
}

impl PatchGan {
    /// `base` is the width of the first layer; widths double up to `8·base`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        base: usize,
        spectral: bool,
    ) -> Result<Self> {
        let widths = [base, 2 * base, 4 * base, 8 * base, 1];
        let mut layers = Vec::with_capacity(5);
        let mut c = in_ch;
        for (i, (&w, &s)) in widths.iter().zip(&STRIDES).enumerate() {
            let spec = ConvSpec::new(c, w, KERNEL).stride(s).pad(PAD).spectral(spectral);
            layers.push(Conv::new(store, rng, &format!("{name}.conv{i}"), spec)?);
            c = w;
        }
        Ok(PatchGan { layers })
    }

    /// Side length of the input window seen by one logit.
    pub fn receptive_field() -> usize {
        STRIDES.iter().rev().fold(1, |rf, &s| (rf - 1) * s + KERNEL)
    }

    /// Input rows (or columns) covered by logit index `i`, before clipping
    /// to the image. Returned as a half-open range of signed coordinates.
    pub fn field_of(i: usize) -> (isize, isize) {
        let (mut lo, mut hi) = (i as isize, i as isize + 1);
        for &s in STRIDES.iter().rev() {
            lo = lo * s as isize - PAD as isize;
            hi = (hi - 1) * s as isize - PAD as isize + KERNEL as isize;
        }
        (lo, hi)
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<PatchOutput> {
        let shape = tape.shape(x);
        let small = shape.len() == 4 && (shape[2] < Self::receptive_field() || shape[3] < Self::receptive_field());
        if small && !WARNED.swap(true, Ordering::Relaxed) {
            log::warn!(
                "PatchGAN input {}x{} is smaller than its {}x{} receptive field",
                shape[2],
                shape[3],
                Self::receptive_field(),
                Self::receptive_field()
            );
        }
        let mut h = x;
        let mut features = Vec::with_capacity(self.layers.len() - 1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, b, h)?;
            if i + 1 < self.layers.len() {
                h = Activation::LeakyRelu(LEAKY_SLOPE).apply(tape, h);
                features.push(h);
            }
        }
        Ok(PatchOutput { logits: h, features })
    }
}
