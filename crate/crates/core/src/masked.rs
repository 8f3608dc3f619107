//! Mask-shrinking convolution.
//!
//! A masked convolution ("SConv") reads only valid pixels of its window and
//! rescales by the valid fraction:
//!
//! ```text
//! out = W·(x ⊙ m) / mean(m) + b    if the window holds any valid pixel
//! out = 0                          otherwise
//! ```
//!
//! and marks its output valid wherever the window held a valid pixel, so
//! holes shrink layer by layer. Masks here are validity masks: 1 = valid.
//!
//! `mean(m)` is taken over the in-bounds taps of the window. Zero padding
//! never counts as valid, but it is not counted in the window size either,
//! so an all-valid mask reproduces the ordinary convolution exactly.

use rand::Rng;

use crate::autodiff::{conv, ConvGeom, CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv, ConvSpec, ParamStore};
use crate::tensor::{Float, Tensor};

/// Denominator used to renormalise a partially valid window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskNorm {
    /// `1 / mean(m)`: valid fraction of the window.
    #[default]
    Mean,
    /// `1 / sum(m)`: count of valid taps.
    Sum,
}

impl std::str::FromStr for MaskNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(MaskNorm::Mean),
            "sum" => Ok(MaskNorm::Sum),
            other => Err(Error::Config(format!("sconv_norm must be mean or sum, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskNorm::Mean => "mean",
            MaskNorm::Sum => "sum",
        })
    }
}

/// A feature map with its single-channel validity mask.
#[derive(Clone, Debug)]
pub struct MaskedFeature {
    pub feature: Var,
    /// `[N, 1, H, W]`, every entry 0 or 1.
    pub mask: Tensor,
}

pub fn check_binary(mask: &Tensor) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Mask(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

impl MaskedFeature {
    pub fn new(tape: &Tape, feature: Var, mask: Tensor) -> Result<Self> {
        let (n, _, h, w) = tape.value(feature).dims4()?;
        let (mn, mc, mh, mw) = mask.dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::shape(format!(
                "mask {:?} does not match feature {:?}",
                mask.shape(),
                tape.shape(feature)
            )));
        }
        check_binary(&mask)?;
        Ok(MaskedFeature { feature, mask })
    }

    /// Wraps `feature` after zeroing it wherever `mask` is 0.
    pub fn from_input(tape: &mut Tape, feature: Var, mask: Tensor) -> Result<Self> {
        let probe = MaskedFeature::new(tape, feature, mask)?;
        let zeroed = zero_invalid(tape, probe.feature, &probe.mask)?;
        Ok(MaskedFeature {
            feature: zeroed,
            mask: probe.mask,
        })
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.feature)[1]
    }

    pub fn valid_fraction(&self) -> Float {
        self.mask.mean()
    }

    /// The same feature with invalid positions reset to 0. Layers that run
    /// after a masked conv (normalisation, activations) leave values there.
    pub fn cleared(&self, tape: &mut Tape) -> Result<MaskedFeature> {
        if self.mask.data().iter().all(|&v| v != 0.0) {
            return Ok(self.clone());
        }
        Ok(MaskedFeature {
            feature: zero_invalid(tape, self.feature, &self.mask)?,
            mask: self.mask.clone(),
        })
    }
}

/// Copies `x` with every channel zeroed where `mask` is 0.
fn masked_copy(x: &[Float], mask: &[Float], n: usize, c: usize, plane: usize) -> Vec<Float> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let m = &mask[s * plane..(s + 1) * plane];
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for p in 0..plane {
                if m[p] != 0.0 {
                    out[base + p] = x[base + p];
                }
            }
        }
    }
    out
}

struct ZeroInvalid {
    mask: Vec<Float>,
}

impl CustomBackward for ZeroInvalid {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let (n, c, h, w) = inputs[0].dims4().expect("4-d");
        vec![Some(masked_copy(g, &self.mask, n, c, h * w))]
    }
}

/// `x` with all channels set to exactly 0 where `mask` is 0.
pub fn zero_invalid(tape: &mut Tape, x: Var, mask: &Tensor) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "mask {:?} does not match {:?}",
            mask.shape(),
            tape.shape(x)
        )));
    }
    let out = masked_copy(tape.value(x).data(), mask.data(), n, c, h * w);
    let value = Tensor::new(&[n, c, h, w], out)?;
    Ok(tape.custom(
        &[x],
        value,
        Box::new(ZeroInvalid {
            mask: mask.data().to_vec(),
        }),
    ))
}

/// Output mask of a convolution window scan: 1 where the window holds at
/// least one valid pixel.
pub fn mask_update(mask: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, dil: usize) -> Result<Tensor> {
    check_binary(mask)?;
    let (n, c, h, w) = mask.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("mask must have one channel, got {:?}", mask.shape())));
    }
    let g = ConvGeom::new(1, h, w, 1, kh, kw, stride, pad, dil)?;
    let mut out = Vec::with_capacity(n * g.out_plane());
    for s in 0..n {
        let (valid, _) = g.window_counts(&mask.data()[s * h * w..(s + 1) * h * w]);
        out.extend(valid.into_iter().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[n, 1, g.ho, g.wo], out)
}

/// Output mask of a transposed (upsampling) convolution: an output pixel
/// is valid when any valid input pixel scatters onto it.
pub fn mask_update_transpose(mask: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
    check_binary(mask)?;
    let (n, c, h, w) = mask.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("mask must have one channel, got {:?}", mask.shape())));
    }
    let g = ConvGeom::for_transpose(1, h, w, 1, kh, kw, stride, pad)?;
    let mut out = Vec::with_capacity(n * g.in_plane());
    for s in 0..n {
        let (valid, _) = g.window_counts_transpose(&mask.data()[s * h * w..(s + 1) * h * w]);
        out.extend(valid.into_iter().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[n, 1, g.h, g.w], out)
}

struct SConvBackward {
    geom: ConvGeom,
    transpose: bool,
    batch: usize,
    /// Validity of the input plane, `batch × in_plane`.
    mask: Vec<Float>,
    /// Per output position renormalisation, 0 in dead windows.
    scale: Vec<Float>,
}

impl SConvBackward {
    /// (channels, plane) of the op's input and output sides.
    fn sides(&self) -> ((usize, usize), (usize, usize)) {
        let g = &self.geom;
        if self.transpose {
            ((g.f, g.out_plane()), (g.c, g.in_plane()))
        } else {
            ((g.c, g.in_plane()), (g.f, g.out_plane()))
        }
    }
}

impl CustomBackward for SConvBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], needs: &[bool]) -> Vec<Option<Vec<Float>>> {
        let ((cin, pin), (cout, pout)) = self.sides();
        let n = self.batch;
        let mut draw = vec![0.0; g.len()];
        let mut dbias = vec![0.0; cout];
        for s in 0..n {
            for ch in 0..cout {
                let base = (s * cout + ch) * pout;
                for p in 0..pout {
                    let sc = self.scale[s * pout + p];
                    if sc != 0.0 {
                        draw[base + p] = g[base + p] * sc;
                        dbias[ch] += g[base + p];
                    }
                }
            }
        }
        let xm = masked_copy(inputs[0].data(), &self.mask, n, cin, pin);
        let w = inputs[1].data();
        let geom = &self.geom;
        let dx = needs[0].then(|| {
            let dxm = if self.transpose {
                conv::conv_forward(&draw, n, geom, w)
            } else {
                conv::conv_backward_input(&draw, n, geom, w)
            };
            masked_copy(&dxm, &self.mask, n, cin, pin)
        });
        let dw = needs[1].then(|| {
            if self.transpose {
                conv::conv_backward_kernel(&draw, &xm, n, geom)
            } else {
                conv::conv_backward_kernel(&xm, &draw, n, geom)
            }
        });
        vec![dx, dw, needs[2].then_some(dbias)]
    }
}

fn masked_conv_impl(
    tape: &mut Tape,
    x: &MaskedFeature,
    w: Var,
    b: Var,
    geom: ConvGeom,
    transpose: bool,
    norm: MaskNorm,
) -> Result<MaskedFeature> {
    check_binary(&x.mask)?;
    let (n, cin, h, wd) = tape.value(x.feature).dims4()?;
    if x.mask.shape() != [n, 1, h, wd] {
        return Err(Error::shape(format!(
            "mask {:?} does not match feature {:?}",
            x.mask.shape(),
            tape.shape(x.feature)
        )));
    }
    let (cout, oh, ow) = if transpose {
        (geom.c, geom.h, geom.w)
    } else {
        (geom.f, geom.ho, geom.wo)
    };
    if tape.shape(b) != [cout] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {cout} output channels",
            tape.shape(b)
        )));
    }
    let (pin, pout) = (h * wd, oh * ow);
    let xm = masked_copy(tape.value(x.feature).data(), x.mask.data(), n, cin, pin);
    let raw = if transpose {
        conv::conv_backward_input(&xm, n, &geom, tape.value(w).data())
    } else {
        conv::conv_forward(&xm, n, &geom, tape.value(w).data())
    };
    let bias = tape.value(b).data();
    let mut scale = Vec::with_capacity(n * pout);
    let mut out_mask = Vec::with_capacity(n * pout);
    for s in 0..n {
        let m = &x.mask.data()[s * pin..(s + 1) * pin];
        let (valid, inb) = if transpose {
            geom.window_counts_transpose(m)
        } else {
            geom.window_counts(m)
        };
        for (v, t) in valid.into_iter().zip(inb) {
            if v > 0.0 {
                scale.push(match norm {
                    MaskNorm::Mean => t / v,
                    MaskNorm::Sum => 1.0 / v,
                });
                out_mask.push(1.0);
            } else {
                scale.push(0.0);
                out_mask.push(0.0);
            }
        }
    }
    let mut out = vec![0.0; n * cout * pout];
    for s in 0..n {
        for ch in 0..cout {
            let base = (s * cout + ch) * pout;
            for p in 0..pout {
                let sc = scale[s * pout + p];
                if sc != 0.0 {
                    out[base + p] = raw[base + p] * sc + bias[ch];
                }
            }
        }
    }
    let value = Tensor::new(&[n, cout, oh, ow], out)?;
    let feature = tape.custom(
        &[x.feature, w, b],
        value,
        Box::new(SConvBackward {
            geom,
            transpose,
            batch: n,
            mask: x.mask.data().to_vec(),
            scale,
        }),
    );
    Ok(MaskedFeature {
        feature,
        mask: Tensor::new(&[n, 1, oh, ow], out_mask)?,
    })
}

/// Masked convolution with kernel `[F, C, kH, kW]` and bias `[F]`.
pub fn sconv(
    tape: &mut Tape,
    x: &MaskedFeature,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    dil: usize,
    norm: MaskNorm,
) -> Result<MaskedFeature> {
    let geom = tape.conv_geom(x.feature, w, stride, pad, dil)?;
    masked_conv_impl(tape, x, w, b, geom, false, norm)
}

/// Masked transposed convolution with kernel `[C_in, C_out, kH, kW]`.
pub fn sconv_transpose(
    tape: &mut Tape,
    x: &MaskedFeature,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    norm: MaskNorm,
) -> Result<MaskedFeature> {
    let geom = tape.conv_transpose_geom(x.feature, w, stride, pad)?;
    masked_conv_impl(tape, x, w, b, geom, true, norm)
}

/// Joins a decoder feature with the encoder feature of the same
/// resolution: channels are concatenated (decoder first) and the masks are
/// merged by union. Each side is zeroed where its own mask is 0 first, so
/// the union never exposes values the other side marked invalid.
pub fn skip_concat(tape: &mut Tape, decoder: &MaskedFeature, encoder: &MaskedFeature) -> Result<MaskedFeature> {
    let (dn, _, dh, dw) = tape.value(decoder.feature).dims4()?;
    let (en, _, eh, ew) = tape.value(encoder.feature).dims4()?;
    if (dn, dh, dw) != (en, eh, ew) {
        return Err(Error::shape(format!(
            "skip link between {:?} and {:?}: spatial extents differ",
            tape.shape(decoder.feature),
            tape.shape(encoder.feature)
        )));
    }
    let (d, e) = (decoder.cleared(tape)?, encoder.cleared(tape)?);
    let feature = tape.concat(&[d.feature, e.feature], 1)?;
    let mask = decoder.mask.zip_map(&encoder.mask, Float::max)?;
    Ok(MaskedFeature { feature, mask })
}

/// Whether a layer runs an ordinary convolution or the masked one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Plain convolution; its output is treated as valid everywhere.
    C,
    /// Masked convolution with mask update.
    CM,
}

impl ConvKind {
    pub fn token(self) -> &'static str {
        match self {
            ConvKind::C => "C",
            ConvKind::CM => "CM",
        }
    }
}

/// A convolution layer over [`MaskedFeature`]s.
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub conv: Conv,
    pub kind: ConvKind,
    pub norm: MaskNorm,
}

impl MaskedConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
        kind: ConvKind,
        norm: MaskNorm,
    ) -> Result<Self> {
        Ok(MaskedConv {
            conv: Conv::new(store, rng, name, spec)?,
            kind,
            norm,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, x: &MaskedFeature) -> Result<MaskedFeature> {
        let s = self.conv.spec;
        match self.kind {
            ConvKind::C => {
                let y = self.conv.forward(tape, b, x.feature)?;
                let (n, _, h, w) = tape.value(y).dims4()?;
                Ok(MaskedFeature {
                    feature: y,
                    mask: Tensor::ones(&[n, 1, h, w]),
                })
            }
            ConvKind::CM => {
                let w = self.conv.weight(tape, b)?;
                let bias = self.conv.bias(tape, b)?;
                if s.transpose {
                    sconv_transpose(tape, x, w, bias, s.stride, s.pad, self.norm)
                } else {
                    sconv(tape, x, w, bias, s.stride, s.pad, s.dilation, self.norm)
                }
            }
        }
    }

    /// Output mask for `mask` without evaluating features.
    pub fn propagate_mask(&self, mask: &Tensor) -> Result<Tensor> {
        let s = self.conv.spec;
        let out = if s.transpose {
            mask_update_transpose(mask, s.kernel, s.kernel, s.stride, s.pad)?
        } else {
            mask_update(mask, s.kernel, s.kernel, s.stride, s.pad, s.dilation)?
        };
        Ok(match self.kind {
            ConvKind::CM => out,
            ConvKind::C => Tensor::ones(out.shape()),
        })
    }
}
