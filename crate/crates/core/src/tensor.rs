//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a flat buffer. Gradient
//! bookkeeping lives on the [`Tape`](crate::autodiff::Tape), which wraps
//! tensors in nodes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type used throughout the crate.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
/// Element type used throughout the crate.
#[cfg(feature = "f32")]
pub type Float = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Float>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Float) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Float) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Samples i.i.d. standard normal values scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: Float, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z as Float * std
        })
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: Float, hi: Float, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| lo + (hi - lo) * rng.random::<f64>() as Float)
    }

    /// Kaiming-style fan-in initialisation for a conv kernel laid out as
    /// `[out, in, kh, kw]` (or `[in, out, kh, kw]` for transposed kernels,
    /// where `fan_in_axis` selects the input-channel axis).
    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in_axis: usize, rng: &mut R) -> Self {
        let receptive: usize = shape[2..].iter().product();
        let fan_in = shape[fan_in_axis] * receptive;
        let std = (2.0 / fan_in as f64).sqrt() as Float;
        Self::randn(shape, std, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Float {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Float, Float) -> Float) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> Float {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Float {
        self.sum() / self.data.len() as Float
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Float {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Float::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if axis >= first.ndim() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape
            )));
        }
        for p in &parts[1..] {
            let ok = p.ndim() == first.ndim()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Tensor::new(&shape, data)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let block = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * block + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, data)
    }

    /// Repeats a `[N, 1, H, W]` tensor across `c` channels.
    pub fn repeat_channels(&self, c: usize) -> Result<Tensor> {
        let (n, one, h, w) = self.dims4()?;
        if one != 1 {
            return Err(Error::shape(format!(
                "repeat_channels expects a single channel, got {:?}",
                self.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for i in 0..n {
            let src = &self.data[i * plane..(i + 1) * plane];
            for _ in 0..c {
                data.extend_from_slice(src);
            }
        }
        Tensor::new(&[n, c, h, w], data)
    }
}
