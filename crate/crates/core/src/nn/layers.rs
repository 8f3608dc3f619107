use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{spectral, Binder, ParamStore};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: Float = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: Float = 0.9;
pub const LEAKY_SLOPE: Float = 0.2;

/// Hyperparameters of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// Upsampling convolution; kernel stored `[in, out, k, k]`.
    pub transpose: bool,
    pub spectral: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: 0,
            dilation: 1,
            transpose: false,
            spectral: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transpose = true;
        self
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// Convolution parameters registered in a [`ParamStore`] under
/// `{name}.weight` / `{name}.bias`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let weight = if spec.transpose {
            Tensor::kaiming(&[spec.in_ch, spec.out_ch, k, k], 0, rng)
        } else {
            Tensor::kaiming(&[spec.out_ch, spec.in_ch, k, k], 1, rng)
        };
        let wname = format!("{name}.weight");
        store.add_param(&wname, weight)?;
        store.add_param(&format!("{name}.bias"), Tensor::zeros(&[spec.out_ch]))?;
        if spec.spectral {
            spectral::register(store, &wname, rng)?;
        }
        Ok(Conv {
            name: name.to_string(),
            spec,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Effective kernel, spectrally normalised when configured.
    pub fn weight(&self, tape: &mut Tape, b: &mut Binder) -> Result<Var> {
        if self.spec.spectral {
            spectral::normalized_weight(tape, b, &self.weight_name())
        } else {
            b.param(tape, &self.weight_name())
        }
    }

    pub fn bias(&self, tape: &mut Tape, b: &mut Binder) -> Result<Var> {
        b.param(tape, &self.bias_name())
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let w = self.weight(tape, b)?;
        let bias = self.bias(tape, b)?;
        let s = &self.spec;
        if s.transpose {
            tape.conv_transpose2d(x, w, Some(bias), s.stride, s.pad)
        } else {
            tape.conv2d(x, w, Some(bias), s.stride, s.pad, s.dilation)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
    None,
}

/// Affine normalisation layer with `{name}.gamma` / `{name}.beta`, plus
/// running statistics for batch normalisation.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormKind) -> Result<Self> {
        if kind != NormKind::None {
            store.add_param(&format!("{name}.gamma"), Tensor::ones(&[channels]))?;
            store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        }
        if kind == NormKind::Batch {
            store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
            store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        }
        Ok(Norm {
            name: name.to_string(),
            channels,
            kind,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        self.forward_masked(tape, b, x, None)
    }

    /// Like `forward`, but batch statistics are gathered only where `mask`
    /// is nonzero. Instance normalisation ignores the mask.
    pub fn forward_masked(&self, tape: &mut Tape, b: &mut Binder, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        if self.kind == NormKind::None {
            return Ok(x);
        }
        let gamma = b.param(tape, &format!("{}.gamma", self.name))?;
        let beta = b.param(tape, &format!("{}.beta", self.name))?;
        match self.kind {
            NormKind::Instance => tape.instance_norm(x, gamma, beta, BN_EPS),
            NormKind::Batch => {
                let rm = format!("{}.running_mean", self.name);
                let rv = format!("{}.running_var", self.name);
                if b.mode.batch_stats {
                    let (y, stats) = match mask {
                        Some(m) => tape.batch_norm_train_masked(x, gamma, beta, BN_EPS, m)?,
                        None => tape.batch_norm_train(x, gamma, beta, BN_EPS)?,
                    };
                    if b.mode.update_state {
                        let unbias = stats.count as Float / (stats.count.max(2) - 1) as Float;
                        let store = b.store_mut();
                        let mean = store.get_mut(&rm).expect("registered");
                        for (r, m) in mean.data_mut().iter_mut().zip(&stats.mean) {
                            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                        }
                        let var = store.get_mut(&rv).expect("registered");
                        for (r, v) in var.data_mut().iter_mut().zip(&stats.var) {
                            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
                        }
                    }
                    Ok(y)
                } else {
                    let mean = b.store().expect(&rm)?.data().to_vec();
                    let var = b.store().expect(&rv)?.data().to_vec();
                    tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
                }
            }
            NormKind::None => unreachable!(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(Float),
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// `x + norm(conv(act(norm(conv(x)))))` with shape-preserving dilated
/// convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub act: Activation,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        dilation: usize,
        norm: NormKind,
        spectral: bool,
    ) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3)
            .pad(dilation)
            .dilation(dilation)
            .spectral(spectral);
        Ok(ResidualBlock {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), spec)?,
            norm1: Norm::new(store, &format!("{name}.norm1"), channels, norm)?,
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), spec)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), channels, norm)?,
            act: Activation::Relu,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.conv1.spec.in_ch {
            return Err(Error::shape(format!(
                "residual block over {} channels got input {:?}",
                self.conv1.spec.in_ch,
                tape.shape(x)
            )));
        }
        let h = self.conv1.forward(tape, b, x)?;
        let h = self.norm1.forward(tape, b, h)?;
        let h = self.act.apply(tape, h);
        let h = self.conv2.forward(tape, b, h)?;
        let h = self.norm2.forward(tape, b, h)?;
        tape.add(x, h)
    }
}
