//! Completion generator: a U-shaped stack of (masked) convolutions.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::completion::structure::NetworkSpec;
use crate::error::{Error, Result};
use crate::masked::{skip_concat, ConvKind, MaskNorm, MaskedConv, MaskedFeature};
use crate::nn::{Activation, Binder, ConvSpec, Norm, NormKind, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Float, Tensor};

const KERNEL: usize = 4;
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct G2Config {
    pub spec: NetworkSpec,
    /// Width of the first encoder stage. Later stages double up to `8·base`.
    pub base: usize,
    /// Feed the composite edge map as a fourth input channel.
    pub use_edges: bool,
    pub use_skip_links: bool,
    pub mask_norm: MaskNorm,
    /// Spectral normalisation inside residual blocks.
    pub spectral: bool,
}

impl Default for G2Config {
    fn default() -> Self {
        G2Config {
            spec: NetworkSpec::default(),
            base: 16,
            use_edges: true,
            use_skip_links: true,
            mask_norm: MaskNorm::Mean,
            spectral: true,
        }
    }
}

impl G2Config {
    pub fn in_channels(&self) -> usize {
        IMAGE_CHANNELS + usize::from(self.use_edges)
    }

    /// Output width of encoder stage `k`.
    pub fn stage_width(&self, k: usize) -> usize {
        (self.base << k.min(3)).min(8 * self.base)
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.spec.depth()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "structure {} down-samples {} times, so input sides must be positive multiples of {m}; got {w}x{h} (use e.g. {}x{})",
                self.spec,
                self.spec.depth(),
                (w.div_ceil(m).max(1)) * m,
                (h.div_ceil(m).max(1)) * m
            )));
        }
        Ok(())
    }
}

/// Residual block over masked features: two 3×3 layers with batch
/// normalisation. The output mask is the union of the input mask and the
/// mask after the second layer.
#[derive(Clone, Debug)]
pub struct MaskedResidual {
    pub conv1: MaskedConv,
    pub norm1: Norm,
    pub conv2: MaskedConv,
    pub norm2: Norm,
}

impl MaskedResidual {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        ch: usize,
        kind: ConvKind,
        cfg: &G2Config,
    ) -> Result<Self> {
        let spec = ConvSpec::new(ch, ch, 3).pad(1).spectral(cfg.spectral);
        Ok(MaskedResidual {
            conv1: MaskedConv::new(store, rng, &format!("{name}.conv1"), spec, kind, cfg.mask_norm)?,
            norm1: Norm::new(store, &format!("{name}.norm1"), ch, NormKind::Batch)?,
            conv2: MaskedConv::new(store, rng, &format!("{name}.conv2"), spec, kind, cfg.mask_norm)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), ch, NormKind::Batch)?,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &mut Binder, x: &MaskedFeature) -> Result<MaskedFeature> {
        let h = self.conv1.forward(tape, b, x)?;
        let f = self.norm1.forward_masked(tape, b, h.feature, Some(&h.mask))?;
        let f = tape.relu(f);
        let h = self.conv2.forward(tape, b, &MaskedFeature { feature: f, mask: h.mask })?;
        let f = self.norm2.forward_masked(tape, b, h.feature, Some(&h.mask))?;
        let feature = tape.add(x.feature, f)?;
        MaskedFeature {
            feature,
            mask: x.mask.zip_map(&h.mask, Float::max)?,
        }
        .cleared(tape)
    }

    fn propagate_mask(&self, mask: &Tensor) -> Result<Tensor> {
        let m = self.conv2.propagate_mask(&self.conv1.propagate_mask(mask)?)?;
        mask.zip_map(&m, Float::max)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: MaskedConv,
    norm: Option<Norm>,
}

/// Result of a generator pass.
pub struct G2Output {
    /// `[N, 3, H, W]` in `[-1, 1]`.
    pub image: Var,
    /// Validity mask after every layer, in execution order.
    pub masks: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct CompletionGenerator {
    pub config: G2Config,
    encoder: Vec<Stage>,
    residual: Vec<MaskedResidual>,
    decoder: Vec<Stage>,
}

impl CompletionGenerator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, config: G2Config) -> Result<Self> {
        let spec = config.spec;
        let depth = spec.depth();
        if depth == 0 {
            return Err(Error::Config(format!(
                "structure {spec} has no down-sampling stage; at least one is required"
            )));
        }
        if config.base == 0 {
            return Err(Error::Config("generator base width must be positive".into()));
        }
        let mut encoder = Vec::with_capacity(depth);
        let mut c = config.in_channels();
        for k in 0..depth {
            let w = config.stage_width(k);
            let s = ConvSpec::new(c, w, KERNEL).stride(2).pad(1);
            encoder.push(Stage {
                conv: MaskedConv::new(store, rng, &format!("{name}.enc{k}"), s, spec.down.kind, config.mask_norm)?,
                norm: Some(Norm::new(store, &format!("{name}.enc{k}.bn"), w, NormKind::Batch)?),
            });
            c = w;
        }
        let mut residual = Vec::with_capacity(spec.residual_blocks());
        for r in 0..spec.residual_blocks() {
            residual.push(MaskedResidual::new(
                store,
                rng,
                &format!("{name}.res{r}"),
                c,
                spec.residual_kind(),
                &config,
            )?);
        }
        let mut decoder = Vec::with_capacity(depth);
        for j in 0..depth {
            let skip = if config.use_skip_links { config.stage_width(depth - 1 - j) } else { 0 };
            let last = j + 1 == depth;
            let out = if last { IMAGE_CHANNELS } else { config.stage_width(depth - 2 - j) };
            let s = ConvSpec::new(c + skip, out, KERNEL).stride(2).pad(1).transposed();
            decoder.push(Stage {
                conv: MaskedConv::new(store, rng, &format!("{name}.dec{j}"), s, spec.up.kind, config.mask_norm)?,
                norm: if last {
                    None
                } else {
                    Some(Norm::new(store, &format!("{name}.dec{j}.bn"), out, NormKind::Batch)?)
                },
            });
            c = out;
        }
        Ok(CompletionGenerator {
            config,
            encoder,
            residual,
            decoder,
        })
    }

    /// Number of encoder/decoder pairs joined by skip links.
    pub fn skip_links(&self) -> usize {
        if self.config.use_skip_links {
            self.encoder.len()
        } else {
            0
        }
    }

    fn input(&self, tape: &mut Tape, damaged: Var, c_comp: Option<Var>, validity: &Tensor) -> Result<MaskedFeature> {
        let (_, ic, h, w) = tape.value(damaged).dims4()?;
        if ic != IMAGE_CHANNELS {
            return Err(Error::shape(format!("damaged image has {ic} channels, expected 3")));
        }
        self.config.check_input(h, w)?;
        let x = match (self.config.use_edges, c_comp) {
            (true, Some(c)) => tape.concat(&[damaged, c], 1)?,
            (true, None) => return Err(Error::Config("generator expects an edge map".into())),
            (false, _) => damaged,
        };
        MaskedFeature::new(tape, x, validity.clone())
    }

    /// `I_pred = G2(damaged, c_comp, validity)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        damaged: Var,
        c_comp: Option<Var>,
        validity: &Tensor,
    ) -> Result<G2Output> {
        let mut x = self.input(tape, damaged, c_comp, validity)?;
        let mut masks = Vec::new();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (k, st) in self.encoder.iter().enumerate() {
            x = st.conv.forward(tape, b, &x)?;
            let f = st.norm.as_ref().expect("encoder norm").forward_masked(tape, b, x.feature, Some(&x.mask))?;
            x.feature = tape.relu(f);
            x = x.cleared(tape)?;
            masks.push((format!("enc{k}"), x.mask.clone()));
            skips.push(x.clone());
        }
        for (r, block) in self.residual.iter().enumerate() {
            x = block.forward(tape, b, &x)?;
            masks.push((format!("res{r}"), x.mask.clone()));
        }
        for (j, st) in self.decoder.iter().enumerate() {
            if self.config.use_skip_links {
                let e = &skips[skips.len() - 1 - j];
                x = skip_concat(tape, &x, e)?;
                masks.push((format!("skip{j}"), x.mask.clone()));
            }
            x = st.conv.forward(tape, b, &x)?;
            x.feature = match &st.norm {
                Some(n) => {
                    let f = n.forward_masked(tape, b, x.feature, Some(&x.mask))?;
                    Activation::LeakyRelu(LEAKY_SLOPE).apply(tape, f)
                }
                None => tape.tanh(x.feature),
            };
            x = x.cleared(tape)?;
            masks.push((format!("dec{j}"), x.mask.clone()));
        }
        Ok(G2Output { image: x.feature, masks })
    }

    /// The masks `forward` would produce for `validity`, without features.
    pub fn mask_chain(&self, validity: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let (_, c, h, w) = validity.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("validity mask has {c} channels")));
        }
        self.config.check_input(h, w)?;
        crate::masked::check_binary(validity)?;
        let mut m = validity.clone();
        let mut out = Vec::new();
        let mut skips = Vec::new();
        for (k, st) in self.encoder.iter().enumerate() {
            m = st.conv.propagate_mask(&m)?;
            out.push((format!("enc{k}"), m.clone()));
            skips.push(m.clone());
        }
        for (r, block) in self.residual.iter().enumerate() {
            m = block.propagate_mask(&m)?;
            out.push((format!("res{r}"), m.clone()));
        }
        for (j, st) in self.decoder.iter().enumerate() {
            if self.config.use_skip_links {
                m = m.zip_map(&skips[skips.len() - 1 - j], Float::max)?;
                out.push((format!("skip{j}"), m.clone()));
            }
            m = st.conv.propagate_mask(&m)?;
            out.push((format!("dec{j}"), m.clone()));
        }
        Ok(out)
    }
}
