//! First stage: predicting a complete edge map from a damaged grayscale
//! image, its known edges and the hole mask.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::masked::check_binary;
use crate::nn::{Activation, Binder, Checkpoint, Conv, ConvSpec, Mode, Norm, NormKind, ParamStore, PatchGan, ResidualBlock};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Float, Tensor};
use crate::train::{DivergenceMonitor, StepLosses};

pub const RESIDUAL_DILATION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeConfig {
    /// Width of the stem. The two down-sampling stages double it twice.
    pub base: usize,
    pub residual_blocks: usize,
    pub d_base: usize,
    pub spectral: bool,
    pub adv_weight: Float,
    pub fm_weight: Float,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            base: 16,
            residual_blocks: 8,
            d_base: 16,
            spectral: true,
            adv_weight: 1.0,
            fm_weight: 10.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    conv: Conv,
    norm: Norm,
}

impl Layer {
    fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, b, x)?;
        let h = self.norm.forward(tape, b, h)?;
        Ok(tape.relu(h))
    }
}

/// Encoder (7×7 stem, two stride-2 stages), dilated residual blocks with
/// instance normalisation, decoder (two transposed stages, 7×7 head) and a
/// sigmoid.
#[derive(Clone, Debug)]
pub struct EdgeGenerator {
    encoder: Vec<Layer>,
    blocks: Vec<ResidualBlock>,
    decoder: Vec<Layer>,
    head: Conv,
}

pub const EDGE_INPUT_CHANNELS: usize = 3;

impl EdgeGenerator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &EdgeConfig) -> Result<Self> {
        let b = cfg.base;
        if b == 0 {
            return Err(Error::Config("edge generator base width must be positive".into()));
        }
        let layer = |store: &mut ParamStore, rng: &mut R, n: &str, spec: ConvSpec| -> Result<Layer> {
            Ok(Layer {
                conv: Conv::new(store, rng, &format!("{name}.{n}"), spec)?,
                norm: Norm::new(store, &format!("{name}.{n}.in"), spec.out_ch, NormKind::Instance)?,
            })
        };
        let encoder = vec![
            layer(store, rng, "stem", ConvSpec::new(EDGE_INPUT_CHANNELS, b, 7).pad(3))?,
            layer(store, rng, "down0", ConvSpec::new(b, 2 * b, 4).stride(2).pad(1))?,
            layer(store, rng, "down1", ConvSpec::new(2 * b, 4 * b, 4).stride(2).pad(1))?,
        ];
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                ResidualBlock::new(
                    store,
                    rng,
                    &format!("{name}.res{i}"),
                    4 * b,
                    RESIDUAL_DILATION,
                    NormKind::Instance,
                    cfg.spectral,
                )
            })
            .collect::<Result<_>>()?;
        let decoder = vec![
            layer(store, rng, "up0", ConvSpec::new(4 * b, 2 * b, 4).stride(2).pad(1).transposed())?,
            layer(store, rng, "up1", ConvSpec::new(2 * b, b, 4).stride(2).pad(1).transposed())?,
        ];
        let head = Conv::new(store, rng, &format!("{name}.head"), ConvSpec::new(b, 1, 7).pad(3))?;
        Ok(EdgeGenerator {
            encoder,
            blocks,
            decoder,
            head,
        })
    }

    /// Maps the stacked conditioning `[N, 3, H, W]` to an edge map in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != EDGE_INPUT_CHANNELS {
            return Err(Error::shape(format!("edge generator expects 3 input channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "edge generator input sides must be multiples of 4, got {w}x{h}"
            )));
        }
        let mut h = x;
        for l in &self.encoder {
            h = l.forward(tape, b, h)?;
        }
        for blk in &self.blocks {
            h = blk.forward(tape, b, h)?;
        }
        for l in &self.decoder {
            h = l.forward(tape, b, h)?;
        }
        let h = self.head.forward(tape, b, h)?;
        Ok(Activation::Sigmoid.apply(tape, h))
    }
}

/// Stacks `gray ⊙ (1 − M)`, `edges ⊙ (1 − M)` and `M` (1 = hole).
pub fn edge_conditioning(gray: &Tensor, edges: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = gray.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("grayscale input has {c} channels")));
    }
    for (name, t) in [("edges", edges), ("mask", mask)] {
        if t.shape() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "{name} {:?} is not aligned with grayscale {:?}",
                t.shape(),
                gray.shape()
            )));
        }
    }
    check_binary(mask)?;
    let keep = |t: &Tensor| t.zip_map(mask, |v, m| v * (1.0 - m));
    Tensor::concat(&[&keep(gray)?, &keep(edges)?, mask], 1)
}

/// Inputs of one edge-model step.
#[derive(Clone, Debug)]
pub struct EdgeBatch {
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub gray: Tensor,
    /// Ground-truth edges, `[N, 1, H, W]`.
    pub edges: Tensor,
    /// `[N, 1, H, W]`, 1 = hole.
    pub mask: Tensor,
}

pub struct EdgeModel {
    pub config: EdgeConfig,
    pub g: EdgeGenerator,
    pub g_store: ParamStore,
    pub d: PatchGan,
    pub d_store: ParamStore,
    adam_g: Adam,
    adam_d: Adam,
    monitor: DivergenceMonitor,
    step: u64,
}

/// Fraction of logits on the correct side of zero.
pub fn separation_accuracy(real_logits: &Tensor, fake_logits: &Tensor) -> Float {
    let hits = real_logits.data().iter().filter(|&&v| v > 0.0).count()
        + fake_logits.data().iter().filter(|&&v| v < 0.0).count();
    hits as Float / (real_logits.numel() + fake_logits.numel()) as Float
}

impl EdgeModel {
    pub fn new(config: EdgeConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g_store = ParamStore::new();
        let g = EdgeGenerator::new(&mut g_store, &mut rng, "g1", &config)?;
        let mut d_store = ParamStore::new();
        let d = PatchGan::new(&mut d_store, &mut rng, "d1", 2, config.d_base, config.spectral)?;
        Ok(EdgeModel {
            config,
            g,
            g_store,
            d,
            d_store,
            adam_g: Adam::new(config.adam),
            adam_d: Adam::new(config.adam),
            monitor: DivergenceMonitor::default(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Predicted edge map `C_pred`.
    pub fn predict(&mut self, batch: &EdgeBatch) -> Result<Tensor> {
        let x = edge_conditioning(&batch.gray, &batch.edges, &batch.mask)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut self.g_store, Mode::EVAL);
        let x = tape.constant(x);
        let y = self.g.forward(&mut tape, &mut b, x)?;
        Ok(tape.value(y).clone())
    }

    /// Logits of the discriminator for stacked `(edge, gray)` pairs.
    pub fn discriminate(&mut self, pairs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut self.d_store, Mode::EVAL);
        let x = tape.constant(pairs.clone());
        let out = self.d.forward(&mut tape, &mut b, x)?;
        Ok(tape.value(out.logits).clone())
    }

    /// One discriminator update on stacked `(edge, gray)` pairs.
    pub fn discriminator_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<Float> {
        let mut dt = Tape::new();
        let mut db = Binder::new(&mut self.d_store, Mode::TRAIN);
        let r = dt.constant(real.clone());
        let f = dt.constant(fake.clone());
        let r = self.d.forward(&mut dt, &mut db, r)?.logits;
        let f = self.d.forward(&mut dt, &mut db, f)?.logits;
        let loss = losses::discriminator_loss(&mut dt, r, f)?;
        dt.backward(loss)?;
        let grads = db.grads(&dt);
        drop(db);
        self.adam_d.step(&mut self.d_store, &grads)?;
        Ok(dt.value(loss).item())
    }

    /// One discriminator update followed by one generator update. The
    /// reported `l1` is `mean |C_pred − C_gt|`, monitored but not trained on.
    pub fn train_step(&mut self, batch: &EdgeBatch) -> Result<StepLosses> {
        let x = edge_conditioning(&batch.gray, &batch.edges, &batch.mask)?;
        let step = self.step + 1;
        let mut tape = Tape::new();
        let mut gb = Binder::new(&mut self.g_store, Mode::TRAIN);
        let x = tape.constant(x);
        let pred = self.g.forward(&mut tape, &mut gb, x)?;

        let real_pair = Tensor::concat(&[&batch.edges, &batch.gray], 1)?;
        let fake_pair = Tensor::concat(&[tape.value(pred), &batch.gray], 1)?;
        let d_loss = {
            let mut dt = Tape::new();
            let mut db = Binder::new(&mut self.d_store, Mode::TRAIN);
            let r = dt.constant(real_pair.clone());
            let f = dt.constant(fake_pair);
            let r = self.d.forward(&mut dt, &mut db, r)?.logits;
            let f = self.d.forward(&mut dt, &mut db, f)?.logits;
            let loss = losses::discriminator_loss(&mut dt, r, f)?;
            dt.backward(loss)?;
            let grads = db.grads(&dt);
            drop(db);
            self.adam_d.step(&mut self.d_store, &grads)?;
            dt.value(loss).item()
        };

        let gray = tape.constant(batch.gray.clone());
        let fake_in = tape.concat(&[pred, gray], 1)?;
        let real_in = tape.constant(real_pair);
        let (fake, real) = {
            let mut db = Binder::new(&mut self.d_store, Mode::FROZEN);
            let fake = self.d.forward(&mut tape, &mut db, fake_in)?;
            let real = self.d.forward(&mut tape, &mut db, real_in)?;
            (fake, real)
        };
        let adv = losses::generator_adv_loss(&mut tape, fake.logits);
        let fm = losses::feature_matching(&mut tape, &real.features, &fake.features)?;
        let a = tape.scale(adv, self.config.adv_weight);
        let f = tape.scale(fm, self.config.fm_weight);
        let total = tape.add(a, f)?;
        tape.backward(total)?;
        let grads = gb.grads(&tape);
        drop(gb);
        self.adam_g.step(&mut self.g_store, &grads)?;

        let l1 = tape
            .value(pred)
            .data()
            .iter()
            .zip(batch.edges.data())
            .map(|(p, e)| (p - e).abs())
            .sum::<Float>()
            / batch.edges.numel() as Float;
        let total_v = tape.value(total).item();
        self.monitor.observe(step, d_loss, total_v)?;
        self.step = step;
        Ok(StepLosses {
            step,
            l1,
            adv: tape.value(adv).item(),
            perc: 0.0,
            style: 0.0,
            total: total_v,
            d_loss,
            fm: tape.value(fm).item(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.meta.insert("model".into(), "edge".into());
        c.meta.insert("step".into(), self.step.to_string());
        c.meta.insert("monitor_streak".into(), self.monitor.streak.to_string());
        self.g_store.save_into(&mut c, "g")?;
        self.d_store.save_into(&mut c, "d")?;
        self.adam_g.save_into(&mut c, "adam_g")?;
        self.adam_d.save_into(&mut c, "adam_d")?;
        Ok(c)
    }

    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        if c.meta.get("model").map(String::as_str) != Some("edge") {
            return Err(Error::Checkpoint("not an edge-model checkpoint".into()));
        }
        self.g_store.load_from(c, "g")?;
        self.d_store.load_from(c, "d")?;
        self.adam_g.load_from(c, "adam_g")?;
        self.adam_d.load_from(c, "adam_d")?;
        let num = |k: &str| -> Result<u64> {
            c.meta
                .get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks a numeric {k:?}")))
        };
        self.step = num("step")?;
        self.monitor.streak = num("monitor_streak")? as usize;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_checkpoint(&Checkpoint::load(path)?)
    }
}
