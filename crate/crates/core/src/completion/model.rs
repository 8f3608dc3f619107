use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::completion::generator::{CompletionGenerator, G2Config};
use crate::completion::{compose_inputs, CompositionInputs};
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor, LossTerms, LossWeights};
use crate::nn::{Binder, Checkpoint, Mode, PatchGan, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Float, Tensor};
use crate::train::{DivergenceMonitor, StepLosses};

/// Seed of the frozen feature network used by the perceptual and style
/// terms. Fixed so that every run measures with the same extractor.
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionConfig {
    pub g2: G2Config,
    pub d_base: usize,
    pub d_spectral: bool,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Compute the style term on the composited image instead of the raw
    /// prediction.
    pub style_on_composite: bool,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            g2: G2Config::default(),
            d_base: 16,
            d_spectral: true,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            style_on_composite: true,
            seed: 0,
        }
    }
}

/// Generator, discriminator and their optimiser state.
pub struct CompletionModel {
    pub config: CompletionConfig,
    pub g: CompletionGenerator,
    pub g_store: ParamStore,
    pub d: PatchGan,
    pub d_store: ParamStore,
    pub extractor: FeatureExtractor,
    adam_g: Adam,
    adam_d: Adam,
    monitor: DivergenceMonitor,
    step: u64,
}

/// Hole pixel mask as a constant over `c` channels.
fn hole_mask(tape: &mut Tape, mask: &Tensor, c: usize) -> Result<Var> {
    Ok(tape.constant(mask.repeat_channels(c)?))
}

/// `gt ⊙ (1 − M) + pred ⊙ M` on the tape.
fn composite_var(tape: &mut Tape, pred: Var, gt: &Tensor, mask: &Tensor) -> Result<Var> {
    let m = hole_mask(tape, mask, 3)?;
    let inside = tape.mul(pred, m)?;
    let outside = gt.zip_map(&mask.repeat_channels(3)?, |g, m| g * (1.0 - m))?;
    let outside = tape.constant(outside);
    tape.add(inside, outside)
}

impl CompletionModel {
    pub fn new(config: CompletionConfig) -> Result<Self> {
        config.weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g_store = ParamStore::new();
        let g = CompletionGenerator::new(&mut g_store, &mut rng, "g2", config.g2)?;
        let mut d_store = ParamStore::new();
        let d_in = config.g2.in_channels();
        let d = PatchGan::new(&mut d_store, &mut rng, "d2", d_in, config.d_base, config.d_spectral)?;
        Ok(CompletionModel {
            config,
            g,
            g_store,
            d,
            d_store,
            extractor: FeatureExtractor::random(3, EXTRACTOR_SEED),
            adam_g: Adam::new(config.adam),
            adam_d: Adam::new(config.adam),
            monitor: DivergenceMonitor::default(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Raw prediction `I_pred` with running statistics.
    pub fn predict(&mut self, inputs: &CompositionInputs) -> Result<Tensor> {
        let composed = compose_inputs(inputs)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut self.g_store, Mode::EVAL);
        let damaged = tape.constant(composed.damaged);
        let c_comp = tape.constant(composed.c_comp);
        let out = self.g.forward(&mut tape, &mut b, damaged, Some(c_comp), &composed.validity)?;
        Ok(tape.value(out.image).clone())
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, inputs: &CompositionInputs) -> Result<StepLosses> {
        let composed = compose_inputs(inputs)?;
        let step = self.step + 1;
        let mut tape = Tape::new();
        let mut gb = Binder::new(&mut self.g_store, Mode::TRAIN);
        let damaged = tape.constant(composed.damaged.clone());
        let c_comp = tape.constant(composed.c_comp.clone());
        let pred = self
            .g
            .forward(&mut tape, &mut gb, damaged, Some(c_comp), &composed.validity)?
            .image;
        let pred_value = tape.value(pred).clone();

        // discriminator
        let d_loss = {
            let mut dt = Tape::new();
            let mut db = Binder::new(&mut self.d_store, Mode::TRAIN);
            let real = dt.constant(inputs.image.clone());
            let fake = dt.constant(pred_value);
            let cc = dt.constant(composed.c_comp.clone());
            let real_in = if self.config.g2.use_edges { dt.concat(&[real, cc], 1)? } else { real };
            let fake_in = if self.config.g2.use_edges { dt.concat(&[fake, cc], 1)? } else { fake };
            let r = self.d.forward(&mut dt, &mut db, real_in)?.logits;
            let f = self.d.forward(&mut dt, &mut db, fake_in)?.logits;
            let loss = losses::discriminator_loss(&mut dt, r, f)?;
            dt.backward(loss)?;
            let grads = db.grads(&dt);
            drop(db);
            self.adam_d.step(&mut self.d_store, &grads)?;
            dt.value(loss).item()
        };

        // generator
        let gt = tape.constant(inputs.image.clone());
        let l1 = losses::l1(&mut tape, pred, gt)?;
        let d_in = if self.config.g2.use_edges { tape.concat(&[pred, c_comp], 1)? } else { pred };
        let adv = {
            let mut db = Binder::new(&mut self.d_store, Mode::FROZEN);
            let logits = self.d.forward(&mut tape, &mut db, d_in)?.logits;
            losses::generator_adv_loss(&mut tape, logits)
        };
        let perc = losses::perceptual(&mut tape, pred, gt, &self.extractor)?;
        let styled = if self.config.style_on_composite {
            composite_var(&mut tape, pred, &inputs.image, &inputs.mask)?
        } else {
            pred
        };
        let style = losses::style(&mut tape, styled, gt, &self.extractor)?;
        let terms = LossTerms { l1, adv, perc, style };
        let total = losses::total_g2_loss(&mut tape, &terms, &self.config.weights)?;
        tape.backward(total)?;
        let grads = gb.grads(&tape);
        drop(gb);
        self.adam_g.step(&mut self.g_store, &grads)?;

        let v = terms.values(&tape);
        let total_v = tape.value(total).item();
        self.monitor.observe(step, d_loss, total_v)?;
        self.step = step;
        Ok(StepLosses {
            step,
            l1: v.l1,
            adv: v.adv,
            perc: v.perc,
            style: v.style,
            total: total_v,
            d_loss,
            fm: 0.0,
        })
    }

    /// Mean absolute error inside the hole on the `[0, 1]` scale.
    pub fn hole_l1(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Float> {
        pred.expect_same_shape(gt)?;
        let m = mask.repeat_channels(pred.shape()[1])?;
        let (mut sum, mut count) = (0.0, 0.0);
        for ((&p, &g), &h) in pred.data().iter().zip(gt.data()).zip(m.data()) {
            if h != 0.0 {
                sum += (p - g).abs() / 2.0;
                count += 1.0;
            }
        }
        Ok(if count == 0.0 { 0.0 } else { sum / count })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.meta.insert("model".into(), "completion".into());
        c.meta.insert("step".into(), self.step.to_string());
        c.meta.insert("structure".into(), self.config.g2.spec.to_string());
        c.meta.insert("monitor_streak".into(), self.monitor.streak.to_string());
        self.g_store.save_into(&mut c, "g")?;
        self.d_store.save_into(&mut c, "d")?;
        self.adam_g.save_into(&mut c, "adam_g")?;
        self.adam_d.save_into(&mut c, "adam_d")?;
        Ok(c)
    }

    /// Restores weights, optimiser state and the step counter. The model
    /// must have been built with the same configuration.
    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        if c.meta.get("model").map(String::as_str) != Some("completion") {
            return Err(Error::Checkpoint("not a completion-model checkpoint".into()));
        }
        let structure = self.config.g2.spec.to_string();
        if c.meta.get("structure") != Some(&structure) {
            return Err(Error::Checkpoint(format!(
                "checkpoint structure {:?} differs from configured {structure:?}",
                c.meta.get("structure")
            )));
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
