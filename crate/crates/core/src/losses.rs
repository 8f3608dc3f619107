//! Training objectives for the two generators and their discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Mean absolute difference.
pub fn l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Discriminator loss `−(E log D(real) + E log(1 − D(fake)))` on logits,
/// written with softplus so it never evaluates `log 0`.
pub fn discriminator_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let nr = tape.neg(real_logits);
    let r = tape.softplus(nr);
    let r = tape.mean(r);
    let f = tape.softplus(fake_logits);
    let f = tape.mean(f);
    tape.add(r, f)
}

/// Non-saturating generator loss `−E log D(fake)`.
pub fn generator_adv_loss(tape: &mut Tape, fake_logits: Var) -> Var {
    let n = tape.neg(fake_logits);
    let s = tape.softplus(n);
    tape.mean(s)
}

/// Mean over layers of the L1 distance between paired feature maps.
pub fn feature_matching(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape(format!(
            "feature matching over {} real and {} fake maps",
            real.len(),
            fake.len()
        )));
    }
    let mut total = None;
    for (&r, &f) in real.iter().zip(fake) {
        let r = tape.detach(r);
        let term = l1(tape, f, r)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / real.len() as Float))
}

/// Weights of the completion objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: Float,
    pub adv: Float,
    pub perc: Float,
    pub style: Float,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            adv: 0.1,
            perc: 0.1,
            style: 250.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("adv", self.adv), ("perc", self.perc), ("style", self.style)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of plain values.
    pub fn combine(&self, t: &LossTerms<Float>) -> Float {
        self.l1 * t.l1 + self.adv * t.adv + self.perc * t.perc + self.style * t.style
    }
}

/// The four completion loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub l1: T,
    pub adv: T,
    pub perc: T,
    pub style: T,
}

impl LossTerms<Var> {
    pub fn values(&self, tape: &Tape) -> LossTerms<Float> {
        LossTerms {
            l1: tape.value(self.l1).item(),
            adv: tape.value(self.adv).item(),
            perc: tape.value(self.perc).item(),
            style: tape.value(self.style).item(),
        }
    }
}

/// `λ_l1·L1 + λ_adv·L_adv + λ_p·L_perc + λ_s·L_style`.
pub fn total_g2_loss(tape: &mut Tape, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(terms.l1, w.l1);
    let b = tape.scale(terms.adv, w.adv);
    let c = tape.scale(terms.perc, w.perc);
    let d = tape.scale(terms.style, w.style);
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    tape.add(ab, cd)
}

#[derive(Clone, Debug)]
enum Stage {
    Conv { w: Tensor, b: Tensor },
    Relu,
    Pool,
    Tap,
}

/// Frozen feature network exposing several activation maps.
///
/// The default variant is a seeded random stack of four 3×3 conv + ReLU
/// layers with 2×2 average pooling between them, tapped after each ReLU.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    in_ch: Option<usize>,
}

pub const EXTRACTOR_WIDTHS: [usize; 4] = [8, 16, 32, 32];

impl FeatureExtractor {
    pub fn random(in_ch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c = in_ch;
        for (i, &f) in EXTRACTOR_WIDTHS.iter().enumerate() {
            if i > 0 {
                stages.push(Stage::Pool);
            }
            stages.push(Stage::Conv {
                w: Tensor::kaiming(&[f, c, 3, 3], 1, &mut rng),
                b: Tensor::zeros(&[f]),
            });
            stages.push(Stage::Relu);
            stages.push(Stage::Tap);
            c = f;
        }
        FeatureExtractor {
            stages,
            in_ch: Some(in_ch),
        }
    }

    /// A single tap on the raw input.
    pub fn identity() -> Self {
        FeatureExtractor {
            stages: vec![Stage::Tap],
            in_ch: None,
        }
    }

    pub fn num_taps(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Tap)).count()
    }

    /// Activation maps at every tap, recorded on `tape`.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        if let Some(c) = self.in_ch {
            let shape = tape.shape(x);
            if shape.len() != 4 || shape[1] != c {
                return Err(Error::shape(format!(
                    "feature extractor expects [N, {c}, H, W], got {shape:?}"
                )));
            }
        }
        let mut h = x;
        let mut taps = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv { w, b } => {
                    let wv = tape.constant(w.clone());
                    let bv = tape.constant(b.clone());
                    h = tape.conv2d(h, wv, Some(bv), 1, 1, 1)?;
                }
                Stage::Relu => h = tape.relu(h),
                Stage::Pool => h = tape.avg_pool2(h)?,
                Stage::Tap => taps.push(h),
            }
        }
        Ok(taps)
    }

    /// Globally average-pooled last-tap features, one vector per sample.
    pub fn embed(&self, images: &Tensor) -> Result<Vec<Vec<Float>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let taps = self.features(&mut tape, x)?;
        let last = tape.value(*taps.last().expect("at least one tap"));
        let (n, c, h, w) = last.dims4()?;
        let plane = h * w;
        Ok((0..n)
            .map(|s| {
                (0..c)
                    .map(|ch| {
                        let base = (s * c + ch) * plane;
                        last.data()[base..base + plane].iter().sum::<Float>() / plane as Float
                    })
                    .collect()
            })
            .collect())
    }
}

/// `Σ_i mean|φ_i(gt) − φ_i(pred)|`.
pub fn perceptual(tape: &mut Tape, pred: Var, gt: Var, fx: &FeatureExtractor) -> Result<Var> {
    let fp = fx.features(tape, pred)?;
    let fg = fx.features(tape, gt)?;
    let mut total = None;
    for (p, g) in fp.into_iter().zip(fg) {
        let term = l1(tape, g, p)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::shape("feature extractor has no taps"))
}

/// Mean over taps of the mean absolute difference of Gram matrices.
pub fn style(tape: &mut Tape, a: Var, b: Var, fx: &FeatureExtractor) -> Result<Var> {
    let fa = fx.features(tape, a)?;
    let fb = fx.features(tape, b)?;
    let layers = fa.len();
    let mut total = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let gx = tape.gram(x)?;
        let gy = tape.gram(y)?;
        let term = l1(tape, gx, gy)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::shape("feature extractor has no taps"))?;
    Ok(tape.scale(total, 1.0 / layers as Float))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_sum_to_251_2() {
        let w = LossWeights::default();
        let ones = LossTerms {
            l1: 1.0,
            adv: 1.0,
            perc: 1.0,
            style: 1.0,
        };
        assert!((w.combine(&ones) - 251.2).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights {
            adv: -0.1,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn extractor_has_four_taps() {
        let fx = FeatureExtractor::random(3, 0);
        assert_eq!(fx.num_taps(), 4);
        let e = fx.embed(&Tensor::ones(&[2, 3, 16, 16])).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].len(), 32);
    }
}
