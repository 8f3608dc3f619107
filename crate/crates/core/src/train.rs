//! Pieces shared by the two adversarial training loops.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Discriminator loss below which training counts as collapsed.
pub const COLLAPSE_LOSS: Float = 1e-4;
/// Consecutive collapsed steps tolerated before aborting.
pub const COLLAPSE_PATIENCE: usize = 100;

/// Watches discriminator losses for collapse and non-finite values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceMonitor {
    pub threshold: Float,
    pub patience: usize,
    pub streak: usize,
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        DivergenceMonitor {
            threshold: COLLAPSE_LOSS,
            patience: COLLAPSE_PATIENCE,
            streak: 0,
        }
    }
}

impl DivergenceMonitor {
    pub fn observe(&mut self, step: u64, d_loss: Float, g_loss: Float) -> Result<()> {
        if !d_loss.is_finite() || !g_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {step}: discriminator {d_loss}, generator {g_loss}"
            )));
        }
        if d_loss < self.threshold {
            self.streak += 1;
            if self.streak >= self.patience {
                return Err(Error::Diverged(format!(
                    "discriminator loss stayed below {} for {} consecutive steps (last {d_loss:e} at step {step}); \
                     the discriminator has overpowered the generator, try a lower learning rate",
                    self.threshold, self.streak
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Generator for everything random inside training step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Sample indices of the batch used at `step`, drawn without replacement
/// (with wrap-around when the dataset is smaller than the batch).
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    if n == 0 || batch == 0 {
        return Vec::new();
    }
    let mut rng = step_rng(seed, step);
    if batch <= n {
        let mut idx = sample(&mut rng, n, batch).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..batch).map(|i| i % n).collect()
    }
}

/// One row of a loss curve.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub l1: Float,
    pub adv: Float,
    pub perc: Float,
    pub style: Float,
    /// Generator objective actually minimised.
    pub total: Float,
    pub d_loss: Float,
    /// Feature-matching term (edge model only).
    pub fm: Float,
}

pub const LOSS_CSV_HEADER: &str = "step,l1,adv,perc,style,total";
pub const AUX_CSV_HEADER: &str = "step,d_loss,fm";

impl StepLosses {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.l1, self.adv, self.perc, self.style, self.total
        )
    }

    pub fn aux_row(&self) -> String {
        format!("{},{:.9e},{:.9e}", self.step, self.d_loss, self.fm)
    }
}
