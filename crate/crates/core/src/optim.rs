//! Adam-style adaptive gradient steps with bias correction.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Float>,
    pub v: Vec<Float>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One adaptive update of `params` in place. `step` is the 1-based count
/// of updates applied so far including this one.
pub fn sgd_adaptive_step(
    params: &mut [Float],
    grads: &[Float],
    state: &mut Moments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "adaptive step: {} params, {} grads, {}/{} moment entries",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimiser state for every trainable entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with the given named gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
            let state = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros(param.numel()));
            sgd_adaptive_step(param.data_mut(), grad.data(), state, self.step, &self.config)?;
        }
        Ok(())
    }

    /// Writes moment buffers under `prefix` into a checkpoint.
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.meta.insert(format!("{prefix}.step"), self.step.to_string());
        for (name, mom) in &self.moments {
            ckpt.insert(format!("{prefix}.m.{name}"), Tensor::new(&[mom.m.len()], mom.m.clone())?)?;
            ckpt.insert(format!("{prefix}.v.{name}"), Tensor::new(&[mom.v.len()], mom.v.clone())?)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.step = match ckpt.meta.get(&format!("{prefix}.step")) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad step count {s:?}")))?,
            None => 0,
        };
        self.moments.clear();
        let m_prefix = format!("{prefix}.m.");
        for (key, m) in &ckpt.tensors {
            if let Some(name) = key.strip_prefix(&m_prefix) {
                let v = ckpt
                    .tensors
                    .get(&format!("{prefix}.v.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
                self.moments.insert(
                    name.to_string(),
                    Moments {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }
        Ok(())
    }
}
