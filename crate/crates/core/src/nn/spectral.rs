//! Spectral normalisation by power iteration.
//!
//! A weight of shape `[out, ...]` is viewed as an `out × rest` matrix and
//! divided by an estimate of its largest singular value. The left singular
//! vector estimate `u` is persisted between steps; `v` is recomputed from it.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Binder;
use crate::tensor::{Float, Tensor};

/// Below this the singular value estimate is treated as zero and the weight
/// is left undivided.
pub const SIGMA_FLOOR: Float = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<Float>,
    pub v: Vec<Float>,
}

fn normalize(x: &mut [Float]) {
    let n = x.iter().map(|a| a * a).sum::<Float>().sqrt();
    if n > SIGMA_FLOOR {
        x.iter_mut().for_each(|a| *a /= n);
    }
}

fn mat_t_vec(w: &[Float], rows: usize, cols: usize, u: &[Float]) -> Vec<Float> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x * u[r];
        }
    }
    out
}

fn mat_vec(w: &[Float], rows: usize, cols: usize, v: &[Float]) -> Vec<Float> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl SpectralState {
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u = Tensor::randn(&[rows], 1.0, rng).into_data();
        normalize(&mut u);
        let mut v = Tensor::randn(&[cols], 1.0, rng).into_data();
        normalize(&mut v);
        SpectralState { u, v }
    }

    /// Runs `n_iters` power iterations on the `rows × cols` matrix `w` and
    /// returns the singular value estimate `uᵀ W v`.
    pub fn iterate(&mut self, w: &[Float], rows: usize, cols: usize, n_iters: usize) -> Float {
        for _ in 0..n_iters {
            self.v = mat_t_vec(w, rows, cols, &self.u);
            normalize(&mut self.v);
            self.u = mat_vec(w, rows, cols, &self.v);
            normalize(&mut self.u);
        }
        self.v = mat_t_vec(w, rows, cols, &self.u);
        normalize(&mut self.v);
        mat_vec(w, rows, cols, &self.v)
            .iter()
            .zip(&self.u)
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn matrix_dims(weight: &Tensor) -> (usize, usize) {
    let rows = weight.shape()[0];
    (rows, weight.numel() / rows)
}

/// Returns `weight / σ̂(weight)` and advances `state` by `n_iters`
/// power iterations.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState, n_iters: usize) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(weight);
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::shape(format!(
            "spectral state {}x{} does not match weight matrix {rows}x{cols}",
            state.u.len(),
            state.v.len()
        )));
    }
    let sigma = state.iterate(weight.data(), rows, cols, n_iters);
    if sigma.abs() < SIGMA_FLOOR {
        return Ok(weight.clone());
    }
    Ok(weight.map(|x| x / sigma))
}

/// Name of the buffer holding `u` for the weight `name`.
pub fn state_name(name: &str) -> String {
    format!("{name}.sn_u")
}

/// Registers the power-iteration buffer for a weight already in the store.
pub fn register<R: Rng + ?Sized>(binder_store: &mut crate::nn::ParamStore, name: &str, rng: &mut R) -> Result<()> {
    let (rows, cols) = matrix_dims(binder_store.expect(name)?);
    let st = SpectralState::random(rows, cols, rng);
    binder_store.add_buffer(&state_name(name), Tensor::new(&[rows], st.u)?)
}

/// Spectrally normalised view of parameter `name`, differentiable with
/// respect to the raw weight. One power iteration is run per binding when
/// the binder's mode updates state.
pub fn normalized_weight(tape: &mut Tape, binder: &mut Binder, name: &str) -> Result<Var> {
    let key = format!("{name}#sn");
    if let Some(v) = binder.cached(&key) {
        return Ok(v);
    }
    let w = binder.param(tape, name)?;
    let weight = tape.value(w).clone();
    let (rows, cols) = matrix_dims(&weight);
    let u_name = state_name(name);
    let u = binder.store().expect(&u_name)?.data().to_vec();
    let mut st = SpectralState { u, v: vec![0.0; cols] };
    let iters = usize::from(binder.mode.update_state);
    let sigma = st.iterate(weight.data(), rows, cols, iters);
    if binder.mode.update_state {
        *binder.store_mut().get_mut(&u_name).expect("registered") = Tensor::new(&[rows], st.u.clone())?;
    }
    let out = if sigma.abs() < SIGMA_FLOOR {
        w
    } else {
        // σ = Σ W ⊙ (u vᵀ) keeps the dependence of σ on W in the graph
        let mut uv = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            uv.extend(st.v.iter().map(|&b| st.u[r] * b));
        }
        let uv = tape.constant(Tensor::new(weight.shape(), uv)?);
        let prod = tape.mul(w, uv)?;
        let sigma_var = tape.sum(prod);
        tape.div(w, sigma_var)?
    };
    binder.cache(&key, out);
    Ok(out)
}
