//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// Worst relative error found for each input.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub rel_errors: Vec<Float>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> Float {
        self.rel_errors.iter().copied().fold(0.0, Float::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
///
/// The error for one input is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)` where `a`
/// and `n` are the analytic and numeric gradient vectors. At most
/// `max_probes` evenly spaced elements of each input are perturbed.
pub fn check<F>(inputs: &[Tensor], h: Float, floor: Float, max_probes: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Float> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad_tensor(vars[k]);
        let n = input.numel();
        let step = (n / max_probes.max(1)).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        rel_errors.push(diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor));
    }
    Ok(GradReport { rel_errors })
}
