use alloc::vec::Vec;

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

pub(crate) const STEP: f64 = 1e-3;
pub(crate) const DENOM_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar `f` at `x` against central
/// finite differences with step `1e-3`.
///
/// Returns the maximum over components of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn check_gradient<E, F>(f: F, x: &Tensor<E>) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, Var) -> Result<Var>,
{
    check_gradients(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x))
}

/// Multi-input form of [`check_gradient`]; every input is perturbed.
pub fn check_gradients<E, F>(f: F, inputs: &[Tensor<E>]) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<E>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor<E>> = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.values(var);
        for i in 0..inputs[k].numel() {
            let original = inputs[k].data()[i];
            work[k].data_mut()[i] = E::from_f64(original.to_f64() + STEP);
            let plus = eval(&work)?;
            work[k].data_mut()[i] = E::from_f64(original.to_f64() - STEP);
            let minus = eval(&work)?;
            work[k].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
