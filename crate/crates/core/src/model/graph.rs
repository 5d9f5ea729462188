use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelParams;
use crate::error::Result;
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

/// A tape plus lazily bound model parameters.
///
/// Parameters are copied onto the tape the first time a forward pass asks
/// for them, so parameters a loss never touches are never on its path and
/// receive exactly zero gradient.
pub struct Graph<'t, 'p, E: Element = f32> {
    tape: &'t mut Tape<E>,
    params: &'p ModelParams<E>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'t, 'p, E: Element> Graph<'t, 'p, E> {
    /// Parameters are bound as gradient-receiving leaves.
    pub fn new(tape: &'t mut Tape<E>, params: &'p ModelParams<E>) -> Self {
        Self {
            tape,
            params,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters are bound as constants (inference).
    pub fn frozen(tape: &'t mut Tape<E>, params: &'p ModelParams<E>) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, params)
        }
    }

    /// Uses an existing tape value for parameter `name`.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable {
            self.tape.variable(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.into(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn tape(&mut self) -> &mut Tape<E> {
        self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.tape.value(v)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.tape.constant(t)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound parameter, keyed by name. Parameters off
    /// the loss path map to zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .map(|(name, &v)| (name.clone(), grads.values(v)))
            .collect()
    }
}

/// Finite-difference check of `loss` with respect to every parameter it
/// touches, using the same step and error measure as
/// [`check_gradient`](crate::tensor::check_gradient).
pub fn check_param_gradients<F>(params: &ModelParams<f64>, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, '_, f64>) -> Result<Var>,
{
    use crate::tensor::gradcheck::{DENOM_FLOOR, STEP};

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, params);
    let out = loss(&mut g)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads);

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, p);
        let out = loss(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (name, a) in &analytic {
        for (i, &ai) in a.iter().enumerate() {
            let original = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = original + STEP;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = original - STEP;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let denom = ai.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((ai - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
