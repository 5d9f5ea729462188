use alloc::format;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Step at which the linearly decayed rate reaches zero.
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_steps: 4000,
            total_steps: 100_000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::Config(format!("optimizer field `{f}` out of range")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2");
        }
        if !(self.eps > 0.0) {
            return bad("eps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        if self.total_steps < self.warmup_steps {
            return bad("total_steps");
        }
        Ok(())
    }

    /// Linear warmup over `warmup_steps`, then linear decay to zero at
    /// `total_steps`. `step` is zero-based.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let left = self.total_steps.saturating_sub(step) as f64;
        self.lr * left / (self.total_steps - self.warmup_steps) as f64
    }
}

/// Adam moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<E: Element = f32> {
    pub step: u64,
    pub m: ModelParams<E>,
    pub v: ModelParams<E>,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(params: &ModelParams<E>) -> Self {
        let zeros = || {
            let mut p = ModelParams::default();
            for (name, t) in params.iter() {
                p.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            p
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Adds moment slots for parameters that appeared since construction and
    /// drops slots whose parameter is gone.
    pub fn sync(&mut self, params: &ModelParams<E>) {
        for slots in [&mut self.m, &mut self.v] {
            let stale: alloc::vec::Vec<_> = slots
                .names()
                .filter(|n| !params.contains(n))
                .cloned()
                .collect();
            for n in stale {
                slots.remove(&n);
            }
            for (name, t) in params.iter() {
                if !slots.contains(name) {
                    slots.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
                }
            }
        }
    }
}

/// Scales stored gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<E: Element>(params: &mut ModelParams<E>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                for v in g {
                    *v = E::from_f64(v.to_f64() * scale);
                }
            }
        }
    }
    norm
}

/// Decoupled weight decay applies to matrices and embedding tables only.
fn decays(t: &Tensor<impl Element>) -> bool {
    t.rank() >= 2
}

/// One AdamW update from the stored gradients. Parameters without a stored
/// gradient are left untouched.
pub fn adamw_step<E: Element>(
    params: &mut ModelParams<E>,
    state: &mut OptimizerState<E>,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    state.sync(params);
    let lr = cfg.learning_rate(state.step);
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (name, p) in params.iter_mut() {
        let Some(grad) = p.grad().map(|g| g.iter().map(|v| v.to_f64()).collect::<alloc::vec::Vec<_>>()) else {
            continue;
        };
        let decay = if decays(p) { cfg.weight_decay } else { 0.0 };
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            let mi = cfg.beta1 * m[i].to_f64() + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i].to_f64() + (1.0 - cfg.beta2) * g * g;
            m[i] = E::from_f64(mi);
            v[i] = E::from_f64(vi);
            let update = (mi / c1) / (libm::sqrt(vi / c2) + cfg.eps);
            let wi = w.to_f64();
            let next = wi - lr * (update + decay * wi);
            if !next.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
            *w = E::from_f64(next);
        }
    }
    state.step += 1;
    Ok(lr)
}
