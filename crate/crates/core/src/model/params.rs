use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, truncated_normal};
use crate::tensor::{Element, Tensor};

/// Prefix shared by every auxiliary (distillation-only) parameter.
pub const AUX_PREFIX: &str = "aux.";

pub const NUM_DISTANCE_CLASSES: usize = 3;
pub const NUM_ADVERSARIAL_CLASSES: usize = 2;

/// Prediction heads on top of the task modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Lm,
    Distance,
    Adversarial,
    Reorder,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Lm => "head.lm",
            Head::Distance => "head.distance",
            Head::Adversarial => "head.adversarial",
            Head::Reorder => "head.reorder",
        }
    }

    pub fn classes(self, config: &ModelConfig) -> usize {
        match self {
            Head::Lm => config.vocab_size,
            Head::Distance => NUM_DISTANCE_CLASSES,
            Head::Adversarial => NUM_ADVERSARIAL_CLASSES,
            Head::Reorder => config.reorder_classes(),
        }
    }
}

/// Dimensions of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub relative_range: usize,
}

impl LayerDims {
    pub fn universal(c: &ModelConfig) -> Self {
        Self {
            hidden: c.universal_hidden,
            heads: c.universal_heads,
            ffn: c.universal_hidden * c.ffn_multiplier,
            relative_range: c.relative_range(),
        }
    }

    pub fn task(c: &ModelConfig) -> Self {
        Self {
            hidden: c.task_hidden,
            heads: c.task_heads,
            ffn: c.task_hidden * c.ffn_multiplier,
            relative_range: c.relative_range(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

pub fn layer_prefix(stack: &str, layer: usize) -> String {
    format!("{stack}.layer{layer}")
}

fn layer_shapes(prefix: &str, d: LayerDims, out: &mut Vec<(String, Vec<usize>)>) {
    let dh = d.head_dim();
    for a in 0..d.heads {
        for w in ["wq", "wk", "wv"] {
            out.push((format!("{prefix}.attn.head{a}.{w}"), vec![d.hidden, dh]));
        }
    }
    out.push((format!("{prefix}.attn.wo"), vec![d.hidden, d.hidden]));
    out.push((
        format!("{prefix}.attn.rel_bias"),
        vec![d.heads, 2 * d.relative_range + 1],
    ));
    out.push((format!("{prefix}.ln1.gain"), vec![d.hidden]));
    out.push((format!("{prefix}.ln1.bias"), vec![d.hidden]));
    out.push((format!("{prefix}.ffn.w1"), vec![d.hidden, d.ffn]));
    out.push((format!("{prefix}.ffn.b1"), vec![d.ffn]));
    out.push((format!("{prefix}.ffn.w2"), vec![d.ffn, d.hidden]));
    out.push((format!("{prefix}.ffn.b2"), vec![d.hidden]));
    out.push((format!("{prefix}.ln2.gain"), vec![d.hidden]));
    out.push((format!("{prefix}.ln2.bias"), vec![d.hidden]));
}

/// Every parameter path with its shape, in a canonical order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let d = c.universal_hidden;
    let t = c.task_hidden;
    out.push(("embed.tokens".into(), vec![c.vocab_size, d]));
    if c.num_genres > 0 && c.num_genre_prompts > 0 {
        out.push(("embed.genre".into(), vec![c.num_genres, c.num_genre_prompts, d]));
    }
    let u = LayerDims::universal(c);
    for l in 0..c.universal_layers {
        layer_shapes(&layer_prefix("universal", l), u, &mut out);
    }
    let td = LayerDims::task(c);
    for module in ["nlu", "nlg"] {
        out.push((format!("{module}.proj.w"), vec![d, t]));
        out.push((format!("{module}.proj.b"), vec![t]));
        for l in 0..c.task_layers {
            layer_shapes(&layer_prefix(module, l), td, &mut out);
        }
    }
    for l in 0..c.auxiliary_layers {
        layer_shapes(&layer_prefix("aux", l), td, &mut out);
    }
    for head in [Head::Lm, Head::Distance, Head::Adversarial, Head::Reorder] {
        let n = head.classes(c);
        out.push((format!("{}.w", head.prefix()), vec![t, n]));
        out.push((format!("{}.b", head.prefix()), vec![n]));
    }
    out
}

/// Named parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<E: Element = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Default for ModelParams<E> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<E: Element> ModelParams<E> {
    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Option<Tensor<E>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<E>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds each named gradient into the matching parameter.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .tensors
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().map(|v| v.to_f64() * v.to_f64()))
            .sum();
        libm::sqrt(sq)
    }

    pub fn cast<F: Element>(&self) -> ModelParams<F> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that the store holds exactly the parameters `config` needs,
    /// each with the configured shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let expected = param_shapes(config);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: expected {shape:?}, found {:?}", t.shape()),
                ));
            }
        }
        if expected.len() != self.tensors.len() {
            let known: BTreeMap<&str, ()> = expected.iter().map(|(n, _)| (n.as_str(), ())).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !known.contains_key(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

pub(crate) fn init_tensor<E: Element>(
    name: &str,
    shape: &[usize],
    rng: &mut crate::rng::SeededRng,
) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or("");
    let data: Vec<f64> = if leaf == "gain" {
        vec![1.0; n]
    } else if leaf.starts_with('b') || leaf == "rel_bias" {
        vec![0.0; n]
    } else if name.ends_with("proj.w") && shape[0] == shape[1] {
        let mut t = vec![0.0; n];
        for i in 0..shape[0] {
            t[i * shape[0] + i] = 1.0;
        }
        t
    } else {
        (0..n).map(|_| truncated_normal(rng, 0.02)).collect()
    };
    Tensor::from_parts(shape.to_vec(), data.into_iter().map(E::from_f64).collect())
        .with_requires_grad(true)
}

/// Deterministic initialisation: weights from a normal(0, 0.02) truncated
/// at two standard deviations, layer-norm gains 1, biases 0. Square
/// universal-to-task projections start as the identity.
pub fn init_params<E: Element>(config: &ModelConfig, seed: u64) -> Result<ModelParams<E>> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = ModelParams::default();
    for (name, shape) in param_shapes(config) {
        let t = init_tensor(&name, &shape, &mut rng);
        params.insert(name, t);
    }
    Ok(params)
}
