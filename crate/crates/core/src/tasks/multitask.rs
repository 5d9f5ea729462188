use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::losses::{
    adversarial_loss, controllable_lm_loss, distance_loss, document_lm_loss,
    masked_lm_loss_with_outputs, reorder_loss, uktp_loss,
};
use super::optim::{adamw_step, clip_grad_norm, OptimizerConfig, OptimizerState};
use super::{
    AdversarialExample, ControllableExample, DistanceExample, MaskedLmExample, ReorderExample,
    UktpExample,
};
use crate::error::{Error, Result};
use crate::model::{Graph, Model, ModelMemory, NluOutput};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::tokenizer::TokenId;

/// A long document for the document language-modelling loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentStream {
    pub tokens: Vec<TokenId>,
    pub segment_len: usize,
}

/// One mini-batch per enabled task; empty batches are disabled tasks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskBundle {
    pub masked_lm: Vec<MaskedLmExample>,
    pub document_lm: Vec<DocumentStream>,
    pub reorder: Vec<ReorderExample>,
    pub distance: Vec<DistanceExample>,
    pub uktp: Vec<UktpExample>,
    pub adversarial: Vec<AdversarialExample>,
    pub controllable: Vec<ControllableExample>,
}

/// Task names in the order their losses are summed.
pub const TASK_NAMES: [&str; 7] = [
    "masked_lm",
    "document_lm",
    "reorder",
    "distance",
    "uktp",
    "adversarial",
    "controllable",
];

impl TaskBundle {
    pub fn is_empty(&self) -> bool {
        self.enabled().is_empty()
    }

    pub fn enabled(&self) -> Vec<&'static str> {
        let sizes = [
            self.masked_lm.len(),
            self.document_lm.len(),
            self.reorder.len(),
            self.distance.len(),
            self.uktp.len(),
            self.adversarial.len(),
            self.controllable.len(),
        ];
        TASK_NAMES
            .iter()
            .zip(sizes)
            .filter(|(_, n)| *n > 0)
            .map(|(name, _)| *name)
            .collect()
    }
}

/// Records every enabled task loss on `g` and returns `(name, loss)` pairs.
pub fn bundle_losses<E: Element>(
    g: &mut Graph<'_, '_, E>,
    model: &Model<E>,
    bundle: &TaskBundle,
) -> Result<Vec<(&'static str, Var)>> {
    bundle_losses_with_outputs(g, model, bundle).map(|r| r.0)
}

/// [`bundle_losses`] that also returns the forward pass of every masked-LM
/// example.
pub fn bundle_losses_with_outputs<E: Element>(
    g: &mut Graph<'_, '_, E>,
    model: &Model<E>,
    bundle: &TaskBundle,
) -> Result<(Vec<(&'static str, Var)>, Vec<NluOutput>)> {
    let c = &model.config;
    let mut out = Vec::new();
    let mut outputs = Vec::new();
    if !bundle.masked_lm.is_empty() {
        let (loss, o) = masked_lm_loss_with_outputs(g, c, &bundle.masked_lm)?;
        out.push(("masked_lm", loss));
        outputs = o;
    }
    if !bundle.document_lm.is_empty() {
        let mut parts = Vec::new();
        for doc in &bundle.document_lm {
            let mut memory = ModelMemory::new(c);
            parts.push(document_lm_loss(g, c, &doc.tokens, doc.segment_len, Some(&mut memory))?);
        }
        let t = g.tape();
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p)?;
        }
        let mean = t.scale(acc, 1.0 / parts.len() as f64)?;
        out.push(("document_lm", mean));
    }
    if !bundle.reorder.is_empty() {
        out.push(("reorder", reorder_loss(g, c, &bundle.reorder)?));
    }
    if !bundle.distance.is_empty() {
        out.push(("distance", distance_loss(g, c, &bundle.distance)?));
    }
    if !bundle.uktp.is_empty() {
        out.push(("uktp", uktp_loss(g, c, &bundle.uktp)?));
    }
    if !bundle.adversarial.is_empty() {
        out.push(("adversarial", adversarial_loss(g, c, &bundle.adversarial)?));
    }
    if !bundle.controllable.is_empty() {
        out.push(("controllable", controllable_lm_loss(g, c, &bundle.controllable)?));
    }
    Ok((out, outputs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: BTreeMap<&'static str, f64>,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Completed optimizer steps after this one.
    pub step: u64,
}

/// Attention maps of every layer of one NLU pass, universal layers first.
pub type AttentionMaps<E> = Vec<Tensor<E>>;

/// Forward and backward of the unweighted sum of task losses; gradients are
/// left in the parameter store.
pub fn accumulate_bundle_gradients<E: Element>(
    model: &mut Model<E>,
    bundle: &TaskBundle,
) -> Result<(BTreeMap<&'static str, f64>, f64)> {
    accumulate_recording(model, bundle, &TaskWeights::new()).map(|(l, t, _)| (l, t))
}

/// Per-task loss multipliers; tasks not listed weigh 1.
pub type TaskWeights = BTreeMap<String, f64>;

fn accumulate_recording<E: Element>(
    model: &mut Model<E>,
    bundle: &TaskBundle,
    weights: &TaskWeights,
) -> Result<(BTreeMap<&'static str, f64>, f64, Vec<AttentionMaps<E>>)> {
    if bundle.is_empty() {
        return Err(Error::Empty("task bundle"));
    }
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &model.params);
    let (losses, outputs) = bundle_losses_with_outputs(&mut g, model, bundle)?;
    let mut weighted = Vec::with_capacity(losses.len());
    for &(name, l) in &losses {
        match weights.get(name) {
            Some(&w) if w != 1.0 => weighted.push(g.tape().scale(l, w)?),
            _ => weighted.push(l),
        }
    }
    let mut total = weighted[0];
    for &l in &weighted[1..] {
        total = g.tape().add(total, l)?;
    }
    let grads = g.backward(total)?;
    let values = losses
        .iter()
        .map(|&(name, v)| (name, g.value(v).item()))
        .collect();
    let total_value = g.value(total).item();
    let maps = outputs
        .iter()
        .map(|o| {
            o.universal
                .attention
                .iter()
                .chain(&o.task.attention)
                .map(|&a| g.value(a).clone())
                .collect()
        })
        .collect();
    let param_grads = g.param_grads(&grads);
    drop(g);
    model.params.zero_grad();
    model.params.accumulate_grads(&param_grads)?;
    Ok((values, total_value, maps))
}

/// One multi-task optimizer step: summed losses, global-norm clipping and
/// AdamW with the scheduled learning rate.
pub fn multitask_step<E: Element>(
    model: &mut Model<E>,
    state: &mut OptimizerState<E>,
    cfg: &OptimizerConfig,
    bundle: &TaskBundle,
) -> Result<StepReport> {
    multitask_step_recording(model, state, cfg, bundle).map(|r| r.0)
}

/// [`multitask_step`] with the total loss a weighted sum; reported
/// per-task losses stay unweighted.
pub fn multitask_step_weighted<E: Element>(
    model: &mut Model<E>,
    state: &mut OptimizerState<E>,
    cfg: &OptimizerConfig,
    bundle: &TaskBundle,
    weights: &TaskWeights,
) -> Result<StepReport> {
    for (name, &w) in weights {
        if !TASK_NAMES.contains(&name.as_str()) {
            return Err(Error::Config(alloc::format!("unknown task `{name}` in loss weights")));
        }
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(alloc::format!("weight of `{name}` must be finite and non-negative")));
        }
    }
    step_with(model, state, cfg, bundle, weights).map(|r| r.0)
}

/// [`multitask_step`] that also returns, per masked-LM example, the
/// attention maps of the forward pass that produced the gradients.
pub fn multitask_step_recording<E: Element>(
    model: &mut Model<E>,
    state: &mut OptimizerState<E>,
    cfg: &OptimizerConfig,
    bundle: &TaskBundle,
) -> Result<(StepReport, Vec<AttentionMaps<E>>)> {
    step_with(model, state, cfg, bundle, &TaskWeights::new())
}

fn step_with<E: Element>(
    model: &mut Model<E>,
    state: &mut OptimizerState<E>,
    cfg: &OptimizerConfig,
    bundle: &TaskBundle,
    weights: &TaskWeights,
) -> Result<(StepReport, Vec<AttentionMaps<E>>)> {
    let (losses, total, maps) = accumulate_recording(model, bundle, weights)?;
    let grad_norm = clip_grad_norm(&mut model.params, cfg.clip_norm);
    let lr = adamw_step(&mut model.params, state, cfg)?;
    model.params.zero_grad();
    let report = StepReport {
        losses,
        total,
        grad_norm,
        lr,
        step: state.step,
    };
    Ok((report, maps))
}
