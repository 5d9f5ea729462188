//! Online distillation from a teacher through a teacher assistant into
//! students, with an auxiliary layer stacked on each student.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{init_tensor, param_shapes, Graph, Model, ModelConfig, NluOutput, AUX_PREFIX};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tasks::{
    adamw_step, clip_grad_norm, masked_lm_loss_with_outputs, multitask_step,
    multitask_step_recording, AttentionMaps, MaskedLmExample, OptimizerConfig, OptimizerState,
    StepReport, TaskBundle,
};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Mean over heads and query rows of `KL(source row || target row)`.
/// `source` enters as a constant, so only `target` receives gradient.
pub fn attention_kl<E: Element>(tape: &mut Tape<E>, source: &Tensor<E>, target: Var) -> Result<Var> {
    let ts = tape.shape(target).to_vec();
    if source.rank() != 3 || ts.len() != 3 {
        return Err(Error::shape("attention_kl", "attention maps must be [heads, queries, keys]"));
    }
    if source.shape()[0] != ts[0] {
        return Err(Error::shape(
            "attention_kl",
            format!("head count {} vs {}", source.shape()[0], ts[0]),
        ));
    }
    if source.shape() != &ts[..] {
        return Err(Error::shape("attention_kl", format!("{:?} vs {:?}", source.shape(), ts)));
    }
    let rows = ts[0] * ts[1];
    let p = tape.constant(source.clone().reshape([rows, ts[2]])?);
    let q = tape.reshape(target, &[rows, ts[2]])?;
    tape.kl_divergence(p, q)
}

/// Value of [`attention_kl`] without recording anything.
pub fn attention_kl_value<E: Element>(source: &Tensor<E>, target: &Tensor<E>) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let kl = attention_kl(&mut tape, source, t)?;
    Ok(tape.value(kl).item())
}

/// Matches the attention of layer `source` in the up-hierarchy model with
/// layer `target` below. Layers are counted along the NLU path, universal
/// layers first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPair {
    pub source: usize,
    pub target: usize,
}

/// Layers on the NLU path that produce attention maps, excluding auxiliary
/// layers.
pub fn matchable_layers(c: &ModelConfig) -> usize {
    c.universal_layers + c.task_layers
}

fn layer_heads(c: &ModelConfig, layer: usize) -> usize {
    if layer < c.universal_layers {
        c.universal_heads
    } else {
        c.task_heads
    }
}

/// Teacher, teacher assistant and students, joined by the fixed edges
/// teacher to TA and TA to each student.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTopology {
    pub teacher: ModelConfig,
    pub ta: ModelConfig,
    pub students: Vec<ModelConfig>,
    pub ta_pairs: Vec<LayerPair>,
    pub student_pairs: Vec<Vec<LayerPair>>,
    /// Whether the TA also carries an auxiliary layer.
    pub ta_auxiliary: bool,
}

fn last_pair(source: &ModelConfig, target: &ModelConfig) -> LayerPair {
    LayerPair {
        source: matchable_layers(source) - 1,
        target: matchable_layers(target) - 1,
    }
}

impl DistillTopology {
    /// Matches the last layer of each source with the topmost non-auxiliary
    /// layer of its target.
    pub fn new(teacher: ModelConfig, ta: ModelConfig, students: Vec<ModelConfig>) -> Result<Self> {
        let ta_pairs = alloc::vec![last_pair(&teacher, &ta)];
        let student_pairs = students.iter().map(|s| alloc::vec![last_pair(&ta, s)]).collect();
        let t = Self {
            teacher,
            ta,
            students,
            ta_pairs,
            student_pairs,
            ta_auxiliary: false,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.ta.validate()?;
        if self.students.is_empty() {
            return Err(Error::Config("distillation needs at least one student".into()));
        }
        if self.student_pairs.len() != self.students.len() {
            return Err(Error::Config("one layer-pair list per student".into()));
        }
        let check = |edge: &str, src: &ModelConfig, dst: &ModelConfig, pairs: &[LayerPair]| -> Result<()> {
            dst.validate()?;
            if src.vocab_size != dst.vocab_size {
                return Err(Error::Config(format!("{edge}: vocabulary sizes differ")));
            }
            if pairs.is_empty() {
                return Err(Error::Config(format!("{edge}: no layer pairs")));
            }
            for p in pairs {
                if p.source >= matchable_layers(src) || p.target >= matchable_layers(dst) {
                    return Err(Error::Config(format!("{edge}: layer pair {p:?} out of range")));
                }
                let (hs, hd) = (layer_heads(src, p.source), layer_heads(dst, p.target));
                if hs != hd {
                    return Err(Error::Config(format!(
                        "{edge}: head counts differ ({hs} vs {hd}) for {p:?}"
                    )));
                }
            }
            Ok(())
        };
        check("teacher->ta", &self.teacher, &self.ta, &self.ta_pairs)?;
        for (i, (s, pairs)) in self.students.iter().zip(&self.student_pairs).enumerate() {
            check(&format!("ta->student{i}"), &self.ta, s, pairs)?;
        }
        Ok(())
    }
}

/// A model with its optimizer; `optimizer.step` is the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState<E: Element = f32> {
    pub model: Model<E>,
    pub optimizer: OptimizerState<E>,
}

impl<E: Element> StudentState<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(config, seed)?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self { model, optimizer })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn has_auxiliary(&self) -> bool {
        self.model.config.auxiliary_layers > 0
    }
}

/// Appends one auxiliary layer above the NLU module.
pub fn attach_ald_layer<E: Element>(student: &mut StudentState<E>, seed: u64) -> Result<()> {
    if student.has_auxiliary() {
        return Err(Error::invalid("student already has an auxiliary layer"));
    }
    let mut config = student.model.config.clone();
    config.auxiliary_layers = 1;
    let mut rng = rng_from_seed(seed);
    for (name, shape) in param_shapes(&config) {
        if name.starts_with(AUX_PREFIX) {
            let t = init_tensor(&name, &shape, &mut rng);
            student.model.params.insert(name, t);
        }
    }
    student.model.config = config;
    student.optimizer.sync(&student.model.params);
    Ok(())
}

/// Removes every auxiliary parameter; the remaining stack is untouched.
pub fn discard_ald_layer<E: Element>(student: &mut StudentState<E>) {
    let names: Vec<_> = student
        .model
        .params
        .names()
        .filter(|n| n.starts_with(AUX_PREFIX))
        .cloned()
        .collect();
    for n in names {
        student.model.params.remove(&n);
    }
    student.model.config.auxiliary_layers = 0;
    student.optimizer.sync(&student.model.params);
}

/// Loss weights of one distillation edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillWeights {
    pub kl: f64,
    pub lm: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self { kl: 1.0, lm: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OfdConfig {
    pub optimizer: OptimizerConfig,
    pub ta: DistillWeights,
    pub student: DistillWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberReport {
    pub kl: f64,
    pub lm: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfdReport {
    pub teacher: StepReport,
    pub ta: MemberReport,
    pub students: Vec<MemberReport>,
}

/// Teacher, TA and students trained in lockstep.
#[derive(Clone, Debug, PartialEq)]
pub struct OfdState<E: Element = f32> {
    pub topology: DistillTopology,
    pub teacher: StudentState<E>,
    pub ta: StudentState<E>,
    pub students: Vec<StudentState<E>>,
    /// TA steps taken before the joint phase.
    pub ta_offset: u64,
}

impl<E: Element> OfdState<E> {
    /// Seeds every model from `seed`; the teacher is initialised from `seed`
    /// itself so a teacher-only run with the same seed starts identically.
    pub fn new(topology: DistillTopology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let teacher = StudentState::new(topology.teacher.clone(), seed)?;
        let mut ta = StudentState::new(topology.ta.clone(), derive_seed(seed, 1, 0))?;
        if topology.ta_auxiliary {
            attach_ald_layer(&mut ta, derive_seed(seed, 1, 1))?;
        }
        let mut students = Vec::with_capacity(topology.students.len());
        for (i, c) in topology.students.iter().enumerate() {
            let mut s = StudentState::new(c.clone(), derive_seed(seed, 2, i as u64))?;
            attach_ald_layer(&mut s, derive_seed(seed, 3, i as u64))?;
            students.push(s);
        }
        Ok(Self {
            topology,
            teacher,
            ta,
            students,
            ta_offset: 0,
        })
    }

    /// Joint steps taken so far.
    pub fn step(&self) -> u64 {
        self.teacher.step()
    }

    fn check_lockstep(&self) -> Result<()> {
        let k = self.teacher.step();
        if self.ta.step() != k + self.ta_offset {
            return Err(Error::invalid(format!(
                "TA at step {} but teacher at {k} with warm start {}",
                self.ta.step(),
                self.ta_offset
            )));
        }
        if let Some((i, s)) = self.students.iter().enumerate().find(|(_, s)| s.step() != k) {
            return Err(Error::invalid(format!(
                "student {i} at step {} but teacher at {k}",
                s.step()
            )));
        }
        Ok(())
    }

    /// Masked-LM warm start of the TA before the joint phase.
    pub fn warm_start_ta<F>(&mut self, cfg: &OptimizerConfig, steps: u64, batches: F) -> Result<Vec<f64>>
    where
        F: FnMut(u64) -> Result<Vec<MaskedLmExample>>,
    {
        if self.step() > 0 {
            return Err(Error::invalid("TA warm start must precede the joint phase"));
        }
        let losses = pretrain_ta(&mut self.ta, cfg, steps, batches)?;
        self.ta_offset += steps;
        Ok(losses)
    }
}

/// Trains `ta` on masked-LM alone for `steps` steps; returns the losses.
pub fn pretrain_ta<E, F>(
    ta: &mut StudentState<E>,
    cfg: &OptimizerConfig,
    steps: u64,
    mut batches: F,
) -> Result<Vec<f64>>
where
    E: Element,
    F: FnMut(u64) -> Result<Vec<MaskedLmExample>>,
{
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let bundle = TaskBundle {
            masked_lm: batches(step)?,
            ..TaskBundle::default()
        };
        let r = multitask_step(&mut ta.model, &mut ta.optimizer, cfg, &bundle)?;
        losses.push(r.total);
    }
    Ok(losses)
}

fn nlu_attention(out: &NluOutput) -> Vec<Var> {
    out.universal
        .attention
        .iter()
        .chain(&out.task.attention)
        .copied()
        .collect()
}

/// Forward and backward of the distillation loss of `model`: attention KL to
/// `source_maps` plus masked-LM, weighted. Nothing is updated.
pub struct DistillPass<E: Element> {
    pub kl: f64,
    pub lm: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
    /// The model's own maps from the same forward pass.
    pub maps: Vec<AttentionMaps<E>>,
}

pub fn distill_gradients<E: Element>(
    model: &Model<E>,
    batch: &[MaskedLmExample],
    source_maps: &[AttentionMaps<E>],
    pairs: &[LayerPair],
    weights: DistillWeights,
) -> Result<DistillPass<E>> {
    if source_maps.len() != batch.len() {
        return Err(Error::invalid("one set of source maps per example"));
    }
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &model.params);
    let (lm, outputs) = masked_lm_loss_with_outputs(&mut g, &model.config, batch)?;
    let mut kl_terms = Vec::with_capacity(batch.len() * pairs.len());
    for (out, src) in outputs.iter().zip(source_maps) {
        let layers = nlu_attention(out);
        for p in pairs {
            let (Some(s), Some(&t)) = (src.get(p.source), layers.get(p.target)) else {
                return Err(Error::invalid(format!("layer pair {p:?} out of range")));
            };
            kl_terms.push(attention_kl(g.tape(), s, t)?);
        }
    }
    let (&first, rest) = kl_terms.split_first().ok_or(Error::Empty("layer pairs"))?;
    let t = g.tape();
    let mut kl = first;
    for &k in rest {
        kl = t.add(kl, k)?;
    }
    let kl = t.scale(kl, 1.0 / kl_terms.len() as f64)?;
    let total = match (weights.kl != 0.0, weights.lm != 0.0) {
        (true, true) => {
            let a = t.scale(kl, weights.kl)?;
            let b = t.scale(lm, weights.lm)?;
            t.add(a, b)?
        }
        (true, false) => t.scale(kl, weights.kl)?,
        (false, true) => t.scale(lm, weights.lm)?,
        (false, false) => return Err(Error::Config("both distillation weights are zero".into())),
    };
    let grads = g.backward(total)?;
    let maps = outputs
        .iter()
        .map(|o| nlu_attention(o).into_iter().map(|a| g.value(a).clone()).collect())
        .collect();
    Ok(DistillPass {
        kl: g.value(kl).item(),
        lm: g.value(lm).item(),
        total: g.value(total).item(),
        grads: g.param_grads(&grads),
        maps,
    })
}

fn distill_member_step<E: Element>(
    member: &mut StudentState<E>,
    batch: &[MaskedLmExample],
    source_maps: &[AttentionMaps<E>],
    pairs: &[LayerPair],
    weights: DistillWeights,
    cfg: &OptimizerConfig,
) -> Result<(MemberReport, Vec<AttentionMaps<E>>)> {
    let pass = distill_gradients(&member.model, batch, source_maps, pairs, weights)?;
    let params = &mut member.model.params;
    params.zero_grad();
    params.accumulate_grads(&pass.grads)?;
    let grad_norm = clip_grad_norm(params, cfg.clip_norm);
    adamw_step(params, &mut member.optimizer, cfg)?;
    params.zero_grad();
    let report = MemberReport {
        kl: pass.kl,
        lm: pass.lm,
        total: pass.total,
        grad_norm,
    };
    Ok((report, pass.maps))
}

/// One lockstep update: the teacher trains on the bundle and its attention
/// maps are reused, as constants, to train the TA, whose maps in turn train
/// each student.
pub fn ofd_step<E: Element>(state: &mut OfdState<E>, cfg: &OfdConfig, bundle: &TaskBundle) -> Result<OfdReport> {
    state.check_lockstep()?;
    if bundle.masked_lm.is_empty() {
        return Err(Error::Empty("masked-LM batch for distillation"));
    }
    let (teacher, teacher_maps) = multitask_step_recording(
        &mut state.teacher.model,
        &mut state.teacher.optimizer,
        &cfg.optimizer,
        bundle,
    )?;
    let (ta, ta_maps) = distill_member_step(
        &mut state.ta,
        &bundle.masked_lm,
        &teacher_maps,
        &state.topology.ta_pairs,
        cfg.ta,
        &cfg.optimizer,
    )?;
    let mut students = Vec::with_capacity(state.students.len());
    for (s, pairs) in state.students.iter_mut().zip(&state.topology.student_pairs) {
        let (r, _) = distill_member_step(s, &bundle.masked_lm, &ta_maps, pairs, cfg.student, &cfg.optimizer)?;
        students.push(r);
    }
    Ok(OfdReport { teacher, ta, students })
}

/// Attention maps of every matchable layer for each example, from a frozen
/// forward pass.
pub fn attention_maps<E: Element>(model: &Model<E>, batch: &[MaskedLmExample]) -> Result<Vec<AttentionMaps<E>>> {
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, &model.params);
    let (_, outs) = masked_lm_loss_with_outputs(&mut g, &model.config, batch)?;
    Ok(outs
        .iter()
        .map(|o| nlu_attention(o).into_iter().map(|a| g.value(a).clone()).collect())
        .collect())
}

/// Mean attention KL from `source` to `target` under `pairs` on `batch`.
pub fn measure_attention_kl<E: Element>(
    source: &Model<E>,
    target: &Model<E>,
    pairs: &[LayerPair],
    batch: &[MaskedLmExample],
) -> Result<f64> {
    let (src, dst) = (attention_maps(source, batch)?, attention_maps(target, batch)?);
    let mut total = 0.0;
    let mut n = 0;
    for (s, d) in src.iter().zip(&dst) {
        for p in pairs {
            total += attention_kl_value(&s[p.source], &d[p.target])?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;
