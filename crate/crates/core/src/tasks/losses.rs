use alloc::format;
use alloc::vec::Vec;

use super::{
    AdversarialExample, ControllableExample, DistanceExample, MaskedLmExample, ReorderExample,
    UktpExample,
};
use crate::error::{Error, Result};
use crate::model::{
    head_logits, nlg_forward, nlu_forward, Graph, Head, Model, ModelConfig, ModelMemory,
    NluOutput, SoftPrompt,
};
use crate::tensor::{Element, Tape, Var};
use crate::tokenizer::{TokenId, CLS};

pub fn with_cls(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(tokens.len() + 1);
    t.push(CLS);
    t.extend_from_slice(tokens);
    t
}

fn mean_of<E: Element>(g: &mut Graph<'_, '_, E>, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses.split_first().ok_or(Error::Empty("batch"))?;
    let t = g.tape();
    let mut acc = first;
    for &l in rest {
        acc = t.add(acc, l)?;
    }
    if losses.len() == 1 {
        Ok(acc)
    } else {
        t.scale(acc, 1.0 / losses.len() as f64)
    }
}

fn sum_of<E: Element>(g: &mut Graph<'_, '_, E>, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses.split_first().ok_or(Error::Empty("losses"))?;
    let t = g.tape();
    let mut acc = first;
    for &l in rest {
        acc = t.add(acc, l)?;
    }
    Ok(acc)
}

/// Cross-entropy of the LM head at masked positions of one `[CLS]`-prefixed
/// NLU pass. `positions` index the unprefixed sequence.
pub fn masked_positions_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    tokens: &[TokenId],
    positions: &[usize],
    targets: &[TokenId],
) -> Result<(Var, NluOutput)> {
    if positions.is_empty() || positions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} masked positions with {} targets",
            positions.len(),
            targets.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(Error::invalid(format!("masked position {p} beyond {} tokens", tokens.len())));
    }
    let out = nlu_forward(g, config, &with_cls(tokens))?;
    let rows: Vec<usize> = positions.iter().map(|p| p + 1).collect();
    let picked = g.tape().gather_rows(out.top(), &rows)?;
    let logits = head_logits(g, Head::Lm, picked)?;
    let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = g.tape().cross_entropy(logits, &labels)?;
    Ok((loss, out))
}

pub fn masked_lm_example_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    ex: &MaskedLmExample,
) -> Result<(Var, NluOutput)> {
    masked_positions_loss(g, config, &ex.tokens, &ex.masked_positions, &ex.targets)
}

/// Mean over the batch of per-example masked-LM cross-entropy.
pub fn masked_lm_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[MaskedLmExample],
) -> Result<Var> {
    masked_lm_loss_with_outputs(g, config, batch).map(|r| r.0)
}

/// [`masked_lm_loss`] that also returns each example's forward pass.
pub fn masked_lm_loss_with_outputs<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[MaskedLmExample],
) -> Result<(Var, Vec<NluOutput>)> {
    let mut losses = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for ex in batch {
        let (l, out) = masked_lm_example_loss(g, config, ex)?;
        losses.push(l);
        outputs.push(out);
    }
    Ok((mean_of(g, &losses)?, outputs))
}

pub fn uktp_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[UktpExample],
) -> Result<Var> {
    let losses = batch
        .iter()
        .map(|ex| {
            masked_positions_loss(g, config, &ex.tokens, &ex.masked_positions, &ex.targets).map(|r| r.0)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &losses)
}

/// Logits of `head` on the NLU `[CLS]` state of each sequence, `[batch, classes]`.
pub fn cls_logits<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    sequences: &[Vec<TokenId>],
    head: Head,
) -> Result<Var> {
    if sequences.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut rows = Vec::with_capacity(sequences.len());
    for s in sequences {
        let out = nlu_forward(g, config, &with_cls(s))?;
        rows.push(g.tape().gather_rows(out.top(), &[0])?);
    }
    let cls = g.tape().concat_rows(&rows)?;
    head_logits(g, head, cls)
}

fn cls_classification<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    sequences: &[Vec<TokenId>],
    labels: &[usize],
    head: Head,
) -> Result<Var> {
    let logits = cls_logits(g, config, sequences, head)?;
    g.tape().cross_entropy(logits, labels)
}

pub fn reorder_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[ReorderExample],
) -> Result<Var> {
    if let Some(ex) = batch.iter().find(|ex| ex.m > config.reorder_segments) {
        return Err(Error::invalid(format!(
            "reorder example with m={} exceeds the head's m={}",
            ex.m, config.reorder_segments
        )));
    }
    let seqs: Vec<Vec<TokenId>> = batch.iter().map(|ex| ex.permuted_tokens.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|ex| ex.label).collect();
    cls_classification(g, config, &seqs, &labels, Head::Reorder)
}

/// `[CLS] a [SEP] b`, without the leading `[CLS]`.
pub fn sentence_pair(a: &[TokenId], b: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(a.len() + b.len() + 1);
    t.extend_from_slice(a);
    t.push(crate::tokenizer::SEP);
    t.extend_from_slice(b);
    t
}

pub fn distance_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[DistanceExample],
) -> Result<Var> {
    let seqs: Vec<Vec<TokenId>> = batch
        .iter()
        .map(|ex| sentence_pair(&ex.tokens_a, &ex.tokens_b))
        .collect();
    let labels: Vec<usize> = batch.iter().map(DistanceExample::label).collect();
    cls_classification(g, config, &seqs, &labels, Head::Distance)
}

/// Binary original-vs-generated cross-entropy on the NLU `[CLS]` state.
pub fn adversarial_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[AdversarialExample],
) -> Result<Var> {
    let seqs: Vec<Vec<TokenId>> = batch.iter().map(|ex| ex.tokens.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|ex| ex.label as usize).collect();
    cls_classification(g, config, &seqs, &labels, Head::Adversarial)
}

/// Mean next-token NLL of one causal pass over `prefix ++ inputs`, scoring
/// rows `first_row..` against `targets`.
fn causal_pass<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    inputs: &[TokenId],
    soft: Option<SoftPrompt>,
    first_row: usize,
    targets: &[TokenId],
    memory: Option<&mut ModelMemory<E>>,
) -> Result<Var> {
    let out = nlg_forward(g, config, inputs, soft, memory)?;
    let rows: Vec<usize> = (first_row..first_row + targets.len()).collect();
    let picked = g.tape().gather_rows(out.top(), &rows)?;
    let logits = head_logits(g, Head::Lm, picked)?;
    let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.tape().cross_entropy(logits, &labels)
}

/// Sum over consecutive segments of the per-segment mean next-token NLL.
/// Segment `k` reads tokens `kL..kL+L` and predicts each following token;
/// memory, when given, is threaded through the segments.
pub fn document_lm_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    tokens: &[TokenId],
    segment_len: usize,
    mut memory: Option<&mut ModelMemory<E>>,
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::invalid("language modelling needs at least 2 tokens"));
    }
    if segment_len == 0 {
        return Err(Error::invalid("segment_len must be positive"));
    }
    let mut losses = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + segment_len).min(tokens.len() - 1);
        let loss = causal_pass(
            g,
            config,
            &tokens[start..end],
            None,
            0,
            &tokens[start + 1..end + 1],
            memory.as_deref_mut(),
        )?;
        losses.push(loss);
        start = end;
    }
    sum_of(g, &losses)
}

/// Controllable language-modelling loss of one example. Without prompts this
/// is exactly [`document_lm_loss`] on the body with a full-length segment.
/// With prompts, every body token is predicted from the prompt and the
/// preceding body; prompt positions are never scored.
pub fn controllable_example_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    ex: &ControllableExample,
    memory: Option<&mut ModelMemory<E>>,
) -> Result<Var> {
    if ex.body.is_empty() {
        return Err(Error::Empty("controllable body"));
    }
    let soft_len = ex.prompt.soft.map_or(0, |s| s.count);
    let prompt_len = soft_len + ex.prompt.tokens.len();
    if !ex.use_prompts || prompt_len == 0 {
        return document_lm_loss(g, config, &ex.body, config.max_seq_len, memory);
    }
    let mut inputs = ex.prompt.tokens.clone();
    inputs.extend_from_slice(&ex.body[..ex.body.len() - 1]);
    let soft = ex.prompt.soft.filter(|s| s.count > 0);
    if inputs.is_empty() {
        // Soft prompts alone predict a single-token body.
        let out = nlg_forward(g, config, &[ex.body[0]], soft, memory)?;
        let row = g.tape().gather_rows(out.top(), &[soft_len - 1])?;
        let logits = head_logits(g, Head::Lm, row)?;
        return g.tape().cross_entropy(logits, &[ex.body[0] as usize]);
    }
    causal_pass(g, config, &inputs, soft, prompt_len - 1, &ex.body, memory)
}

pub fn controllable_lm_loss<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    batch: &[ControllableExample],
) -> Result<Var> {
    let losses = batch
        .iter()
        .map(|ex| controllable_example_loss(g, config, ex, None))
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &losses)
}

/// `exp` of the token-weighted mean masked-LM cross-entropy.
pub fn masked_lm_perplexity<E: Element>(model: &Model<E>, examples: &[MaskedLmExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("held-out examples"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &model.params);
        let (loss, _) = masked_lm_example_loss(&mut g, &model.config, ex)?;
        nll += g.value(loss).item() * ex.targets.len() as f64;
        count += ex.targets.len();
    }
    Ok(libm::exp(nll / count as f64))
}

/// Adversarial-head probability that each sequence is original text.
pub fn original_probabilities<E: Element>(model: &Model<E>, sequences: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sequences.len());
    for s in sequences {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &model.params);
        let logits = cls_logits(&mut g, &model.config, core::slice::from_ref(s), Head::Adversarial)?;
        let row: Vec<f64> = g.value(logits).data().iter().map(|v| v.to_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
        out.push(libm::exp(row[super::AdversarialLabel::Original as usize] - max) / z);
    }
    Ok(out)
}
