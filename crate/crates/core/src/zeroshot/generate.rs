use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::CausalLm;
use crate::error::{Error, Result};
use crate::model::SoftPrompt;
use crate::rng::rng_from_seed;
use rand::Rng;
use crate::tokenizer::TokenId;

fn argmax_token(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate().skip(1) {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn extend(prompt: &[TokenId], gen: &[TokenId]) -> Vec<TokenId> {
    let mut c = Vec::with_capacity(prompt.len() + gen.len());
    c.extend_from_slice(prompt);
    c.extend_from_slice(gen);
    c
}

/// Greedy decoding; ties go to the lowest token id. Stop tokens end the
/// output and are not included.
pub fn top1_generate(
    lm: &dyn CausalLm,
    soft: Option<SoftPrompt>,
    prompt: &[TokenId],
    max_len: usize,
    stop_tokens: &[TokenId],
) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = lm.next_logprobs(soft, &extend(prompt, &out))?;
        let t = argmax_token(&lp) as TokenId;
        if stop_tokens.contains(&t) {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

/// Temperature sampling with a seeded stream; same stopping rules as
/// [`top1_generate`].
pub fn sample_generate(
    lm: &dyn CausalLm,
    soft: Option<SoftPrompt>,
    prompt: &[TokenId],
    max_len: usize,
    stop_tokens: &[TokenId],
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = lm.next_logprobs(soft, &extend(prompt, &out))?;
        let top = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = lp.iter().map(|&v| libm::exp((v - top) / temperature)).collect();
        let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
        let mut t = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                t = i;
                break;
            }
            u -= w;
        }
        let t = t as TokenId;
        if stop_tokens.contains(&t) {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

/// Tokens that extend some occurrence of `prefix` in `context`.
pub(crate) fn continuations(context: &[TokenId], prefix: &[TokenId]) -> BTreeSet<TokenId> {
    let n = prefix.len();
    (0..context.len().saturating_sub(n))
        .filter(|&i| &context[i..i + n] == prefix)
        .map(|i| context[i + n])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanResult {
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability, including the end token when the span
    /// was closed by it.
    pub score: f64,
}

fn better(a: &(Vec<TokenId>, f64), b: &(Vec<TokenId>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Beam search whose every hypothesis is a contiguous span of `context`.
///
/// A hypothesis finishes when the model emits `end_token`, when it reaches
/// `max_len`, or when no occurrence of it in the context can be extended.
/// The highest-scoring finished span wins; ties go to the lexicographically
/// smallest token sequence.
pub fn restrained_generate(
    lm: &dyn CausalLm,
    soft: Option<SoftPrompt>,
    prompt: &[TokenId],
    context: &[TokenId],
    beam_width: usize,
    max_len: usize,
    end_token: Option<TokenId>,
) -> Result<SpanResult> {
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    if beam_width == 0 || max_len == 0 {
        return Err(Error::invalid("beam_width and max_len must be positive"));
    }
    let mut beams: Vec<(Vec<TokenId>, f64)> = alloc::vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for (prefix, score) in &beams {
            let allowed = continuations(context, prefix);
            if allowed.is_empty() && end_token.is_none() {
                finished.push((prefix.clone(), *score));
                continue;
            }
            let lp = lm.next_logprobs(soft, &extend(prompt, prefix))?;
            if let Some(e) = end_token.filter(|_| !prefix.is_empty()) {
                finished.push((prefix.clone(), score + lp[e as usize]));
            }
            for t in allowed {
                let mut next = prefix.clone();
                next.push(t);
                candidates.push((next, score + lp[t as usize]));
            }
        }
        candidates.sort_by(better);
        candidates.truncate(beam_width);
        beams = candidates;
        if beams.is_empty() {
            break;
        }
    }
    finished.extend(beams);
    finished.sort_by(better);
    let (tokens, score) = finished.into_iter().next().ok_or(Error::Empty("span hypotheses"))?;
    Ok(SpanResult { tokens, score })
}

/// `exp` of the mean next-token NLL. Without soft prompts the first token
/// is context only; soft prompt positions are never scored.
pub fn perplexity(lm: &dyn CausalLm, soft: Option<SoftPrompt>, tokens: &[TokenId]) -> Result<f64> {
    let soft = soft.filter(|s| s.count > 0);
    let first = if soft.is_some() { 0 } else { 1 };
    if tokens.len() < 2 {
        return Err(Error::invalid("perplexity needs at least 2 tokens"));
    }
    let positions: Vec<usize> = (first..tokens.len()).collect();
    let lp = lm.token_logprobs(soft, tokens, &positions)?;
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    Ok(libm::exp(nll))
}
