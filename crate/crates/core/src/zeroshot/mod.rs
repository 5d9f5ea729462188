//! Zero-shot scoring, prompting, decoding and blank assignment.

mod generate;
mod hungarian;
mod model_lm;
mod template;


use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::SoftPrompt;
use crate::tokenizer::{TokenId, MASK};

pub use generate::{perplexity, restrained_generate, sample_generate, top1_generate, SpanResult};
pub use hungarian::{assignment_score, hungarian_assign};
pub use model_lm::ModelLm;
pub use template::{LabelVerbalizer, PromptTemplate, Rendered, Segment};

/// Left-to-right language model.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of the token following `context`, which sits after
    /// the optional soft prompts.
    fn next_logprobs(&self, soft: Option<SoftPrompt>, context: &[TokenId]) -> Result<Vec<f64>>;

    /// `log P(tokens[p] | soft, tokens[..p])` for each `p` in `positions`.
    fn token_logprobs(&self, soft: Option<SoftPrompt>, tokens: &[TokenId], positions: &[usize]) -> Result<Vec<f64>> {
        positions
            .iter()
            .map(|&p| {
                let lp = self.next_logprobs(soft, &tokens[..p])?;
                lp.get(tokens[p] as usize)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("token {} outside vocabulary", tokens[p])))
            })
            .collect()
    }
}

/// Bidirectional model predicting `[MASK]` positions.
pub trait MaskedLm {
    /// Log-probabilities at `position`, which holds `[MASK]` in `tokens`.
    fn masked_logprobs(&self, tokens: &[TokenId], position: usize) -> Result<Vec<f64>>;
}

/// Sentence-pair head; `tokens` is `part_a [SEP] part_b` without `[CLS]`.
pub trait SentenceDistance {
    /// Probability of the adjacent-sentence class.
    fn adjacent_prob(&self, tokens: &[TokenId]) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    Unidirectional,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoringMethod {
    Joint,
    YGivenX,
    XGivenY,
    Pmi,
    NspTrue,
}

impl ScoringMethod {
    pub fn validate(self, attention: Attention) -> Result<()> {
        if self == ScoringMethod::NspTrue && attention != Attention::Bidirectional {
            return Err(Error::Config("the NSP scorer needs bidirectional attention".into()));
        }
        Ok(())
    }
}

/// Log-likelihood of chosen positions under either attention variant.
///
/// Unidirectional: each position is scored from the tokens before it.
/// Bidirectional: positions are scored in order; when scoring the k-th,
/// it and every later scored position are `[MASK]`, everything else is
/// visible.
pub enum Likelihood<'a> {
    Uni(&'a dyn CausalLm),
    Bi(&'a dyn MaskedLm),
}

impl Likelihood<'_> {
    pub fn attention(&self) -> Attention {
        match self {
            Likelihood::Uni(_) => Attention::Unidirectional,
            Likelihood::Bi(_) => Attention::Bidirectional,
        }
    }

    pub fn logprobs(&self, r: &Rendered, positions: &[usize]) -> Result<Vec<f64>> {
        match self {
            Likelihood::Uni(lm) => {
                if positions.iter().any(|&p| p == 0) && r.soft.is_none() {
                    return Err(Error::invalid("the first token has no left context"));
                }
                lm.token_logprobs(r.soft, &r.tokens, positions)
            }
            Likelihood::Bi(mlm) => {
                let mut out = Vec::with_capacity(positions.len());
                for (k, &p) in positions.iter().enumerate() {
                    let mut masked = r.tokens.clone();
                    for &q in &positions[k..] {
                        masked[q] = MASK;
                    }
                    let lp = mlm.masked_logprobs(&masked, p)?;
                    out.push(lp[r.tokens[p] as usize]);
                }
                Ok(out)
            }
        }
    }

    /// Positions with a left context: all of them under bidirectional
    /// attention or after soft prompts, otherwise all but the first.
    fn first_scorable(&self, r: &Rendered) -> usize {
        match self {
            Likelihood::Uni(_) if r.soft.is_none() => 1,
            _ => 0,
        }
    }
}

/// Predicted class and the per-label score, in verbalizer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub scores: Vec<f64>,
}

/// Highest score wins; ties go to the lowest class id.
pub fn argmax_class(verbalizer: &LabelVerbalizer, scores: Vec<f64>) -> Prediction {
    let mut best = 0;
    for i in 1..scores.len() {
        let (id, best_id) = (verbalizer.entries()[i].0, verbalizer.entries()[best].0);
        if scores[i] > scores[best] || (scores[i] == scores[best] && id < best_id) {
            best = i;
        }
    }
    Prediction {
        class: verbalizer.entries()[best].0,
        scores,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

type Fields = alloc::collections::BTreeMap<alloc::string::String, Vec<TokenId>>;

/// `argmax_i` of the mean log-likelihood of the whole filled prompt.
pub fn score_joint(
    lm: &Likelihood<'_>,
    template: &PromptTemplate,
    fields: &Fields,
    verbalizer: &LabelVerbalizer,
) -> Result<Prediction> {
    let mut scores = Vec::new();
    for (_, label) in verbalizer.entries() {
        let r = template.render(fields, label)?;
        let positions: Vec<usize> = (lm.first_scorable(&r)..r.tokens.len()).collect();
        if positions.is_empty() {
            return Err(Error::invalid("filled prompt has no scorable tokens"));
        }
        scores.push(mean(&lm.logprobs(&r, &positions)?));
    }
    Ok(argmax_class(verbalizer, scores))
}

fn label_score(lm: &Likelihood<'_>, r: &Rendered) -> Result<f64> {
    let positions: Vec<usize> = r.label.clone().collect();
    Ok(mean(&lm.logprobs(r, &positions)?))
}

/// `argmax_i` of the length-normalised log-likelihood of the label tokens.
pub fn score_y_given_x(
    lm: &Likelihood<'_>,
    template: &PromptTemplate,
    fields: &Fields,
    verbalizer: &LabelVerbalizer,
) -> Result<Prediction> {
    let mut scores = Vec::new();
    for (_, label) in verbalizer.entries() {
        scores.push(label_score(lm, &template.render(fields, label)?)?);
    }
    Ok(argmax_class(verbalizer, scores))
}

/// `argmax_i` of the total log-likelihood of every non-label token.
pub fn score_x_given_y(
    lm: &Likelihood<'_>,
    template: &PromptTemplate,
    fields: &Fields,
    verbalizer: &LabelVerbalizer,
) -> Result<Prediction> {
    let mut scores = Vec::new();
    for (_, label) in verbalizer.entries() {
        let r = template.render(fields, label)?;
        let positions: Vec<usize> = (lm.first_scorable(&r)..r.tokens.len())
            .filter(|p| !r.label.contains(p))
            .collect();
        scores.push(lm.logprobs(&r, &positions)?.iter().sum());
    }
    Ok(argmax_class(verbalizer, scores))
}

/// Label likelihood given the input minus label likelihood given the
/// template's empty-input variant.
pub fn score_pmi(
    lm: &Likelihood<'_>,
    template: &PromptTemplate,
    fields: &Fields,
    verbalizer: &LabelVerbalizer,
) -> Result<Prediction> {
    let mut scores = Vec::new();
    for (_, label) in verbalizer.entries() {
        let cond = label_score(lm, &template.render(fields, label)?)?;
        let prior = label_score(lm, &template.render_empty(label)?)?;
        scores.push(cond - prior);
    }
    Ok(argmax_class(verbalizer, scores))
}

/// `argmax_i` of the sentence-pair head's adjacent-class probability.
pub fn score_nsp_true(
    head: &dyn SentenceDistance,
    template: &PromptTemplate,
    fields: &Fields,
    verbalizer: &LabelVerbalizer,
) -> Result<Prediction> {
    let mut scores = Vec::new();
    for (_, label) in verbalizer.entries() {
        let r = template.render(fields, label)?;
        scores.push(head.adjacent_prob(&r.tokens)?);
    }
    Ok(argmax_class(verbalizer, scores))
}
