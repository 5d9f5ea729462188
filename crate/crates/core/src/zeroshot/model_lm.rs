use alloc::vec::Vec;

use super::{CausalLm, MaskedLm, SentenceDistance};
use crate::error::{Error, Result};
use crate::model::{head_logits, nlg_forward, nlu_forward, Graph, Head, Model, SoftPrompt};
use crate::tasks::{cls_logits, with_cls};
use crate::tensor::{log_softmax, softmax_values, Element, Tape};
use crate::tokenizer::TokenId;

/// Scoring adapter over a trained model. The causal side reads the NLG
/// module; the masked and sentence-pair sides read the NLU module.
#[derive(Clone, Copy, Debug)]
pub struct ModelLm<'a, E: Element = f32> {
    pub model: &'a Model<E>,
}

impl<'a, E: Element> ModelLm<'a, E> {
    pub fn new(model: &'a Model<E>) -> Self {
        Self { model }
    }

    /// Log-softmax of the LM head at `rows` of one causal pass.
    fn causal_rows(&self, soft: Option<SoftPrompt>, tokens: &[TokenId], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &self.model.params);
        let out = nlg_forward(&mut g, &self.model.config, tokens, soft, None)?;
        let picked = g.tape().gather_rows(out.top(), rows)?;
        let logits = head_logits(&mut g, Head::Lm, picked)?;
        let v = self.model.config.vocab_size;
        let flat = g.value(logits).to_f64_vec();
        Ok(flat.chunks(v).map(log_softmax).collect())
    }

    fn window(&self, soft: Option<SoftPrompt>) -> usize {
        self.model.config.max_seq_len - soft.map_or(0, |s| s.count)
    }
}

impl<E: Element> CausalLm for ModelLm<'_, E> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    /// Contexts longer than the model window keep their most recent tokens.
    fn next_logprobs(&self, soft: Option<SoftPrompt>, context: &[TokenId]) -> Result<Vec<f64>> {
        let soft = soft.filter(|s| s.count > 0);
        let soft_len = soft.map_or(0, |s| s.count);
        if context.is_empty() {
            let Some(s) = soft else {
                return Err(Error::invalid("next-token prediction needs context"));
            };
            // Soft prompts alone: any token fills the input, only soft rows are read.
            let mut rows = self.causal_rows(Some(s), &[0], &[s.count - 1])?;
            return Ok(rows.remove(0));
        }
        let w = self.window(soft);
        let ctx = &context[context.len().saturating_sub(w)..];
        let mut rows = self.causal_rows(soft, ctx, &[soft_len + ctx.len() - 1])?;
        Ok(rows.remove(0))
    }

    fn token_logprobs(&self, soft: Option<SoftPrompt>, tokens: &[TokenId], positions: &[usize]) -> Result<Vec<f64>> {
        let soft = soft.filter(|s| s.count > 0);
        let soft_len = soft.map_or(0, |s| s.count);
        let Some(&last) = positions.iter().max() else {
            return Ok(Vec::new());
        };
        if last >= tokens.len() {
            return Err(Error::invalid("scored position beyond the sequence"));
        }
        if positions.contains(&0) && soft.is_none() {
            return Err(Error::invalid("the first token has no left context"));
        }
        // Inputs up to the last scored token; row `soft_len + p - 1` predicts `p`.
        let inputs = &tokens[..last.max(1)];
        if inputs.len() + soft_len > self.model.config.max_seq_len {
            return positions
                .iter()
                .map(|&p| Ok(self.next_logprobs(soft, &tokens[..p])?[tokens[p] as usize]))
                .collect();
        }
        let rows: Vec<usize> = positions.iter().map(|&p| soft_len + p - 1).collect();
        let lps = self.causal_rows(soft, inputs, &rows)?;
        Ok(positions
            .iter()
            .zip(lps)
            .map(|(&p, lp)| lp[tokens[p] as usize])
            .collect())
    }
}

impl<E: Element> MaskedLm for ModelLm<'_, E> {
    fn masked_logprobs(&self, tokens: &[TokenId], position: usize) -> Result<Vec<f64>> {
        if position >= tokens.len() {
            return Err(Error::invalid("masked position beyond the sequence"));
        }
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &self.model.params);
        let out = nlu_forward(&mut g, &self.model.config, &with_cls(tokens))?;
        let row = g.tape().gather_rows(out.top(), &[position + 1])?;
        let logits = head_logits(&mut g, Head::Lm, row)?;
        Ok(log_softmax(&g.value(logits).to_f64_vec()))
    }
}

impl<E: Element> SentenceDistance for ModelLm<'_, E> {
    fn adjacent_prob(&self, tokens: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &self.model.params);
        let logits = cls_logits(&mut g, &self.model.config, &[tokens.to_vec()], Head::Distance)?;
        Ok(softmax_values(&g.value(logits).to_f64_vec())[0])
    }
}
