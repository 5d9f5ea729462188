//! The `generate` command: attribute-conditioned decoding and credibility
//! re-ranking.

use anyhow::{ensure, Result};
use serde::Serialize;
use titan_core::model::{Model, SoftPrompt, MAX_GENRE_PROMPTS};
use titan_core::rng::derive_seed;
use titan_core::tasks::{format_controllable_input, original_probabilities, AttributeSet};
use titan_core::tokenizer::{TokenId, Tokenizer, SEP};
use titan_core::zeroshot::{sample_generate, top1_generate, ModelLm};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerateRequest {
    pub attributes: AttributeSet,
    pub prompt: String,
    pub max_len: Option<usize>,
    /// Soft prompt count for a genre; defaults to the model's maximum.
    pub soft_prompts: Option<usize>,
    /// Sample this many candidates and keep the most credible one.
    pub rank_credibility: Option<usize>,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Adversarial-head probability of being original text.
    pub original_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateOutput {
    pub prompt: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

/// The decoder input: attribute prompt tokens, then the prompt text.
pub fn decoder_input(
    model: &Model<f32>,
    tk: &Tokenizer,
    req: &GenerateRequest,
) -> Result<(Option<SoftPrompt>, Vec<TokenId>, String)> {
    let c = &model.config;
    if let Some(g) = req.attributes.genre {
        ensure!(g < c.num_genres, "unknown genre {g}; the model has {} genres", c.num_genres);
    }
    let n_soft = req
        .soft_prompts
        .unwrap_or(c.num_genre_prompts.min(MAX_GENRE_PROMPTS - 1));
    ensure!(n_soft <= c.num_genre_prompts, "--soft-prompts exceeds the model's {}", c.num_genre_prompts);
    let cp = format_controllable_input(&req.attributes, tk, n_soft, 0.0, 0)?;
    let mut tokens = cp.tokens;
    tokens.extend(tk.encode(&req.prompt));
    ensure!(
        !tokens.is_empty() || cp.soft.is_some(),
        "nothing to condition on: give a prompt or attributes"
    );
    Ok((cp.soft, tokens, cp.text))
}

pub fn generate(model: &Model<f32>, tk: &Tokenizer, req: &GenerateRequest) -> Result<GenerateOutput> {
    let (soft, input, rendered) = decoder_input(model, tk, req)?;
    let used = input.len() + soft.map_or(0, |s| s.count);
    let max_len = req
        .max_len
        .unwrap_or_else(|| model.config.max_seq_len.saturating_sub(used).max(1));
    let lm = ModelLm::new(model);
    let prompt_tokens = tk.encode(&req.prompt);
    let (tokens, candidates) = match req.rank_credibility {
        None => (top1_generate(&lm, soft, &input, max_len, &[SEP])?, Vec::new()),
        Some(n) => {
            ensure!(n >= 1, "--rank-credibility needs at least one candidate");
            let mut cands = Vec::with_capacity(n);
            for i in 0..n {
                let t = sample_generate(&lm, soft, &input, max_len, &[SEP], req.temperature, derive_seed(req.seed, i as u64, 0))?;
                let mut scored = prompt_tokens.clone();
                scored.extend(&t);
                scored.truncate(model.config.max_seq_len - 1);
                if scored.is_empty() {
                    scored.push(SEP);
                }
                let p = original_probabilities(model, &[scored])?[0];
                cands.push(Candidate {
                    text: tk.decode(&t),
                    tokens: t,
                    original_prob: p,
                });
            }
            let mut best = 0;
            for (i, c) in cands.iter().enumerate() {
                if c.original_prob > cands[best].original_prob {
                    best = i;
                }
            }
            (cands[best].tokens.clone(), cands)
        }
    };
    Ok(GenerateOutput {
        prompt: rendered,
        text: tk.decode(&tokens),
        tokens,
        candidates,
    })
}
