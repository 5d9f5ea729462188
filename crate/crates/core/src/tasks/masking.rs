use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tokenizer::{TokenId, Tokenizer, MASK};

/// Phrase and entity spans, stored as token sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    spans: BTreeSet<Vec<TokenId>>,
    longest: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, span: Vec<TokenId>) {
        if !span.is_empty() {
            self.longest = self.longest.max(span.len());
            self.spans.insert(span);
        }
    }

    /// Encodes each surface form both as written and with a leading space,
    /// so mid-sentence occurrences match too.
    pub fn from_surface_forms<'a>(forms: impl IntoIterator<Item = &'a str>, tokenizer: &Tokenizer) -> Self {
        let mut lex = Self::new();
        for form in forms {
            let form = form.trim();
            if form.is_empty() {
                continue;
            }
            lex.insert(tokenizer.encode(form));
            lex.insert(tokenizer.encode(&format!(" {form}")));
        }
        lex
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Leftmost-longest non-overlapping matches as `(start, len)`.
    pub fn matches(&self, tokens: &[TokenId]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            match (1..=max).rev().find(|&n| self.spans.contains(&tokens[i..i + n])) {
                Some(n) => {
                    out.push((i, n));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Masked-LM instance. `tokens` holds the corrupted input; `targets[i]` is
/// the original token at `masked_positions[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedLmExample {
    pub tokens: Vec<TokenId>,
    pub masked_positions: Vec<usize>,
    pub targets: Vec<TokenId>,
}

impl MaskedLmExample {
    /// The uncorrupted sequence.
    pub fn restored(&self) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        for (&p, &y) in self.masked_positions.iter().zip(&self.targets) {
            t[p] = y;
        }
        t
    }
}

/// Number of positions to mask: `round(rate * len)`, at least one.
pub fn mask_budget(len: usize, rate: f64) -> usize {
    (libm::round(rate * len as f64) as usize).clamp(1, len)
}

pub(crate) fn apply_mask(tokens: &[TokenId], positions: BTreeSet<usize>) -> MaskedLmExample {
    let mut corrupted = tokens.to_vec();
    let masked_positions: Vec<usize> = positions.into_iter().collect();
    let targets = masked_positions.iter().map(|&p| tokens[p]).collect();
    for &p in &masked_positions {
        corrupted[p] = MASK;
    }
    MaskedLmExample {
        tokens: corrupted,
        masked_positions,
        targets,
    }
}

/// Chooses `budget` positions from `candidates` uniformly, after the
/// positions already in `chosen`.
pub(crate) fn fill_random(
    chosen: &mut BTreeSet<usize>,
    candidates: impl Iterator<Item = usize>,
    budget: usize,
    rng: &mut crate::rng::SeededRng,
) {
    let mut rest: Vec<usize> = candidates.filter(|p| !chosen.contains(p)).collect();
    rest.shuffle(rng);
    for p in rest {
        if chosen.len() >= budget {
            break;
        }
        chosen.insert(p);
    }
}

/// Knowledge masking: lexicon spans are masked whole, in random order,
/// while they fit the budget; the remainder is filled with random single
/// tokens.
pub fn mask_knowledge_spans(
    tokens: &[TokenId],
    lexicon: &Lexicon,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedLmExample> {
    if tokens.len() < 2 {
        return Err(Error::invalid(format!(
            "masking needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::invalid(format!("mask_rate {mask_rate} outside (0, 1)")));
    }
    let budget = mask_budget(tokens.len(), mask_rate);
    let mut rng = rng_from_seed(seed);
    let mut spans = lexicon.matches(tokens);
    spans.shuffle(&mut rng);
    let mut chosen = BTreeSet::new();
    for (start, len) in spans {
        if chosen.len() + len <= budget {
            chosen.extend(start..start + len);
        }
    }
    fill_random(&mut chosen, 0..tokens.len(), budget, &mut rng);
    Ok(apply_mask(tokens, chosen))
}
