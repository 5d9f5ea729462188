use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

use super::masking::{apply_mask, fill_random, mask_budget};
use crate::error::{Error, Result};
use crate::rng::{bernoulli, rng_from_seed};
use crate::tokenizer::{TokenId, SEP};

/// A knowledge triple in token form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTriple {
    pub head: Vec<TokenId>,
    pub relation: Vec<TokenId>,
    pub tail: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSite {
    Relation,
    Sentence,
}

/// Input layout: `head ++ relation ++ tail ++ [SEP] ++ sentence`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UktpExample {
    pub triple: TokenTriple,
    pub sentence_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub masked_positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub mask_site: MaskSite,
}

impl UktpExample {
    pub fn relation_range(&self) -> core::ops::Range<usize> {
        let start = self.triple.head.len();
        start..start + self.triple.relation.len()
    }

    pub fn sentence_start(&self) -> usize {
        self.triple.head.len() + self.triple.relation.len() + self.triple.tail.len() + 1
    }
}

pub const UKTP_RELATION_PROB: f64 = 0.5;
pub const UKTP_SENTENCE_RATE: f64 = 0.15;

/// Masks the whole relation with probability one half, otherwise 15% of the
/// sentence tokens.
pub fn build_uktp_example(triple: &TokenTriple, sentence: &[TokenId], seed: u64) -> Result<UktpExample> {
    if triple.relation.is_empty() {
        return Err(Error::Empty("triple relation"));
    }
    if sentence.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let mut layout = Vec::new();
    layout.extend_from_slice(&triple.head);
    layout.extend_from_slice(&triple.relation);
    layout.extend_from_slice(&triple.tail);
    layout.push(SEP);
    let s0 = layout.len();
    layout.extend_from_slice(sentence);

    let mut rng = rng_from_seed(seed);
    let (site, chosen) = if bernoulli(&mut rng, UKTP_RELATION_PROB) {
        let r0 = triple.head.len();
        (MaskSite::Relation, (r0..r0 + triple.relation.len()).collect())
    } else {
        let budget = mask_budget(sentence.len(), UKTP_SENTENCE_RATE);
        let mut chosen = BTreeSet::new();
        let mut sub = crate::rng::rng_from_seed(rng.gen());
        fill_random(&mut chosen, s0..layout.len(), budget, &mut sub);
        (MaskSite::Sentence, chosen)
    };
    let m = apply_mask(&layout, chosen);
    Ok(UktpExample {
        triple: triple.clone(),
        sentence_tokens: sentence.to_vec(),
        tokens: m.tokens,
        masked_positions: m.masked_positions,
        targets: m.targets,
        mask_site: site,
    })
}
