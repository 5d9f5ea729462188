//! Sentence reordering and sentence distance.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tokenizer::TokenId;

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// `sum_{n=1..m} n!`, the size of the reordering label space.
pub fn reorder_class_count(m: usize) -> usize {
    (1..=m).map(factorial).sum()
}

/// Canonical label of a permutation: classes are ordered by segment count
/// and then lexicographically by permutation. `perm[i]` is the original
/// index of the segment placed at position `i`.
pub fn encode_reorder_label(perm: &[usize]) -> Result<usize> {
    let n = perm.len();
    if n == 0 {
        return Err(Error::Empty("permutation"));
    }
    let mut seen = alloc::vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::invalid(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    let mut rank = 0;
    for i in 0..n {
        let smaller = perm[i + 1..].iter().filter(|&&q| q < perm[i]).count();
        rank += smaller * factorial(n - 1 - i);
    }
    Ok(reorder_class_count(n - 1) + rank)
}

/// Inverse of [`encode_reorder_label`].
pub fn decode_reorder_label(label: usize) -> Vec<usize> {
    let mut n = 1;
    let mut offset = 0;
    while label >= offset + factorial(n) {
        offset += factorial(n);
        n += 1;
    }
    let mut rank = label - offset;
    let mut pool: Vec<usize> = (0..n).collect();
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let f = factorial(n - 1 - i);
        perm.push(pool.remove(rank / f));
        rank %= f;
    }
    perm
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReorderExample {
    pub permuted_tokens: Vec<TokenId>,
    /// Start offset of each segment within `permuted_tokens`.
    pub segment_boundaries: Vec<usize>,
    pub permutation: Vec<usize>,
    pub label: usize,
    pub m: usize,
}

/// Splits the paragraph at `n - 1` random sentence boundaries, with `n`
/// uniform in `1..=min(m, sentences)`, and shuffles the segments.
pub fn build_sentence_reorder_example(
    sentences: &[Vec<TokenId>],
    m: usize,
    seed: u64,
) -> Result<ReorderExample> {
    if m < 1 {
        return Err(Error::invalid("reorder m must be at least 1"));
    }
    let sentences: Vec<&Vec<TokenId>> = sentences.iter().filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(Error::Empty("paragraph"));
    }
    let mut rng = rng_from_seed(seed);
    let n = rng.gen_range(1..=m.min(sentences.len()));
    let mut cuts: Vec<usize> = index::sample(&mut rng, sentences.len() - 1, n - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut segments: Vec<Vec<TokenId>> = Vec::with_capacity(n);
    let mut start = 0;
    for end in cuts.into_iter().chain([sentences.len()]) {
        segments.push(sentences[start..end].iter().flat_map(|s| s.iter().copied()).collect());
        start = end;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut permuted_tokens = Vec::new();
    let mut segment_boundaries = Vec::with_capacity(n);
    for &p in &perm {
        segment_boundaries.push(permuted_tokens.len());
        permuted_tokens.extend_from_slice(&segments[p]);
    }
    Ok(ReorderExample {
        permuted_tokens,
        segment_boundaries,
        label: encode_reorder_label(&perm)?,
        permutation: perm,
        m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DistanceClass {
    Adjacent = 0,
    SameDocument = 1,
    CrossDocument = 2,
}

impl DistanceClass {
    pub const ALL: [DistanceClass; 3] = [
        DistanceClass::Adjacent,
        DistanceClass::SameDocument,
        DistanceClass::CrossDocument,
    ];
}

/// Tokenized sentences of each document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DocStore {
    pub docs: Vec<(String, Vec<Vec<TokenId>>)>,
}

impl DocStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, doc_id: impl Into<String>, sentences: Vec<Vec<TokenId>>) {
        let sentences: Vec<_> = sentences.into_iter().filter(|s| !s.is_empty()).collect();
        if !sentences.is_empty() {
            self.docs.push((doc_id.into(), sentences));
        }
    }

    fn docs_with(&self, min_sentences: usize) -> Vec<usize> {
        (0..self.docs.len())
            .filter(|&i| self.docs[i].1.len() >= min_sentences)
            .collect()
    }

    pub fn feasible(&self, class: DistanceClass) -> bool {
        match class {
            DistanceClass::Adjacent => !self.docs_with(2).is_empty(),
            DistanceClass::SameDocument => !self.docs_with(3).is_empty(),
            DistanceClass::CrossDocument => self.docs.len() >= 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceExample {
    pub tokens_a: Vec<TokenId>,
    pub tokens_b: Vec<TokenId>,
    pub class: DistanceClass,
    pub doc_a: String,
    pub doc_b: String,
}

impl DistanceExample {
    pub fn label(&self) -> usize {
        self.class as usize
    }
}

/// Draws the class uniformly, falling back to a uniform choice among the
/// classes the store can produce, then draws a conforming sentence pair.
pub fn build_sentence_distance_example(store: &DocStore, seed: u64) -> Result<DistanceExample> {
    let feasible: Vec<DistanceClass> = DistanceClass::ALL
        .into_iter()
        .filter(|&c| store.feasible(c))
        .collect();
    if feasible.is_empty() {
        return Err(Error::invalid("document store cannot produce any sentence pair"));
    }
    let mut rng = rng_from_seed(seed);
    let drawn = DistanceClass::ALL[rng.gen_range(0..3)];
    let class = if feasible.contains(&drawn) {
        drawn
    } else {
        feasible[rng.gen_range(0..feasible.len())]
    };
    let pick = |rng: &mut crate::rng::SeededRng, min: usize| {
        let docs = store.docs_with(min);
        docs[rng.gen_range(0..docs.len())]
    };
    let (da, ia, db, ib) = match class {
        DistanceClass::Adjacent => {
            let d = pick(&mut rng, 2);
            let i = rng.gen_range(0..store.docs[d].1.len() - 1);
            (d, i, d, i + 1)
        }
        DistanceClass::SameDocument => {
            let d = pick(&mut rng, 3);
            let n = store.docs[d].1.len();
            let i = rng.gen_range(0..n - 2);
            let j = rng.gen_range(i + 2..n);
            (d, i, d, j)
        }
        DistanceClass::CrossDocument => {
            let a = rng.gen_range(0..store.docs.len());
            let mut b = rng.gen_range(0..store.docs.len() - 1);
            if b >= a {
                b += 1;
            }
            let ia = rng.gen_range(0..store.docs[a].1.len());
            let ib = rng.gen_range(0..store.docs[b].1.len());
            (a, ia, b, ib)
        }
    };
    Ok(DistanceExample {
        tokens_a: store.docs[da].1[ia].clone(),
        tokens_b: store.docs[db].1[ib].clone(),
        class,
        doc_a: store.docs[da].0.clone(),
        doc_b: store.docs[db].0.clone(),
    })
}
