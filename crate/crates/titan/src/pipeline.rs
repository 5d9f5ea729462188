//! Turns a tokenized corpus into per-step task bundles.
//!
//! The bundle for step `k` depends only on `(seed, k)` and the corpus, so a
//! run resumed from a checkpoint sees exactly the batches it would have seen
//! uninterrupted.

use std::collections::BTreeSet;

use anyhow::{bail, Result};
use rand::Rng;
use titan_core::rng::{derive_seed, rng_from_seed};
use titan_core::tasks::{
    build_controllable_example, build_sentence_distance_example, build_sentence_reorder_example, build_uktp_example,
    mask_knowledge_spans, render_attributes, AdversarialExample, AttributeSet, ControllableExample, ControllableOptions, DistanceExample,
    DocStore, DocumentStream, Lexicon, MaskedLmExample, TaskBundle, TokenTriple, TASK_NAMES,
};
use titan_core::text::Document;
use titan_core::tokenizer::{TokenId, Tokenizer, SEP};

/// A document with its token ids and per-sentence token ids; the sentences
/// concatenate to the document.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDoc {
    pub doc_id: String,
    pub tokens: Vec<TokenId>,
    pub sentences: Vec<Vec<TokenId>>,
    pub attributes: AttributeSet,
    /// Triples paired with the sentence stating them.
    pub triples: Vec<(TokenTriple, Vec<TokenId>)>,
}

/// Sentence texts that concatenate back to the document: whitespace
/// between sentences starts the next one.
pub fn sentence_texts(doc: &Document) -> Vec<&str> {
    let ends: Vec<usize> = doc
        .sentences
        .iter()
        .map(|r| r.start + doc.text[r.clone()].trim_end().len())
        .collect();
    let mut out = Vec::with_capacity(ends.len());
    let mut start = 0;
    for (i, &e) in ends.iter().enumerate() {
        let end = if i + 1 == ends.len() { doc.text.len() } else { e };
        if end > start {
            out.push(&doc.text[start..end]);
        }
        start = end;
    }
    out
}

pub fn prepare(doc: &Document, tokenizer: &Tokenizer) -> PreparedDoc {
    let texts = sentence_texts(doc);
    let sentences: Vec<Vec<TokenId>> = texts.iter().map(|s| tokenizer.encode(s)).collect();
    let tokens: Vec<TokenId> = sentences.concat();
    let mut triples = Vec::new();
    for t in &doc.triples {
        if let Some(s) = texts.iter().find(|s| s.contains(&t.head) && s.contains(&t.tail)) {
            let triple = TokenTriple {
                head: tokenizer.encode(&t.head),
                relation: tokenizer.encode(&format!(" {}", t.relation)),
                tail: tokenizer.encode(&format!(" {}", t.tail)),
            };
            if !triple.relation.is_empty() {
                triples.push((triple, tokenizer.encode(s.trim_start())));
            }
        }
    }
    PreparedDoc {
        doc_id: doc.doc_id.clone(),
        tokens,
        sentences,
        attributes: doc.attributes.clone().unwrap_or_default(),
        triples,
    }
}

/// Vocabulary training texts: the documents plus the attribute prompts the
/// controllable task renders for them, and every digit so any length
/// request is representable.
pub fn vocab_texts(docs: &[Document]) -> Vec<String> {
    let mut out: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    for d in docs {
        let attrs = AttributeSet {
            length: Some(d.text.split_whitespace().count()),
            ..d.attributes.clone().unwrap_or_default()
        };
        out.push(render_attributes(&attrs));
    }
    out.push("0 1 2 3 4 5 6 7 8 9".to_string());
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub tasks: BTreeSet<String>,
    /// Examples per task per step.
    pub batch: std::collections::BTreeMap<String, usize>,
    pub max_seq_len: usize,
    pub reorder_segments: usize,
    pub mask_rate: f64,
    pub document_segments: usize,
    pub controllable: ControllableOptions,
    /// Every `heldout_every`-th document is held out.
    pub heldout_every: usize,
    pub heldout_examples: usize,
}

impl SamplerConfig {
    pub fn new(tasks: impl IntoIterator<Item = String>, batch: usize, max_seq_len: usize) -> Result<Self> {
        let tasks: BTreeSet<String> = tasks.into_iter().collect();
        for t in &tasks {
            if !TASK_NAMES.contains(&t.as_str()) {
                bail!("unknown task `{t}`; expected one of {}", TASK_NAMES.join(", "));
            }
        }
        if tasks.is_empty() {
            bail!("field `tasks`: at least one task must be enabled");
        }
        Ok(Self {
            batch: TASK_NAMES.iter().map(|t| (t.to_string(), batch)).collect(),
            tasks,
            max_seq_len,
            reorder_segments: 3,
            mask_rate: 0.15,
            document_segments: 2,
            controllable: ControllableOptions::default(),
            heldout_every: 50,
            heldout_examples: 64,
        })
    }

    fn batch_of(&self, task: &str) -> usize {
        if self.tasks.contains(task) {
            self.batch.get(task).copied().unwrap_or(0)
        } else {
            0
        }
    }
}

pub struct Sampler<'a> {
    pub config: SamplerConfig,
    pub tokenizer: &'a Tokenizer,
    pub lexicon: Lexicon,
    pub train: Vec<PreparedDoc>,
    pub heldout: Vec<PreparedDoc>,
    store: DocStore,
    with_triples: Vec<usize>,
    pub adversarial: Vec<AdversarialExample>,
    pub adversarial_heldout: Vec<AdversarialExample>,
}

fn truncate(tokens: &[TokenId], n: usize) -> Vec<TokenId> {
    tokens[..tokens.len().min(n)].to_vec()
}

/// Leading whole sentences within `budget` tokens; at least a truncated
/// first sentence.
fn leading_sentences(doc: &PreparedDoc, budget: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut used = 0;
    for s in &doc.sentences {
        if used + s.len() > budget {
            break;
        }
        used += s.len();
        out.push(s.clone());
    }
    if out.is_empty() {
        if let Some(s) = doc.sentences.first() {
            out.push(truncate(s, budget));
        }
    }
    out
}

impl<'a> Sampler<'a> {
    pub fn new(
        config: SamplerConfig,
        tokenizer: &'a Tokenizer,
        lexicon: Lexicon,
        corpus: &[Document],
        adversarial: Vec<AdversarialExample>,
        adversarial_heldout: Option<Vec<AdversarialExample>>,
    ) -> Result<Self> {
        if config.max_seq_len < 8 {
            bail!("max_seq_len must be at least 8 for pre-training");
        }
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for (i, d) in corpus.iter().enumerate() {
            let p = prepare(d, tokenizer);
            if p.tokens.len() < 2 {
                continue;
            }
            if config.heldout_every > 0 && i % config.heldout_every == 0 {
                heldout.push(p);
            } else {
                train.push(p);
            }
        }
        if train.is_empty() {
            bail!("corpus has no usable training documents");
        }
        let held_ids: BTreeSet<&str> = heldout.iter().map(|d| d.doc_id.as_str()).collect();
        // Without an explicit held-out file, examples from held-out documents
        // are held out.
        let (adversarial_heldout, adversarial) = match adversarial_heldout {
            Some(h) => (h, adversarial),
            None => adversarial
                .into_iter()
                .partition(|e| held_ids.contains(e.source_doc_id.as_str())),
        };
        let half = (config.max_seq_len - 2) / 2;
        let mut store = DocStore::new();
        for d in &train {
            store.push(d.doc_id.clone(), d.sentences.iter().map(|s| truncate(s, half)).collect());
        }
        let with_triples = (0..train.len()).filter(|&i| !train[i].triples.is_empty()).collect();
        if config.tasks.contains("adversarial") && adversarial.is_empty() {
            bail!("task `adversarial` is enabled but no adversarial training data was given");
        }
        Ok(Self {
            config,
            tokenizer,
            lexicon,
            train,
            heldout,
            store,
            with_triples,
            adversarial,
            adversarial_heldout,
        })
    }

    fn masked(&self, doc: &PreparedDoc, seed: u64) -> Result<MaskedLmExample> {
        let tokens = truncate(&doc.tokens, self.config.max_seq_len - 1);
        Ok(mask_knowledge_spans(&tokens, &self.lexicon, self.config.mask_rate, seed)?)
    }

    /// Fixed held-out masked-LM examples.
    pub fn heldout_masked(&self) -> Result<Vec<MaskedLmExample>> {
        self.heldout
            .iter()
            .take(self.config.heldout_examples)
            .enumerate()
            .map(|(i, d)| self.masked(d, derive_seed(0x4845_4c44, i as u64, 0)))
            .collect()
    }

    pub fn adversarial_eval(&self) -> Vec<AdversarialExample> {
        self.adversarial_heldout
            .iter()
            .take(self.config.heldout_examples * 2)
            .map(|e| self.fit_adversarial(e))
            .collect()
    }

    fn fit_adversarial(&self, e: &AdversarialExample) -> AdversarialExample {
        AdversarialExample {
            tokens: truncate(&e.tokens, self.config.max_seq_len - 1),
            ..e.clone()
        }
    }

    pub fn controllable(&self, doc: &PreparedDoc, seed: u64) -> Result<ControllableExample> {
        let max = self.config.max_seq_len;
        let opts = self.config.controllable;
        let build = |sentences: &[Vec<TokenId>]| -> Result<ControllableExample> {
            let mut body: Vec<TokenId> = sentences.concat();
            let attrs = AttributeSet {
                length: Some(body.len()),
                ..doc.attributes.clone()
            };
            body.push(SEP);
            Ok(build_controllable_example(&attrs, &body, self.tokenizer, opts, seed)?)
        };
        let fits = |ex: &ControllableExample| {
            let prompt = if ex.use_prompts {
                ex.prompt.tokens.len() + ex.prompt.soft.map_or(0, |s| s.count)
            } else {
                0
            };
            prompt + ex.body.len() - 1 <= max
        };
        let mut n = doc.sentences.len();
        loop {
            let ex = build(&doc.sentences[..n])?;
            if fits(&ex) {
                return Ok(ex);
            }
            if n == 1 {
                break;
            }
            n -= 1;
        }
        let mut ex = build(&doc.sentences[..1])?;
        while !fits(&ex) && ex.body.len() > 2 {
            let keep = ex.body.len() - 2;
            let first = truncate(&doc.sentences[0], keep);
            ex = build(&[first])?;
        }
        if !fits(&ex) {
            bail!("controllable prompt alone exceeds max_seq_len {max}");
        }
        Ok(ex)
    }

    fn pick<'d>(&self, docs: &'d [PreparedDoc], rng: &mut impl Rng) -> &'d PreparedDoc {
        &docs[rng.gen_range(0..docs.len())]
    }

    /// The bundle for optimizer step `step`.
    pub fn bundle(&self, seed: u64, step: u64) -> Result<TaskBundle> {
        let c = &self.config;
        let mut rng = rng_from_seed(derive_seed(seed, step, 0x5354_4550));
        let mut b = TaskBundle::default();
        for _ in 0..c.batch_of("masked_lm") {
            let d = self.pick(&self.train, &mut rng);
            b.masked_lm.push(self.masked(d, rng.gen())?);
        }
        for _ in 0..c.batch_of("document_lm") {
            let d = self.pick(&self.train, &mut rng);
            let segment_len = c.max_seq_len.min(d.tokens.len() + 1).max(2);
            let mut tokens = d.tokens.clone();
            tokens.push(SEP);
            tokens.truncate(segment_len * c.document_segments.max(1));
            if tokens.len() >= 2 {
                b.document_lm.push(DocumentStream { tokens, segment_len });
            }
        }
        for _ in 0..c.batch_of("reorder") {
            let d = self.pick(&self.train, &mut rng);
            let sentences = leading_sentences(d, c.max_seq_len - 1);
            b.reorder.push(build_sentence_reorder_example(&sentences, c.reorder_segments, rng.gen())?);
        }
        for _ in 0..c.batch_of("distance") {
            let ex: DistanceExample = build_sentence_distance_example(&self.store, rng.gen())?;
            b.distance.push(ex);
        }
        if !self.with_triples.is_empty() {
            for _ in 0..c.batch_of("uktp") {
                let d = &self.train[self.with_triples[rng.gen_range(0..self.with_triples.len())]];
                let (triple, sentence) = &d.triples[rng.gen_range(0..d.triples.len())];
                let room = c
                    .max_seq_len
                    .saturating_sub(2 + triple.head.len() + triple.relation.len() + triple.tail.len());
                if room == 0 {
                    continue;
                }
                b.uktp.push(build_uktp_example(triple, &truncate(sentence, room), rng.gen())?);
            }
        }
        for _ in 0..c.batch_of("adversarial") {
            let e = &self.adversarial[rng.gen_range(0..self.adversarial.len())];
            b.adversarial.push(self.fit_adversarial(e));
        }
        for _ in 0..c.batch_of("controllable") {
            let d = self.pick(&self.train, &mut rng);
            b.controllable.push(self.controllable(d, rng.gen())?);
        }
        Ok(b)
    }
}
