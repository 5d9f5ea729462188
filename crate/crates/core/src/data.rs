//! Adversarial dataset synthesis and rule-based attribute taggers.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tasks::{AdversarialExample, AdversarialLabel, AttributeSet, Sentiment};
use crate::text::{is_terminator, Document};
use crate::tokenizer::{TokenId, Tokenizer};
use crate::zeroshot::{top1_generate, CausalLm};

/// Longest generated continuation, in tokens.
pub const MAX_GENERATED_TOKENS: usize = 512;

/// The text of the first `k` sentences, without trailing whitespace.
pub fn sentence_prefix(doc: &Document, k: usize) -> &str {
    let end = doc.sentences[k - 1].end;
    doc.text[..end].trim_end()
}

fn ends_sentence(tokenizer: &Tokenizer, id: TokenId) -> bool {
    tokenizer
        .token(id)
        .and_then(|t| t.trim_end().chars().last())
        .is_some_and(is_terminator)
}

/// Greedy continuation of `prefix`, cut after the last sentence terminator.
/// `None` when no complete sentence was generated.
pub fn generate_continuation(
    generator: &dyn CausalLm,
    tokenizer: &Tokenizer,
    prefix: &[TokenId],
    max_tokens: usize,
) -> Result<Option<Vec<TokenId>>> {
    let mut gen = top1_generate(generator, None, prefix, max_tokens, &[])?;
    match gen.iter().rposition(|&t| ends_sentence(tokenizer, t)) {
        Some(last) => {
            gen.truncate(last + 1);
            Ok(Some(gen))
        }
        None => Ok(None),
    }
}

/// Alternating original and generated examples, starting with an original.
///
/// Originals are whole corpus paragraphs. Generated examples keep the first
/// one to three sentences of a paragraph (uniformly) and append a greedy
/// continuation. Paragraphs without sentences are skipped.
pub fn build_adversarial_dataset(
    corpus: &[Document],
    tokenizer: &Tokenizer,
    generator: &dyn CausalLm,
    n_examples: usize,
    max_generated: usize,
    seed: u64,
) -> Result<Vec<AdversarialExample>> {
    let usable: Vec<&Document> = corpus.iter().filter(|d| d.num_sentences() > 0).collect();
    if usable.is_empty() {
        return Err(Error::Empty("corpus with sentences"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(n_examples);
    let mut failures = 0usize;
    while out.len() < n_examples {
        if out.len() % 2 == 0 {
            let doc = usable[rng.gen_range(0..usable.len())];
            out.push(AdversarialExample {
                tokens: tokenizer.encode(&doc.text),
                label: AdversarialLabel::Original,
                source_doc_id: doc.doc_id.clone(),
                prefix_sentence_count: 0,
            });
            continue;
        }
        let k = rng.gen_range(1..=3usize);
        let long: Vec<&Document> = usable.iter().copied().filter(|d| d.num_sentences() >= k).collect();
        let pool = if long.is_empty() { &usable } else { &long };
        let doc = pool[rng.gen_range(0..pool.len())];
        let k = k.min(doc.num_sentences());
        let prefix = tokenizer.encode(sentence_prefix(doc, k));
        match generate_continuation(generator, tokenizer, &prefix, max_generated)? {
            Some(gen) => {
                let mut tokens = prefix;
                tokens.extend(gen);
                out.push(AdversarialExample {
                    tokens,
                    label: AdversarialLabel::Generated,
                    source_doc_id: doc.doc_id.clone(),
                    prefix_sentence_count: k,
                });
            }
            None => {
                failures += 1;
                if failures > 8 * n_examples.max(1) {
                    return Err(Error::invalid("generator never completes a sentence"));
                }
            }
        }
    }
    Ok(out)
}

/// Lower-cased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Genre,
    Topic,
    Keywords,
    Sentiment,
    Length,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Genre,
        Attribute::Topic,
        Attribute::Keywords,
        Attribute::Sentiment,
        Attribute::Length,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttributeValue {
    Genre(usize),
    Topic(String),
    Keywords(Vec<String>),
    Sentiment(Sentiment),
    Length(usize),
}

pub trait Tagger {
    fn attribute(&self) -> Attribute;
    /// `None` when the document gives the tagger nothing to go on.
    fn tag(&self, doc: &Document) -> Option<AttributeValue>;
}

/// Runs the first registered tagger for every requested attribute.
/// Attributes without a tagger are left absent.
pub fn tag_attributes(doc: &Document, taggers: &[&dyn Tagger], requested: &[Attribute]) -> AttributeSet {
    let mut set = AttributeSet::default();
    for &attr in requested {
        let Some(t) = taggers.iter().find(|t| t.attribute() == attr) else {
            continue;
        };
        match t.tag(doc) {
            Some(AttributeValue::Genre(g)) => set.genre = Some(g),
            Some(AttributeValue::Topic(s)) => set.topic = Some(s),
            Some(AttributeValue::Keywords(k)) => set.keywords = Some(k),
            Some(AttributeValue::Sentiment(s)) => set.sentiment = Some(s),
            Some(AttributeValue::Length(n)) => set.length = Some(n),
            None => {}
        }
    }
    set
}

/// Top-k words by TF-IDF against a fitted corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TfIdfKeywords {
    doc_freq: BTreeMap<String, usize>,
    num_docs: usize,
    pub k: usize,
}

impl TfIdfKeywords {
    pub fn fit(corpus: &[Document], k: usize) -> Self {
        let mut doc_freq = BTreeMap::new();
        for d in corpus {
            let unique: BTreeSet<String> = words(&d.text).into_iter().collect();
            for w in unique {
                *doc_freq.entry(w).or_insert(0) += 1;
            }
        }
        Self {
            doc_freq,
            num_docs: corpus.len(),
            k,
        }
    }

    /// Smoothed inverse document frequency.
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.doc_freq.get(word).copied().unwrap_or(0);
        libm::log((1 + self.num_docs) as f64 / (1 + df) as f64) + 1.0
    }

    /// Words ranked by score, ties alphabetical.
    pub fn ranked(&self, text: &str) -> Vec<(String, f64)> {
        let ws = words(text);
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for w in &ws {
            *tf.entry(w.clone()).or_insert(0) += 1;
        }
        let mut scored: Vec<(String, f64)> = tf
            .into_iter()
            .map(|(w, n)| {
                let s = n as f64 / ws.len() as f64 * self.idf(&w);
                (w, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }

    pub fn keywords(&self, text: &str) -> Vec<String> {
        self.ranked(text).into_iter().take(self.k).map(|(w, _)| w).collect()
    }
}

impl Tagger for TfIdfKeywords {
    fn attribute(&self) -> Attribute {
        Attribute::Keywords
    }
    fn tag(&self, doc: &Document) -> Option<AttributeValue> {
        let k = self.keywords(&doc.text);
        (!k.is_empty()).then_some(AttributeValue::Keywords(k))
    }
}

/// Topic of the most frequent word that has a bucket.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeywordBucketTopic {
    pub buckets: BTreeMap<String, String>,
}

impl KeywordBucketTopic {
    pub fn new<'a>(buckets: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            buckets: buckets
                .into_iter()
                .map(|(w, t)| (w.to_lowercase(), t.to_string()))
                .collect(),
        }
    }
}

impl Tagger for KeywordBucketTopic {
    fn attribute(&self) -> Attribute {
        Attribute::Topic
    }
    fn tag(&self, doc: &Document) -> Option<AttributeValue> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for w in words(&doc.text) {
            if self.buckets.contains_key(&w) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        // BTreeMap order makes ties alphabetical.
        let mut best: Option<(&String, usize)> = None;
        for (w, &n) in &counts {
            if best.map_or(true, |(_, b)| n > b) {
                best = Some((w, n));
            }
        }
        best.map(|(w, _)| AttributeValue::Topic(self.buckets[w].clone()))
    }
}

/// Majority vote of lexicon hits; a tie is neutral.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexiconSentiment {
    pub positive: BTreeSet<String>,
    pub negative: BTreeSet<String>,
}

const POSITIVE_WORDS: &[&str] = &[
    "good", "great", "excellent", "happy", "win", "wins", "won", "love", "best", "success", "bright",
    "calm", "pleasant", "strong", "gain", "gains",
];
const NEGATIVE_WORDS: &[&str] = &[
    "bad", "poor", "terrible", "sad", "lose", "loses", "lost", "hate", "worst", "failure", "dark",
    "storm", "unpleasant", "weak", "loss", "losses",
];

impl LexiconSentiment {
    pub fn new<'a>(positive: impl IntoIterator<Item = &'a str>, negative: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            positive: positive.into_iter().map(|w| w.to_lowercase()).collect(),
            negative: negative.into_iter().map(|w| w.to_lowercase()).collect(),
        }
    }

    /// A small built-in English lexicon.
    pub fn english() -> Self {
        Self::new(POSITIVE_WORDS.iter().copied(), NEGATIVE_WORDS.iter().copied())
    }

    pub fn classify(&self, text: &str) -> Sentiment {
        let (mut pos, mut neg) = (0usize, 0usize);
        for w in words(text) {
            pos += self.positive.contains(&w) as usize;
            neg += self.negative.contains(&w) as usize;
        }
        match pos.cmp(&neg) {
            core::cmp::Ordering::Greater => Sentiment::Positive,
            core::cmp::Ordering::Less => Sentiment::Negative,
            core::cmp::Ordering::Equal => Sentiment::Neutral,
        }
    }
}

impl Tagger for LexiconSentiment {
    fn attribute(&self) -> Attribute {
        Attribute::Sentiment
    }
    fn tag(&self, doc: &Document) -> Option<AttributeValue> {
        Some(AttributeValue::Sentiment(self.classify(&doc.text)))
    }
}

/// Body length in tokens.
pub struct TokenLength<'a> {
    pub tokenizer: &'a Tokenizer,
}

impl Tagger for TokenLength<'_> {
    fn attribute(&self) -> Attribute {
        Attribute::Length
    }
    fn tag(&self, doc: &Document) -> Option<AttributeValue> {
        Some(AttributeValue::Length(self.tokenizer.encode(&doc.text).len()))
    }
}

/// Genre carried by the corpus record itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct SourceGenre;

impl Tagger for SourceGenre {
    fn attribute(&self) -> Attribute {
        Attribute::Genre
    }
    fn tag(&self, doc: &Document) -> Option<AttributeValue> {
        doc.attributes.as_ref()?.genre.map(AttributeValue::Genre)
    }
}

/// The default tagger set: source genre, keyword-bucket topic, TF-IDF
/// keywords, lexicon sentiment and token length.
pub fn default_taggers<'a>(
    corpus: &[Document],
    tokenizer: &'a Tokenizer,
    keywords: usize,
    topics: KeywordBucketTopic,
) -> Vec<Box<dyn Tagger + 'a>> {
    alloc::vec![
        Box::new(SourceGenre),
        Box::new(topics),
        Box::new(TfIdfKeywords::fit(corpus, keywords)),
        Box::new(LexiconSentiment::english()),
        Box::new(TokenLength { tokenizer }),
    ]
}
