//! JSON-lines corpora and datasets, lexicon files and vocabulary files.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use titan_core::tasks::{AdversarialExample, AdversarialLabel, AttributeSet, Lexicon, Sentiment};
use titan_core::text::{Document, Triple};
use titan_core::tokenizer::{TokenId, Tokenizer};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributesRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

impl AttributesRecord {
    pub fn to_set(&self) -> Result<AttributeSet> {
        Ok(AttributeSet {
            genre: self.genre,
            topic: self.topic.clone(),
            keywords: self.keywords.clone(),
            sentiment: self.sentiment.as_deref().map(str::parse::<Sentiment>).transpose()?,
            length: self.length,
        })
    }

    pub fn from_set(s: &AttributeSet) -> Self {
        Self {
            genre: s.genre,
            topic: s.topic.clone(),
            keywords: s.keywords.clone(),
            sentiment: s.sentiment.map(|v| v.as_str().to_lowercase()),
            length: s.length,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<AttributesRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triples: Option<Vec<[String; 3]>>,
}

impl CorpusRecord {
    pub fn to_document(&self) -> Result<Document> {
        let mut d = Document::new(self.doc_id.clone(), self.text.clone());
        d.attributes = self.attributes.as_ref().map(|a| a.to_set()).transpose()?;
        d.triples = self
            .triples
            .iter()
            .flatten()
            .map(|[h, r, t]| Triple {
                head: h.clone(),
                relation: r.clone(),
                tail: t.clone(),
            })
            .collect();
        Ok(d)
    }

    pub fn from_document(d: &Document) -> Self {
        Self {
            text: d.text.clone(),
            doc_id: d.doc_id.clone(),
            attributes: d.attributes.as_ref().map(AttributesRecord::from_set),
            triples: (!d.triples.is_empty())
                .then(|| d.triples.iter().map(|t| [t.head.clone(), t.relation.clone(), t.tail.clone()]).collect()),
        }
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let recs: Vec<CorpusRecord> = read_jsonl(path)?;
    recs.iter().map(CorpusRecord::to_document).collect()
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let recs: Vec<CorpusRecord> = docs.iter().map(CorpusRecord::from_document).collect();
    write_jsonl(path, &recs)
}

/// One surface form per line.
pub fn read_lexicon(path: &Path, tokenizer: &Tokenizer) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Lexicon::from_surface_forms(
        text.lines().map(str::trim).filter(|l| !l.is_empty()),
        tokenizer,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub text: String,
    pub doc_id: String,
    pub label: String,
    pub prefix_sentences: usize,
    /// Exact token ids; `text` is their decoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
}

impl AdversarialRecord {
    pub fn from_example(ex: &AdversarialExample, tokenizer: &Tokenizer) -> Self {
        Self {
            text: tokenizer.decode(&ex.tokens),
            doc_id: ex.source_doc_id.clone(),
            label: match ex.label {
                AdversarialLabel::Original => "original",
                AdversarialLabel::Generated => "generated",
            }
            .into(),
            prefix_sentences: ex.prefix_sentence_count,
            tokens: Some(ex.tokens.clone()),
        }
    }

    pub fn to_example(&self, tokenizer: &Tokenizer) -> Result<AdversarialExample> {
        let label = match self.label.as_str() {
            "original" => AdversarialLabel::Original,
            "generated" => AdversarialLabel::Generated,
            other => bail!("unknown adversarial label `{other}`"),
        };
        let tokens = match &self.tokens {
            Some(t) => {
                if let Some(&bad) = t.iter().find(|&&id| id as usize >= tokenizer.vocab_size()) {
                    bail!("token id {bad} outside the vocabulary");
                }
                t.clone()
            }
            None => tokenizer.encode(&self.text),
        };
        Ok(AdversarialExample {
            tokens,
            label,
            source_doc_id: self.doc_id.clone(),
            prefix_sentence_count: self.prefix_sentences,
        })
    }
}

pub fn read_adversarial(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<AdversarialExample>> {
    let recs: Vec<AdversarialRecord> = read_jsonl(path)?;
    recs.iter().map(|r| r.to_example(tokenizer)).collect()
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
    merges: Vec<(TokenId, TokenId)>,
}

pub fn save_vocab(path: &Path, tokenizer: &Tokenizer) -> Result<()> {
    let v = VocabFile {
        version: 1,
        tokens: tokenizer.tokens().to_vec(),
        merges: tokenizer.merges().to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Tokenizer> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: VocabFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if v.version != 1 {
        return Err(anyhow!("unsupported vocabulary version {}", v.version));
    }
    Ok(Tokenizer::from_parts(v.tokens, v.merges)?)
}
