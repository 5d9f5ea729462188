use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::model::SoftPrompt;
use crate::tokenizer::{TokenId, Tokenizer, SEP};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Tokens(Vec<TokenId>),
    /// Filled from the input field of this name.
    Field(String),
    Label,
}

/// Ordered literal and slot segments, with an optional empty-input variant
/// used for label-prior calibration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub soft: Option<SoftPrompt>,
    segments: Vec<Segment>,
    empty_input: Option<Vec<Segment>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub soft: Option<SoftPrompt>,
    pub tokens: Vec<TokenId>,
    /// Where the label tokens sit in `tokens`.
    pub label: Range<usize>,
}

fn check_label_once(segments: &[Segment]) -> Result<()> {
    let n = segments.iter().filter(|s| **s == Segment::Label).count();
    if n != 1 {
        return Err(Error::invalid(format!("template needs exactly one label slot, has {n}")));
    }
    Ok(())
}

/// Splits `text` on `{name}` placeholders; `{label}` is the label slot.
/// Literal text may contain `[SEP]`, which becomes the separator token.
fn parse_segments(text: &str, tokenizer: &Tokenizer) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (i, part) in text.split(SEP_MARKER).enumerate() {
        if i > 0 {
            out.push(Segment::Tokens(alloc::vec![SEP]));
        }
        out.extend(parse_part(part, tokenizer)?);
    }
    Ok(out)
}

const SEP_MARKER: &str = "[SEP]";

fn parse_part(text: &str, tokenizer: &Tokenizer) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::invalid(format!("unclosed `{{` in template `{text}`")))?;
        if open > 0 {
            out.push(Segment::Tokens(tokenizer.encode(&rest[..open])));
        }
        let name = rest[open + 1..close].trim();
        if name.is_empty() {
            return Err(Error::invalid("empty template slot"));
        }
        out.push(if name == "label" {
            Segment::Label
        } else {
            Segment::Field(name.into())
        });
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        out.push(Segment::Tokens(tokenizer.encode(rest)));
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        check_label_once(&segments)?;
        Ok(Self {
            soft: None,
            segments,
            empty_input: None,
        })
    }

    pub fn with_empty_input(mut self, segments: Vec<Segment>) -> Result<Self> {
        check_label_once(&segments)?;
        self.empty_input = Some(segments);
        Ok(self)
    }

    pub fn with_soft_prompt(mut self, soft: Option<SoftPrompt>) -> Self {
        self.soft = soft.filter(|s| s.count > 0);
        self
    }

    /// Parses text such as `News: {x}. This news is about {label}.`.
    pub fn parse(text: &str, tokenizer: &Tokenizer) -> Result<Self> {
        Self::new(parse_segments(text, tokenizer)?)
    }

    pub fn parse_empty_input(self, text: &str, tokenizer: &Tokenizer) -> Result<Self> {
        let segs = parse_segments(text, tokenizer)?;
        self.with_empty_input(segs)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has_empty_input(&self) -> bool {
        self.empty_input.is_some()
    }

    /// Names of every input field the template reads.
    pub fn fields(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Field(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    fn render_segments(
        &self,
        segments: &[Segment],
        fields: Option<&BTreeMap<String, Vec<TokenId>>>,
        label: &[TokenId],
    ) -> Result<Rendered> {
        if label.is_empty() {
            return Err(Error::Empty("label tokens"));
        }
        let mut tokens = Vec::new();
        let mut span = 0..0;
        for s in segments {
            match s {
                Segment::Tokens(t) => tokens.extend_from_slice(t),
                Segment::Field(name) => match fields {
                    Some(f) => {
                        let v = f
                            .get(name)
                            .ok_or_else(|| Error::invalid(format!("template field `{name}` not supplied")))?;
                        tokens.extend_from_slice(v);
                    }
                    None => {}
                },
                Segment::Label => {
                    span = tokens.len()..tokens.len() + label.len();
                    tokens.extend_from_slice(label);
                }
            }
        }
        Ok(Rendered {
            soft: self.soft,
            tokens,
            label: span,
        })
    }

    pub fn render(&self, fields: &BTreeMap<String, Vec<TokenId>>, label: &[TokenId]) -> Result<Rendered> {
        self.render_segments(&self.segments, Some(fields), label)
    }

    /// Renders the empty-input variant; its field slots stay empty.
    pub fn render_empty(&self, label: &[TokenId]) -> Result<Rendered> {
        let segs = self
            .empty_input
            .as_ref()
            .ok_or_else(|| Error::invalid("template has no empty-input variant"))?;
        self.render_segments(segs, None, label)
    }
}

/// Class ids with their label token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVerbalizer {
    entries: Vec<(usize, Vec<TokenId>)>,
}

impl LabelVerbalizer {
    pub fn new(entries: Vec<(usize, Vec<TokenId>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("label set"));
        }
        let mut ids = BTreeSet::new();
        for (id, toks) in &entries {
            if toks.is_empty() {
                return Err(Error::invalid(format!("label {id} has no tokens")));
            }
            if !ids.insert(*id) {
                return Err(Error::invalid(format!("duplicate class id {id}")));
            }
        }
        Ok(Self { entries })
    }

    /// Class `i` is the `i`-th label.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>, tokenizer: &Tokenizer) -> Result<Self> {
        Self::new(
            labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| (i, tokenizer.encode(l)))
                .collect(),
        )
    }

    pub fn entries(&self) -> &[(usize, Vec<TokenId>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
