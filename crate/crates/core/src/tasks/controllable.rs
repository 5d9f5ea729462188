//! Attribute prompts for controllable generation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{SoftPrompt, MAX_GENRE_PROMPTS};
use crate::rng::{bernoulli, rng_from_seed};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "Positive",
            Sentiment::Negative => "Negative",
            Sentiment::Neutral => "Neutral",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        Sentiment::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown sentiment `{s}`")))
    }
}

/// Attributes of a document used to condition generation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeSet {
    pub genre: Option<usize>,
    pub topic: Option<String>,
    pub keywords: Option<Vec<String>>,
    pub sentiment: Option<Sentiment>,
    /// Body length in tokens.
    pub length: Option<usize>,
}

impl AttributeSet {
    pub fn is_empty(&self) -> bool {
        self.genre.is_none()
            && self.topic.is_none()
            && self.keywords.is_none()
            && self.sentiment.is_none()
            && self.length.is_none()
    }
}

/// A rendered attribute prompt: genre soft prompts plus the text template.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ControlPrompt {
    pub soft: Option<SoftPrompt>,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

/// Renders the textual part of the template for every present attribute:
/// `[t] topic [/t] [k] k1, k2 [/k] [senti] label [/senti] [w] About L words [/w]`.
pub fn render_attributes(attrs: &AttributeSet) -> String {
    let mut parts: Vec<String> = Vec::new();
    if let Some(t) = &attrs.topic {
        parts.push(format!("[t] {t} [/t]"));
    }
    if let Some(k) = &attrs.keywords {
        parts.push(format!("[k] {} [/k]", k.join(", ")));
    }
    if let Some(s) = attrs.sentiment {
        parts.push(format!("[senti] {s} [/senti]"));
    }
    if let Some(l) = attrs.length {
        parts.push(format!("[w] About {l} words [/w]"));
    }
    parts.join(" ")
}

fn take_field<'a>(rest: &mut &'a str, open: &str, close: &str) -> Result<Option<&'a str>> {
    let s = rest.trim_start();
    let Some(after) = s.strip_prefix(open) else {
        *rest = s;
        return Ok(None);
    };
    let end = after
        .find(close)
        .ok_or_else(|| Error::invalid(format!("`{open}` without `{close}`")))?;
    let inner = after[..end]
        .strip_prefix(' ')
        .and_then(|v| v.strip_suffix(' '))
        .ok_or_else(|| Error::invalid(format!("malformed `{open}` field")))?;
    *rest = &after[end + close.len()..];
    Ok(Some(inner))
}

/// Inverse of [`render_attributes`]. The genre is carried by soft prompts,
/// not text, so it is always `None` here.
pub fn parse_attributes(text: &str) -> Result<AttributeSet> {
    let mut rest = text;
    let mut attrs = AttributeSet::default();
    if let Some(t) = take_field(&mut rest, "[t]", "[/t]")? {
        attrs.topic = Some(t.to_string());
    }
    if let Some(k) = take_field(&mut rest, "[k]", "[/k]")? {
        attrs.keywords = Some(k.split(", ").map(String::from).collect());
    }
    if let Some(s) = take_field(&mut rest, "[senti]", "[/senti]")? {
        attrs.sentiment = Some(s.parse()?);
    }
    if let Some(w) = take_field(&mut rest, "[w]", "[/w]")? {
        let n = w
            .strip_prefix("About ")
            .and_then(|v| v.strip_suffix(" words"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid(format!("malformed length field `{w}`")))?;
        attrs.length = Some(n);
    }
    if !rest.trim().is_empty() {
        return Err(Error::invalid(format!("trailing text after attributes: `{}`", rest.trim())));
    }
    Ok(attrs)
}

/// Builds the prompt for `attrs`. Each present attribute is independently
/// dropped with probability `drop_prob`; a kept genre yields
/// `num_soft_prompts` soft prompt embeddings.
pub fn format_controllable_input(
    attrs: &AttributeSet,
    tokenizer: &Tokenizer,
    num_soft_prompts: usize,
    drop_prob: f64,
    seed: u64,
) -> Result<ControlPrompt> {
    if num_soft_prompts >= MAX_GENRE_PROMPTS {
        return Err(Error::invalid(format!(
            "num_soft_prompts {num_soft_prompts} must be below {MAX_GENRE_PROMPTS}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut keep = |present: bool| present && !bernoulli(&mut rng, drop_prob);
    let kept = AttributeSet {
        genre: attrs.genre.filter(|_| keep(true)),
        topic: attrs.topic.clone().filter(|_| keep(true)),
        keywords: attrs.keywords.clone().filter(|_| keep(true)),
        sentiment: attrs.sentiment.filter(|_| keep(true)),
        length: attrs.length.filter(|_| keep(true)),
    };
    let soft = kept
        .genre
        .filter(|_| num_soft_prompts > 0)
        .map(|genre| SoftPrompt {
            genre,
            count: num_soft_prompts,
        });
    let text = render_attributes(&kept);
    let tokens = tokenizer.encode(&text);
    Ok(ControlPrompt { soft, text, tokens })
}

/// Training instance for the controllable language-modelling loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControllableExample {
    pub prompt: ControlPrompt,
    pub body: Vec<TokenId>,
    pub use_prompts: bool,
}

/// Options for [`build_controllable_example`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllableOptions {
    /// Probability of falling back to the plain language-modelling loss.
    pub plain_prob: f64,
    pub drop_prob: f64,
    /// Soft prompt count is drawn uniformly from `0..=max_soft_prompts`.
    pub max_soft_prompts: usize,
}

impl Default for ControllableOptions {
    fn default() -> Self {
        Self {
            plain_prob: 0.5,
            drop_prob: 0.5,
            max_soft_prompts: MAX_GENRE_PROMPTS - 1,
        }
    }
}

pub fn build_controllable_example(
    attrs: &AttributeSet,
    body: &[TokenId],
    tokenizer: &Tokenizer,
    opts: ControllableOptions,
    seed: u64,
) -> Result<ControllableExample> {
    if body.is_empty() {
        return Err(Error::Empty("controllable body"));
    }
    let mut rng = rng_from_seed(seed);
    let use_prompts = !bernoulli(&mut rng, opts.plain_prob);
    let count = rng.gen_range(0..=opts.max_soft_prompts.min(MAX_GENRE_PROMPTS - 1));
    let prompt = if use_prompts {
        format_controllable_input(attrs, tokenizer, count, opts.drop_prob, rng.gen())?
    } else {
        ControlPrompt::default()
    };
    Ok(ControllableExample {
        prompt,
        body: body.to_vec(),
        use_prompts,
    })
}
