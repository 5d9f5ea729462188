//! Documents and sentence segmentation.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::tasks::AttributeSet;

/// Characters that end a sentence.
pub const TERMINATORS: [char; 6] = ['。', '！', '？', '.', '!', '?'];

pub fn is_terminator(c: char) -> bool {
    TERMINATORS.contains(&c)
}

/// Byte ranges of the sentences of `text`. A sentence runs up to and
/// including a run of terminators plus any whitespace after it; the ranges
/// partition the text.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_terminator(c) {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, d)) = chars.peek() {
            if is_terminator(d) || d.is_whitespace() {
                end = j + d.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        spans.push(start..end);
        start = end;
    }
    if start < text.len() {
        spans.push(start..text.len());
    }
    spans
}

/// Knowledge-graph triple paired with a document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub sentences: Vec<Range<usize>>,
    pub attributes: Option<AttributeSet>,
    pub triples: Vec<Triple>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            doc_id: doc_id.into(),
            sentences: sentence_spans(&text),
            text,
            attributes: None,
            triples: Vec::new(),
        }
    }

    pub fn sentence_texts(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|r| &self.text[r.clone()])
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }
}
