//! Byte-pair-encoding tokenizer over characters.
//!
//! Text is first split at reserved special tokens, then into pieces (an
//! optional whitespace run followed by either a run of alphanumerics or a
//! single other character). Pieces are encoded with merges learned
//! greedily by pair frequency, so `decode(encode(t)) == t` whenever every
//! character of `t` is in the vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const TOPIC_OPEN: TokenId = 5;
pub const TOPIC_CLOSE: TokenId = 6;
pub const KEYWORDS_OPEN: TokenId = 7;
pub const KEYWORDS_CLOSE: TokenId = 8;
pub const SENTIMENT_OPEN: TokenId = 9;
pub const SENTIMENT_CLOSE: TokenId = 10;
pub const LENGTH_OPEN: TokenId = 11;
pub const LENGTH_CLOSE: TokenId = 12;

/// Reserved tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; 13] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[t]", "[/t]", "[k]", "[/k]", "[senti]",
    "[/senti]", "[w]", "[/w]",
];

pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Chunk<'a> {
    Special(TokenId),
    Text(&'a str),
}

fn split_specials(text: &str) -> Vec<Chunk<'_>> {
    let mut out = Vec::new();
    let mut offset_text = 0usize;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some((id, lit)) = SPECIAL_TOKENS
                .iter()
                .enumerate()
                .find(|(_, lit)| text[i..].starts_with(**lit))
            {
                if i > offset_text {
                    out.push(Chunk::Text(&text[offset_text..i]));
                }
                out.push(Chunk::Special(id as TokenId));
                i += lit.len();
                offset_text = i;
                continue;
            }
        }
        i += 1;
    }
    if offset_text < text.len() {
        out.push(Chunk::Text(&text[offset_text..]));
    }
    out
}

/// Splits text into pieces; concatenating the pieces restores the text.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        while i < chars.len() && chars[i].1.is_whitespace() {
            i += 1;
        }
        if i < chars.len() {
            if chars[i].1.is_alphanumeric() {
                while i < chars.len() && chars[i].1.is_alphanumeric() {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let end = chars.get(i).map_or(text.len(), |c| c.0);
        out.push(&text[start..end]);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    lookup: BTreeMap<String, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    merge_rank: BTreeMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Tokenizer {
    /// Rebuilds a tokenizer from its token list and merge list.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut lookup = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(alloc::format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = BTreeMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let (Some(sa), Some(sb)) = (tokens.get(a as usize), tokens.get(b as usize)) else {
                return Err(Error::invalid("merge references unknown token"));
            };
            let mut joined = sa.clone();
            joined.push_str(sb);
            let Some(&merged) = lookup.get(&joined) else {
                return Err(Error::invalid(alloc::format!("merge result {joined:?} not in vocabulary")));
            };
            merge_rank.entry((a, b)).or_insert((rank, merged));
        }
        Ok(Self {
            tokens,
            lookup,
            merges,
            merge_rank,
        })
    }

    /// Learns a vocabulary of at most `size` tokens from `corpus`.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Self> {
        if size <= NUM_SPECIAL {
            return Err(Error::invalid(alloc::format!(
                "vocabulary size {size} leaves no room beyond {NUM_SPECIAL} reserved tokens"
            )));
        }
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
        let mut any = false;
        for doc in corpus {
            for chunk in split_specials(doc) {
                if let Chunk::Text(t) = chunk {
                    for p in pieces(t) {
                        any = true;
                        *word_counts.entry(p.into()).or_default() += 1;
                        for c in p.chars() {
                            *char_counts.entry(c).or_default() += 1;
                        }
                    }
                }
            }
        }
        if !any {
            return Err(Error::Empty("corpus"));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| String::from(*s)).collect();
        let mut lookup: BTreeMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let mut alphabet: Vec<(char, usize)> = char_counts.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, _) in alphabet.into_iter().take(size - NUM_SPECIAL) {
            let s = String::from(c);
            if !lookup.contains_key(&s) {
                lookup.insert(s.clone(), tokens.len() as TokenId);
                tokens.push(s);
            }
        }
        let mut words: Vec<(Vec<TokenId>, usize)> = word_counts
            .iter()
            .map(|(w, &n)| {
                let ids = w
                    .chars()
                    .map(|c| {
                        let mut buf = [0u8; 4];
                        *lookup.get(&*c.encode_utf8(&mut buf)).unwrap_or(&UNK)
                    })
                    .collect();
                (ids, n)
            })
            .collect();

        let mut merges = Vec::new();
        while tokens.len() < size {
            let mut pair_counts: BTreeMap<(TokenId, TokenId), usize> = BTreeMap::new();
            for (ids, n) in &words {
                for w in ids.windows(2) {
                    if w[0] != UNK && w[1] != UNK {
                        *pair_counts.entry((w[0], w[1])).or_default() += n;
                    }
                }
            }
            // Highest count wins; ties go to the smallest pair of ids.
            let Some((&best, &count)) = pair_counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            let mut joined = tokens[best.0 as usize].clone();
            joined.push_str(&tokens[best.1 as usize]);
            let merged = match lookup.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as TokenId;
                    lookup.insert(joined.clone(), id);
                    tokens.push(joined);
                    id
                }
            };
            merges.push(best);
            for (ids, _) in &mut words {
                merge_in_place(ids, best, merged);
            }
        }
        Self::from_parts(tokens, merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<TokenId>) {
        if let Some(&id) = self.lookup.get(piece) {
            if !is_special(id) {
                out.push(id);
                return;
            }
        }
        let mut ids: Vec<TokenId> = piece
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                match self.lookup.get(&*c.encode_utf8(&mut buf)) {
                    Some(&id) if !is_special(id) => id,
                    _ => UNK,
                }
            })
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(r, m)| (r, (w[0], w[1]), m)))
                .min_by_key(|x| x.0);
            let Some((_, pair, merged)) = best else { break };
            merge_in_place(&mut ids, pair, merged);
        }
        out.extend(ids);
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in split_specials(text) {
            match chunk {
                Chunk::Special(id) => out.push(id),
                Chunk::Text(t) => {
                    for p in pieces(t) {
                        self.encode_piece(p, &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]));
        }
        s
    }

    /// 64-bit FNV-1a over tokens and merges; stamps checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for t in &self.tokens {
            feed(t.as_bytes());
            feed(&[0xff]);
        }
        for (a, b) in &self.merges {
            feed(&a.to_le_bytes());
            feed(&b.to_le_bytes());
        }
        h
    }
}

fn merge_in_place(ids: &mut Vec<TokenId>, pair: (TokenId, TokenId), merged: TokenId) {
    if ids.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_text_encodes_to_nothing() {
        let tok = Tokenizer::train(["hello world"], 40).unwrap();
        assert!(tok.encode("").is_empty());
    }

    #[test]
    fn single_forced_merge() {
        let tok = Tokenizer::train(["aaaa"], NUM_SPECIAL + 2).unwrap();
        let a = tok.id("a").unwrap();
        assert_eq!(tok.merges(), &[(a, a)]);
        assert_eq!(tok.id("aa"), Some(NUM_SPECIAL as TokenId + 1));
        assert_eq!(tok.encode("aaaa"), vec![tok.id("aa").unwrap(); 2]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat. the cat ran!", "a dog sat on the mat?"];
        let a = Tokenizer::train(corpus, 60).unwrap();
        let b = Tokenizer::train(corpus, 60).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn specials_are_single_ids() {
        let tok = Tokenizer::train(["plain text here"], 50).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(tok.encode(s), vec![i as TokenId], "{s}");
        }
        let ids = tok.encode("[t] here [/t]");
        assert_eq!(ids.first(), Some(&TOPIC_OPEN));
        assert_eq!(ids.last(), Some(&TOPIC_CLOSE));
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let tok = Tokenizer::train(["abc"], 30).unwrap();
        assert_eq!(tok.encode("z"), vec![UNK]);
    }

    #[test]
    fn pieces_partition_the_text() {
        let text = "  Hello, world.\nNew line!  ";
        assert_eq!(pieces(text).concat(), text);
        assert_eq!(pieces("ab cd"), vec!["ab", " cd"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Tokenizer::train(core::iter::empty(), 40).is_err());
        assert!(Tokenizer::train(["x"], NUM_SPECIAL).is_err());
    }
}
