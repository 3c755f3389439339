//! Tokenisation shared by the retriever, the language model and VeriFormer.
//!
//! [`split_tokens`] understands Verilog lexemes (sized literals, two-character
//! operators, comments) and is also good enough for English descriptions.
//! Two vocabularies sit on top of it: [`HashedVocab`] needs no fitting and is
//! used by the retrieval text tower; [`Vocabulary`] is fitted on a corpus and
//! can decode, which generation needs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// FNV-1a over `bytes` seeded with `seed`, finished with a splitmix64 mix.
/// Stable across platforms and compiler versions.
pub fn stable_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const THREE_CHAR_OPS: [&str; 4] = ["===", "!==", "<<<", ">>>"];
const TWO_CHAR_OPS: [&str; 13] = ["<=", ">=", "==", "!=", "&&", "||", "<<", ">>", "~&", "~|", "~^", "^~", "**"];

/// Splits text into lexemes, dropping whitespace and `//` / `/* */` comments.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if text[i..].starts_with("//") {
            i = text[i..].find('\n').map_or(b.len(), |p| i + p);
            continue;
        }
        if text[i..].starts_with("/*") {
            i = text[i + 2..].find("*/").map_or(b.len(), |p| i + 2 + p + 2);
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' || c == b'$' {
            i += 1;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'$') {
                i += 1;
            }
        } else if c.is_ascii_digit() || (c == b'\'' && i + 1 < b.len() && is_base_char(b[i + 1])) {
            while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'_') {
                i += 1;
            }
            if i < b.len() && b[i] == b'\'' {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b's' || b[j] == b'S') {
                    j += 1;
                }
                if j < b.len() && is_base_char(b[j]) {
                    j += 1;
                    while j < b.len() && (b[j].is_ascii_hexdigit() || matches!(b[j], b'_' | b'x' | b'X' | b'z' | b'Z' | b'?')) {
                        j += 1;
                    }
                    i = j;
                }
            }
        } else if let Some(op) = THREE_CHAR_OPS.iter().chain(TWO_CHAR_OPS.iter()).find(|op| text[i..].starts_with(**op)) {
            i += op.len();
        } else {
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
        out.push(&text[start..i]);
    }
    out
}

fn is_base_char(c: u8) -> bool {
    matches!(c, b'b' | b'B' | b'o' | b'O' | b'd' | b'D' | b'h' | b'H')
}

/// Fixed-size vocabulary addressed by hashing lower-cased tokens.
/// Id 0 is padding and never produced by hashing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedVocab {
    pub size: usize,
    pub seed: u64,
}

impl HashedVocab {
    pub const PAD: usize = 0;

    pub fn new(size: usize, seed: u64) -> Self {
        assert!(size >= 2, "hashed vocabulary needs at least two ids");
        HashedVocab { size, seed }
    }

    pub fn id(&self, token: &str) -> usize {
        1 + (stable_hash(self.seed, token.to_lowercase().as_bytes()) % (self.size as u64 - 1)) as usize
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        split_tokens(text).into_iter().take(max_len).map(|t| self.id(t)).collect()
    }
}

/// Corpus-fitted vocabulary with reserved special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    pub const SEP: usize = 4;
    const SPECIALS: [&'static str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

    /// Every token seen at least `min_count` times, ordered by descending
    /// frequency then lexicographically.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for tok in split_tokens(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut items: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = Self::SPECIALS.iter().map(|s| s.to_string()).chain(items.into_iter().map(|(t, _)| t.to_string())).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_tokens(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, stopping at the first `<eos>` and
    /// skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            if id == Self::EOS {
                break;
            }
            if id < Self::SPECIALS.len() {
                continue;
            }
            out.push(self.token(id));
        }
        out.join(" ")
    }
}
