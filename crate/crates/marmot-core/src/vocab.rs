//! Word-level vocabulary and tokenizer.
//!
//! Tokenization is deliberately simple: lowercase, then split into maximal
//! alphanumeric runs, dropping punctuation. Ids 0..4 are reserved for the
//! special tokens `[PAD] [UNK] [CLS] [SEP] [MASK]`; unknown words map to
//! `[UNK]`. The on-disk format is one token per line, line number = id.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary must start with {RESERVED:?}; entry {index} is {found:?}")]
    MissingReserved { index: usize, found: String },
    #[error("duplicate token {token:?} at id {index}")]
    Duplicate { token: String, index: usize },
    #[error("vocabulary file is empty")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from the full token list, which must begin with [`RESERVED`].
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        for (index, want) in RESERVED.iter().enumerate() {
            match tokens.get(index) {
                Some(t) if t == want => {}
                other => {
                    return Err(VocabError::MissingReserved {
                        index,
                        found: other.cloned().unwrap_or_default(),
                    })
                }
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate {
                    token: t.clone(),
                    index: i,
                });
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved tokens followed by `words`, in order.
    pub fn from_words(words: &[&str]) -> Result<Self, VocabError> {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|s| s.to_string()))
            .collect();
        Vocab::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token string for an id; out-of-range ids render as `[UNK]`.
    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        Vocab::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Lowercase, split on whitespace/punctuation boundaries, map through the
/// vocabulary with `[UNK]` fallback, truncate to `max_len` tokens.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let lower = text.to_lowercase();
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<usize>| {
        if !word.is_empty() {
            ids.push(vocab.id_of(word).unwrap_or(UNK));
            word.clear();
        }
    };
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut ids);
        }
    }
    flush(&mut word, &mut ids);
    ids.truncate(max_len);
    ids
}
