//! Text side of the pipeline: tokenization, vocabulary, word embeddings,
//! recurrent sentence/keyword encoders, and the n-gram similarity scorers
//! that drive the adaptive margin.

pub mod gru;
pub mod score;

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot encode an empty token sequence")]
    EmptyText,
    #[error("no keyword phrases supplied")]
    NoKeywords,
    #[error("empty reference set")]
    EmptyReferences,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("vocabulary i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercase word tokens; never contains empty or punctuation-only entries.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        debug_assert!(tokens
            .iter()
            .all(|t| !t.is_empty() && t.chars().any(char::is_alphanumeric)));
        Self(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join(" "))
    }
}

/// Lowercase, strip punctuation (any non-alphanumeric character acts as a
/// separator), split on the resulting boundaries. An empty result is valid.
pub fn tokenize(raw: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenSeq(tokens)
}

/// Token-to-index map with index 0 reserved for unknown words. Indices
/// above zero follow first-seen order, which keeps rebuilds stable.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    words: Vec<String>,
}

pub const UNKNOWN_INDEX: usize = 0;

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            index: HashMap::new(),
            words: Vec::new(),
        }
    }

    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSeq>) -> Self {
        let mut vocab = Self::new();
        for seq in seqs {
            for token in seq.iter() {
                vocab.insert(token);
            }
        }
        vocab
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&ix) = self.index.get(token) {
            return ix;
        }
        self.words.push(token.to_string());
        let ix = self.words.len(); // index 0 stays reserved
        self.index.insert(token.to_string(), ix);
        ix
    }

    /// Index of a token, or 0 for unknown words.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_INDEX)
    }

    /// Number of rows an embedding table needs (including the unknown slot).
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One token per line; line number equals index minus one.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut f = std::fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let f = std::fs::File::open(path)?;
        let mut vocab = Self::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                vocab.insert(&line);
            }
        }
        Ok(vocab)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let mut vocab = Self::new();
        for w in words {
            vocab.insert(&w);
        }
        vocab
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Word embedding matrix, one row per vocabulary index (row 0 is the
/// unknown token). Shared between the sentence and keyword branches.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: Tensor,
    dim: usize,
}

impl EmbeddingTable {
    pub fn seeded(vocab: &Vocabulary, dim: usize, rng: &mut crate::rng::Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            rows: rng.tensor(&[vocab.len(), dim], scale),
            dim,
        }
    }

    pub fn from_tensor(rows: Tensor) -> Result<Self, TensorError> {
        if rows.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "EmbeddingTable::from_tensor",
                reason: format!("expected V x dim matrix, got {:?}", rows.shape()),
            });
        }
        let dim = rows.shape()[1];
        Ok(Self { rows, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_rows(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn embed(&self, index: usize) -> Tensor {
        let ix = if index < self.vocab_rows() { index } else { UNKNOWN_INDEX };
        let start = ix * self.dim;
        Tensor::vector(self.rows.data()[start..start + self.dim].to_vec())
    }

    pub fn embed_sequence(&self, vocab: &Vocabulary, seq: &TokenSeq) -> Vec<Tensor> {
        seq.iter().map(|t| self.embed(vocab.lookup(t))).collect()
    }
}
