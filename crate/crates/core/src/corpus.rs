//! Newline-delimited text ingestion with a character or whitespace tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{TokenId, TokenSequence, MASK_ID, NUM_SPECIAL, PAD_ID, UNK_ID};

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Char,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Token strings by id. Ids `0..3` are `[PAD]`, `[MASK]`, `[UNK]`; content
/// tokens follow by descending frequency, ties broken by codepoint order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    kind: TokenizerKind,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    kind: TokenizerKind,
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::from_tokens(r.kind, r.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            kind: v.kind,
            tokens: v.tokens,
        }
    }
}

fn split_tokens(kind: TokenizerKind, line: &str) -> Vec<String> {
    match kind {
        TokenizerKind::Char => line.chars().map(String::from).collect(),
        TokenizerKind::Whitespace => line.split_whitespace().map(String::from).collect(),
    }
}

impl Vocabulary {
    /// Counts tokens over `lines` and orders them by frequency, then codepoint.
    pub fn build<'a>(kind: TokenizerKind, lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in split_tokens(kind, line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut content: Vec<(String, usize)> = counts.into_iter().collect();
        // String ordering is codepoint ordering for UTF-8
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .into_iter()
            .map(String::from)
            .chain(content.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(kind, tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(kind: TokenizerKind, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN] {
            return Err(Error::Checkpoint("vocabulary must start with [PAD], [MASK], [UNK]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { kind, tokens, index })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Unknown tokens map to [`UNK_ID`].
    pub fn tokenize(&self, line: &str) -> Vec<TokenId> {
        split_tokens(self.kind, line)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize) on in-vocabulary text; [PAD] is dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        self.join(ids.iter().filter(|&&id| id != PAD_ID).map(|&id| self.token(id).unwrap_or(UNK_TOKEN)))
    }

    /// Like [`detokenize`](Self::detokenize) but keeps every position visible;
    /// in char mode [MASK] and [PAD] render as `_` and `·`.
    pub fn render(&self, ids: &[TokenId]) -> String {
        self.join(ids.iter().map(|&id| match (self.kind, id) {
            (TokenizerKind::Char, MASK_ID) => "_",
            (TokenizerKind::Char, PAD_ID) => "·",
            _ => self.token(id).unwrap_or(UNK_TOKEN),
        }))
    }

    fn join<'a>(&self, toks: impl Iterator<Item = &'a str>) -> String {
        match self.kind {
            TokenizerKind::Char => toks.collect(),
            TokenizerKind::Whitespace => toks.collect::<Vec<_>>().join(" "),
        }
    }

    /// Parses one token written as in the vocabulary, or a bare id prefixed with `#`.
    pub fn parse_token(&self, text: &str) -> Option<TokenId> {
        match text.strip_prefix('#').and_then(|d| d.parse::<TokenId>().ok()) {
            Some(id) if (id as usize) < self.len() => Some(id),
            _ => self.id(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<TokenSequence>,
    pub vocab: Vocabulary,
    pub split: Split,
}

impl Corpus {
    pub fn token_count(&self) -> usize {
        self.documents.iter().map(TokenSequence::content_len).sum()
    }
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits `ids` into `⌈len / max_len⌉` chunks, padding the last with [PAD].
pub fn chunk(ids: &[TokenId], max_len: usize) -> Vec<TokenSequence> {
    ids.chunks(max_len)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(max_len, PAD_ID);
            TokenSequence::new(v)
        })
        .collect()
}

fn documents(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    text.lines()
        .map(|l| vocab.tokenize(l))
        .filter(|ids| !ids.is_empty())
        .flat_map(|ids| chunk(&ids, max_len))
        .collect()
}

/// Reads a training corpus and builds its vocabulary.
pub fn ingest(path: impl AsRef<Path>, kind: TokenizerKind, max_len: usize) -> Result<Corpus> {
    let text = read_lines(path.as_ref())?;
    let vocab = Vocabulary::build(kind, text.lines());
    ingest_text(&text, vocab, max_len, Split::Train)
}

/// Reads a corpus against an existing vocabulary (e.g. a test split).
pub fn ingest_with_vocab(path: impl AsRef<Path>, vocab: &Vocabulary, max_len: usize, split: Split) -> Result<Corpus> {
    let text = read_lines(path.as_ref())?;
    ingest_text(&text, vocab.clone(), max_len, split)
}

pub fn ingest_text(text: &str, vocab: Vocabulary, max_len: usize, split: Split) -> Result<Corpus> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be positive".into()));
    }
    let documents = documents(text, &vocab, max_len);
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus { documents, vocab, split })
}
