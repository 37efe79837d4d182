use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::NUM_SPECIAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Bidirectional => "bidirectional",
            AttentionMode::Causal => "causal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// Learned table added to the token embeddings.
    Absolute,
    /// Learned per-head attention bias indexed by clamped relative distance.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Includes the reserved [PAD]/[MASK]/[UNK] ids.
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub dropout_rate: f64,
    pub attention_mode: AttentionMode,
    pub positional_kind: PositionalKind,
    pub relative_window: usize,
}

impl TransformerConfig {
    /// Desk-scale default: trains on one CPU core in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            max_len: 64,
            layers: 2,
            heads: 4,
            hidden_size: 64,
            intermediate_size: 256,
            dropout_rate: 0.1,
            attention_mode: AttentionMode::Bidirectional,
            positional_kind: PositionalKind::Absolute,
            relative_window: 16,
        }
    }

    /// BERT-base sized model.
    pub fn base(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            max_len: 128,
            layers: 12,
            heads: 12,
            hidden_size: 768,
            intermediate_size: 3072,
            dropout_rate: 0.1,
            attention_mode: AttentionMode::Bidirectional,
            positional_kind: PositionalKind::Absolute,
            relative_window: 32,
        }
    }

    /// Small configuration used by gradient and equivalence checks.
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            max_len: 8,
            layers: 2,
            heads: 2,
            hidden_size: 16,
            intermediate_size: 32,
            dropout_rate: 0.0,
            attention_mode: AttentionMode::Bidirectional,
            positional_kind: PositionalKind::Absolute,
            relative_window: 4,
        }
    }

    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.attention_mode = mode;
        self
    }

    pub fn with_positional(mut self, kind: PositionalKind) -> Self {
        self.positional_kind = kind;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.heads == 0 || self.hidden_size % self.heads != 0 {
            return bad(format!(
                "hidden_size {} is not divisible by heads {}",
                self.hidden_size, self.heads
            ));
        }
        if self.vocab_size < NUM_SPECIAL + 1 {
            return bad(format!(
                "vocab_size {} must be at least 4 ([PAD], [MASK] and content tokens)",
                self.vocab_size
            ));
        }
        if self.layers == 0 || self.max_len == 0 || self.intermediate_size == 0 {
            return bad("layers, max_len and intermediate_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.positional_kind == PositionalKind::Relative && self.relative_window == 0 {
            return bad("relative_window must be at least 1".into());
        }
        Ok(())
    }

    /// Exact parameter name set and shapes implied by this config.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (h, i, v) = (self.hidden_size, self.intermediate_size, self.vocab_size);
        let mut shapes = BTreeMap::new();
        let mut add = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        add("tok_emb".into(), vec![v, h]);
        match self.positional_kind {
            PositionalKind::Absolute => add("pos_emb".into(), vec![self.max_len, h]),
            PositionalKind::Relative => {
                add("rel_bias".into(), vec![self.heads, 2 * self.relative_window + 1])
            }
        }
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            add(p("ln1.gamma"), vec![h]);
            add(p("ln1.beta"), vec![h]);
            for w in ["wq", "wk", "wv", "wo"] {
                add(p(&format!("attn.{w}")), vec![h, h]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                add(p(&format!("attn.{b}")), vec![h]);
            }
            add(p("ln2.gamma"), vec![h]);
            add(p("ln2.beta"), vec![h]);
            add(p("ffn.w1"), vec![h, i]);
            add(p("ffn.b1"), vec![i]);
            add(p("ffn.w2"), vec![i, h]);
            add(p("ffn.b2"), vec![h]);
        }
        add("ln_f.gamma".into(), vec![h]);
        add("ln_f.beta".into(), vec![h]);
        add("head.w".into(), vec![h, v]);
        add("head.b".into(), vec![v]);
        shapes
    }
}
