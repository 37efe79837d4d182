//! Pre-LN transformer producing per-position vocabulary logits, in either
//! bidirectional (masked-LM) or causal (left-to-right) attention mode.

mod config;
mod incremental;

pub use config::{AttentionMode, PositionalKind, TransformerConfig};
pub use incremental::KvCache;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::sequence::{TokenId, PAD_ID};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: TransformerConfig,
    params: ParamStore,
}

/// Index of `clamp(j - i, -window, window)` into a `[heads, 2 * window + 1]` table,
/// for every `(head, i, j)` of an `n × n` score matrix.
pub fn relative_bias_indices(heads: usize, n: usize, window: usize) -> Vec<usize> {
    let width = 2 * window + 1;
    let w = window as isize;
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let rel = (j as isize - i as isize).clamp(-w, w) + w;
                idx.push(h * width + rel as usize);
            }
        }
    }
    idx
}

/// Expands a `[heads, 2 * window + 1]` distance table to `[heads, n, n]`.
pub fn relative_attention_bias(table: &Tensor, n: usize, window: usize) -> Result<Tensor> {
    let heads = table.shape()[0];
    if table.shape() != [heads, 2 * window + 1] {
        return Err(Error::ShapeMismatch {
            op: "relative_attention_bias",
            left: table.shape().to_vec(),
            right: vec![heads, 2 * window + 1],
        });
    }
    let data = relative_bias_indices(heads, n, window)
        .into_iter()
        .map(|i| table.data()[i])
        .collect();
    Tensor::new(vec![heads, n, n], data)
}

impl Transformer {
    /// Random init: weights and embeddings ~ N(0, 0.02), biases zero, norms identity.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    pub fn with_init_std(config: TransformerConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut params = ParamStore::default();
        for (name, shape) in config.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else if name.ends_with(".beta") || is_bias(&name) {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Transformer { config, params })
    }

    /// Assembles a model from loaded tensors, checking the name set and shapes.
    pub fn from_parts(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if params.len() != expected.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::InvalidConfig(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(Transformer { config, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn mode(&self) -> AttentionMode {
        self.config.attention_mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn require_mode(&self, expected: AttentionMode, op: &'static str) -> Result<()> {
        if self.mode() == expected {
            Ok(())
        } else {
            Err(Error::AttentionMode {
                op,
                expected: match expected {
                    AttentionMode::Bidirectional => "bidirectional",
                    AttentionMode::Causal => "causal",
                },
            })
        }
    }

    pub fn validate_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some((position, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                position,
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records a forward pass over a batch of equal-length sequences.
    /// Returns logits of shape `[batch * seq_len, vocab_size]`.
    /// Dropout is applied only when `dropout_rng` is given.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&[TokenId]],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = batch.first().map_or(0, |s| s.len());
        if n == 0 {
            return Err(Error::InvalidConfig("forward over an empty sequence".into()));
        }
        for seq in batch {
            if seq.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    left: vec![n],
                    right: vec![seq.len()],
                });
            }
            self.validate_tokens(seq)?;
        }
        let cfg = &self.config;
        let b = batch.len();
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let key_pad: Vec<bool> = batch.iter().flat_map(|s| s.iter().map(|&t| t == PAD_ID)).collect();
        let rate = cfg.dropout_rate;

        let mut x = tape.embedding(bound.get("tok_emb")?, &ids)?;
        let mut bias = None;
        match cfg.positional_kind {
            PositionalKind::Absolute => {
                let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
                let pos = tape.embedding(bound.get("pos_emb")?, &positions)?;
                x = tape.add(x, pos)?;
            }
            PositionalKind::Relative => {
                let idx = relative_bias_indices(cfg.heads, n, cfg.relative_window);
                bias = Some(tape.gather(bound.get("rel_bias")?, idx, vec![cfg.heads, n, n])?);
            }
        }
        x = dropout(tape, x, rate, dropout_rng.as_deref_mut())?;

        let spec = AttentionSpec {
            batch: b,
            seq_len: n,
            heads: cfg.heads,
            causal: cfg.attention_mode == AttentionMode::Causal,
            key_pad,
        };
        for l in 0..cfg.layers {
            let p = |s: &str| bound.get(&format!("layers.{l}.{s}"));
            let h = tape.layer_norm(x, p("ln1.gamma")?, p("ln1.beta")?)?;
            let q = linear(tape, h, p("attn.wq")?, p("attn.bq")?)?;
            let k = linear(tape, h, p("attn.wk")?, p("attn.bk")?)?;
            let v = linear(tape, h, p("attn.wv")?, p("attn.bv")?)?;
            let a = tape.attention(q, k, v, bias, spec.clone())?;
            let o = linear(tape, a, p("attn.wo")?, p("attn.bo")?)?;
            let o = dropout(tape, o, rate, dropout_rng.as_deref_mut())?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, p("ln2.gamma")?, p("ln2.beta")?)?;
            let f = linear(tape, h, p("ffn.w1")?, p("ffn.b1")?)?;
            let f = tape.gelu(f);
            let f = linear(tape, f, p("ffn.w2")?, p("ffn.b2")?)?;
            let f = dropout(tape, f, rate, dropout_rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm(x, bound.get("ln_f.gamma")?, bound.get("ln_f.beta")?)?;
        linear(tape, x, bound.get("head.w")?, bound.get("head.b")?)
    }

    /// Evaluation-mode logits `[seq_len, vocab_size]` for one sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.forward_batch(&[tokens])
    }

    /// Evaluation-mode logits `[batch * seq_len, vocab_size]`.
    pub fn forward_batch(&self, batch: &[&[TokenId]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let logits = self.forward_graph(&mut tape, &bound, batch, None)?;
        Ok(tape.value(logits).clone())
    }
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|last| last.starts_with('b') && last.len() == 2 || last == "b")
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..tape.value(x).numel())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{log_softmax, normalize_row};

    #[test]
    fn bias_names_are_recognised() {
        for name in ["layers.0.attn.bq", "layers.1.ffn.b2", "head.b"] {
            assert!(is_bias(name), "{name}");
        }
        for name in ["layers.0.attn.wq", "tok_emb", "head.w", "ln_f.beta"] {
            assert!(!is_bias(name), "{name}");
        }
    }

    #[test]
    fn rejects_long_sequences_and_bad_ids() {
        let m = Transformer::new(TransformerConfig::tiny(12), 0).unwrap();
        assert!(matches!(m.forward(&[3; 9]), Err(Error::SequenceTooLong { len: 9, .. })));
        assert!(matches!(
            m.forward(&[3, 4, 12]),
            Err(Error::TokenOutOfRange { position: 2, id: 12, .. })
        ));
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let cfg = TransformerConfig::tiny(12).with_mode(AttentionMode::Causal);
        for kind in [PositionalKind::Absolute, PositionalKind::Relative] {
            let m = Transformer::with_init_std(cfg.clone().with_positional(kind), 3, 0.5).unwrap();
            let a = m.forward(&[3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
            let b = m.forward(&[3, 4, 5, 6, 7, 8, 9, 11]).unwrap();
            assert_eq!(a.data()[..7 * 12], b.data()[..7 * 12]);
            assert_ne!(a.row(7), b.row(7));
        }
    }

    #[test]
    fn bidirectional_logits_see_the_last_token() {
        let m = Transformer::new(TransformerConfig::tiny(12), 3).unwrap();
        let a = m.forward(&[3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
        let b = m.forward(&[3, 4, 5, 6, 7, 8, 9, 11]).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn zero_blocks_reduce_to_projected_embeddings() {
        let mut cfg = TransformerConfig::tiny(12);
        cfg.layers = 1;
        cfg.heads = 1;
        let mut m = Transformer::with_init_std(cfg.clone(), 5, 0.3).unwrap();
        for (name, t) in m.params_mut().iter_mut() {
            if name.contains(".attn.") || name.contains(".ffn.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tokens = [3u32, 7, 7, 11];
        let logits = m.forward(&tokens).unwrap();
        let p = m.params();
        let (tok, pos, w, bias) = (
            p.get("tok_emb").unwrap(),
            p.get("pos_emb").unwrap(),
            p.get("head.w").unwrap(),
            p.get("head.b").unwrap(),
        );
        for (i, &t) in tokens.iter().enumerate() {
            let x: Vec<f64> = tok.row(t as usize).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
            let mut normed = vec![0.0; x.len()];
            normalize_row(&x, &mut normed);
            for v in 0..12 {
                let expect: f64 =
                    bias.data()[v] + normed.iter().enumerate().map(|(j, h)| h * w.row(j)[v]).sum::<f64>();
                assert!((logits.row(i)[v] - expect).abs() < 1e-12);
            }
        }
        // rows 1 and 2 share a token but not a position
        assert_ne!(logits.row(1), logits.row(2));
        let _ = log_softmax(logits.row(0));
    }

    #[test]
    fn relative_bias_is_clamped_and_translation_invariant() {
        let width = 5;
        let table = Tensor::new(vec![2, width], (0..2 * width).map(|v| v as f64 * 1.5 - 3.0).collect()).unwrap();
        let n = 5;
        let bias = relative_attention_bias(&table, n, 2).unwrap();
        let at = |h: usize, i: usize, j: usize| bias.data()[(h * n + i) * n + j];
        for h in 0..2 {
            for i in 0..n {
                assert_eq!(at(h, i, i), at(h, 0, 0));
            }
            assert_eq!(at(h, 0, 4), at(h, 0, 3));
            assert_eq!(at(h, 4, 0), at(h, 3, 0));
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    assert_eq!(at(h, i, j), at(h, i + 1, j + 1));
                }
            }
        }
        assert_ne!(at(0, 0, 1), at(1, 0, 1));
    }

    #[test]
    fn dropout_free_forward_is_deterministic() {
        let mut cfg = TransformerConfig::tiny(12);
        cfg.dropout_rate = 0.3;
        let m = Transformer::new(cfg, 9).unwrap();
        let a = m.forward(&[3, 4, 5]).unwrap();
        let b = m.forward(&[3, 4, 5]).unwrap();
        assert_eq!(a, b);
    }
}
