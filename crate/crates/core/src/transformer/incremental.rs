//! Key/value-cached decoding for causal models: each new position runs one
//! row through the stack and attends over the cached keys and values.

use super::{AttentionMode, PositionalKind, Transformer};
use crate::error::{Error, Result};
use crate::sequence::{TokenId, PAD_ID};
use crate::tensor::{gelu, gemm, normalize_row, softmax_in_place, Tensor};

#[derive(Debug, Clone, Default)]
pub struct KvCache {
    tokens: Vec<TokenId>,
    /// Per layer: `[len, hidden]` rows, flattened.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
        self.keys.clear();
        self.values.clear();
    }
}

fn row_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n];
    gemm(1, k, n, x, false, w.data(), false, &mut out, false);
    out.iter_mut().zip(b.data()).for_each(|(o, bi)| *o += bi);
    out
}

fn row_layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    normalize_row(x, &mut out);
    for ((o, g), b) in out.iter_mut().zip(gamma.data()).zip(beta.data()) {
        *o = *o * g + b;
    }
    out
}

impl Transformer {
    /// Logits for the last position of `prefix`, reusing `cache` for every
    /// position already processed. If `prefix` does not extend the cached
    /// tokens the cache is rebuilt from scratch.
    pub fn forward_incremental(&self, prefix: &[TokenId], cache: &mut KvCache) -> Result<Vec<f64>> {
        self.require_mode(AttentionMode::Causal, "forward_incremental")?;
        if prefix.is_empty() {
            return Err(Error::InvalidConfig("incremental forward over an empty prefix".into()));
        }
        self.validate_tokens(prefix)?;
        if cache.len() > prefix.len() || prefix[..cache.len()] != cache.tokens[..] {
            cache.clear();
        }
        if cache.keys.is_empty() {
            cache.keys = vec![Vec::new(); self.config.layers];
            cache.values = vec![Vec::new(); self.config.layers];
        }
        let mut last = Vec::new();
        if cache.len() == prefix.len() {
            // recompute the final row without appending
            let pos = prefix.len() - 1;
            let mut trimmed = KvCache {
                tokens: cache.tokens[..pos].to_vec(),
                keys: cache.keys.iter().map(|k| k[..pos * self.config.hidden_size].to_vec()).collect(),
                values: cache.values.iter().map(|v| v[..pos * self.config.hidden_size].to_vec()).collect(),
            };
            return self.step(prefix[pos], &mut trimmed);
        }
        for &tok in &prefix[cache.len()..] {
            last = self.step(tok, cache)?;
        }
        Ok(last)
    }

    fn step(&self, token: TokenId, cache: &mut KvCache) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let p = &self.params;
        let pos = cache.len();
        let hidden = cfg.hidden_size;
        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        cache.tokens.push(token);
        let mut x = p.get("tok_emb")?.row(token as usize).to_vec();
        if cfg.positional_kind == PositionalKind::Absolute {
            for (xi, pi) in x.iter_mut().zip(p.get("pos_emb")?.row(pos)) {
                *xi += pi;
            }
        }
        let rel = match cfg.positional_kind {
            PositionalKind::Relative => Some(p.get("rel_bias")?),
            PositionalKind::Absolute => None,
        };
        let w = cfg.relative_window as isize;
        let width = 2 * cfg.relative_window + 1;
        for l in 0..cfg.layers {
            let g = |s: &str| p.get(&format!("layers.{l}.{s}"));
            let h = row_layer_norm(&x, g("ln1.gamma")?, g("ln1.beta")?);
            let q = row_linear(&h, g("attn.wq")?, g("attn.bq")?);
            let k = row_linear(&h, g("attn.wk")?, g("attn.bk")?);
            let v = row_linear(&h, g("attn.wv")?, g("attn.bv")?);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut attn = vec![0.0; hidden];
            let mut scores = vec![0.0; pos + 1];
            for head in 0..cfg.heads {
                let qh = &q[head * d..(head + 1) * d];
                for (j, s) in scores.iter_mut().enumerate() {
                    if cache.tokens[j] == PAD_ID {
                        *s = f64::NEG_INFINITY;
                        continue;
                    }
                    let kh = &keys[j * hidden + head * d..j * hidden + (head + 1) * d];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if let Some(table) = rel {
                        let r = (j as isize - pos as isize).clamp(-w, w) + w;
                        *s += table.data()[head * width + r as usize];
                    }
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[head * d..(head + 1) * d];
                for (j, &pj) in scores.iter().enumerate() {
                    let vh = &values[j * hidden + head * d..j * hidden + (head + 1) * d];
                    for (o, vv) in out.iter_mut().zip(vh) {
                        *o += pj * vv;
                    }
                }
            }
            let o = row_linear(&attn, g("attn.wo")?, g("attn.bo")?);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = row_layer_norm(&x, g("ln2.gamma")?, g("ln2.beta")?);
            let mut f = row_linear(&h, g("ffn.w1")?, g("ffn.b1")?);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let f = row_linear(&f, g("ffn.w2")?, g("ffn.b2")?);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let h = row_layer_norm(&x, p.get("ln_f.gamma")?, p.get("ln_f.beta")?);
        Ok(row_linear(&h, p.get("head.w")?, p.get("head.b")?))
    }
}
