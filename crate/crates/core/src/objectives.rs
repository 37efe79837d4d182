//! Scoring objectives: left-to-right autoregressive, fixed-pattern masked,
//! probabilistically masked (sampled and exactly enumerated), and the
//! autoregressive objective averaged over every generation order.
//!
//! All values are mean negative log-likelihoods in nats.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{enumerate_masks, sample_mask, MaskPattern, MaskingPrior};
use crate::sequence::{TokenId, TokenSequence, MASK_ID};
use crate::tensor::log_softmax;
use crate::transformer::{AttentionMode, Transformer};

/// Longest sequence [`pmlm_exact_loss`] enumerates (`2^N` forwards).
pub const MAX_EXACT_PMLM_LEN: usize = 8;
/// Longest sequence [`aplm_exact_loss`] enumerates (`N!` orders).
pub const MAX_EXACT_APLM_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub token_count: usize,
}

/// What to do when a sampled mask pattern selects no position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyMaskPolicy {
    /// Draw one more `(r, M)`; if that is empty too the instance contributes nothing.
    #[default]
    ResampleOnce,
    /// The instance contributes nothing.
    ZeroLoss,
}

/// Input of a causal model for scoring `x`: the sequence shifted right by
/// one with [`MASK_ID`] as the start symbol, so row `n` predicts `x[n]`.
pub fn causal_input(x: &[TokenId]) -> Vec<TokenId> {
    let mut input = Vec::with_capacity(x.len());
    input.push(MASK_ID);
    input.extend_from_slice(&x[..x.len().saturating_sub(1)]);
    input
}

/// `log p(target[i] | ·)` read off row `positions[i]` of `logits`.
fn gather_log_probs(logits: &crate::Tensor, row_offset: usize, positions: &[usize], x: &[TokenId]) -> Vec<f64> {
    positions
        .iter()
        .map(|&p| log_softmax(logits.row(row_offset + p))[x[p] as usize])
        .collect()
}

/// `Σ_n log p(x_n | x_<n)` over non-pad positions, teacher-forced.
pub fn ar_log_probs(model: &Transformer, x: &TokenSequence) -> Result<Vec<f64>> {
    model.require_mode(AttentionMode::Causal, "ar_loss")?;
    let logits = model.forward(&causal_input(x.ids()))?;
    Ok(gather_log_probs(&logits, 0, &x.content_positions(), x.ids()))
}

pub fn ar_loss(model: &Transformer, x: &TokenSequence) -> Result<LossValue> {
    let lp = ar_log_probs(model, x)?;
    Ok(mean_nll(&lp))
}

fn mean_nll(log_probs: &[f64]) -> LossValue {
    let n = log_probs.len();
    let value = if n == 0 { 0.0 } else { -log_probs.iter().sum::<f64>() / n as f64 };
    LossValue { value, token_count: n }
}

/// `log p(x_π | X_{-Π})` for every masked position of `pattern`.
pub fn masked_log_probs(model: &Transformer, x: &TokenSequence, pattern: &MaskPattern) -> Result<Vec<f64>> {
    model.require_mode(AttentionMode::Bidirectional, "mlm_loss")?;
    check_pattern(x, pattern)?;
    let input = x.masked_at(pattern.positions().iter().copied());
    let logits = model.forward(&input)?;
    Ok(gather_log_probs(&logits, 0, pattern.positions(), x.ids()))
}

fn check_pattern(x: &TokenSequence, pattern: &MaskPattern) -> Result<()> {
    if pattern.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "mask pattern",
            left: vec![x.len()],
            right: vec![pattern.len()],
        });
    }
    if let Some(&p) = pattern.positions().iter().find(|&&p| x.is_pad(p)) {
        return Err(Error::InvalidGeneration(format!("pad position {p} is masked")));
    }
    Ok(())
}

/// `-(1/K) Σ_k log p(x_{π_k} | X_{-Π})`.
pub fn mlm_loss(model: &Transformer, x: &TokenSequence, pattern: &MaskPattern) -> Result<LossValue> {
    if pattern.k() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(mean_nll(&masked_log_probs(model, x, pattern)?))
}

/// Draws `r` from the prior and then an i.i.d. mask, applying `policy` when
/// nothing gets masked.
pub fn sample_training_mask<R: Rng + ?Sized>(
    prior: &MaskingPrior,
    rng: &mut R,
    pad_flags: &[bool],
    policy: EmptyMaskPolicy,
) -> MaskPattern {
    let draw = |rng: &mut R| sample_mask(prior.sample_ratio(rng), rng, pad_flags);
    let pattern = draw(rng);
    match policy {
        EmptyMaskPolicy::ResampleOnce if pattern.k() == 0 => draw(rng),
        _ => pattern,
    }
}

/// One Monte-Carlo sample of the probabilistically masked objective.
///
/// A single `(r, M)` is drawn; an empty pattern scores zero with no tokens,
/// which keeps the estimator unbiased for [`pmlm_exact_loss`].
pub fn pmlm_training_step<R: Rng + ?Sized>(
    model: &Transformer,
    x: &TokenSequence,
    prior: &MaskingPrior,
    rng: &mut R,
) -> Result<LossValue> {
    let pattern = sample_training_mask(prior, rng, &x.pad_flags(), EmptyMaskPolicy::ZeroLoss);
    if pattern.k() == 0 {
        model.require_mode(AttentionMode::Bidirectional, "pmlm_training_step")?;
        return Ok(LossValue { value: 0.0, token_count: 0 });
    }
    mlm_loss(model, x, &pattern)
}

fn require_unpadded(x: &TokenSequence, op: &str) -> Result<()> {
    if x.content_len() != x.len() {
        return Err(Error::InvalidGeneration(format!("{op} expects an unpadded sequence")));
    }
    if x.is_empty() {
        return Err(Error::InvalidGeneration(format!("{op} expects a non-empty sequence")));
    }
    Ok(())
}

/// `Σ_M α_M · (1/K) Σ_k log p(x_{π_k} | X_{-Π})`, with the `K = 0` term zero.
/// This is the expected log-likelihood (non-positive).
pub fn pmlm_exact_log_likelihood(model: &Transformer, x: &TokenSequence, prior: &MaskingPrior) -> Result<f64> {
    model.require_mode(AttentionMode::Bidirectional, "pmlm_exact_loss")?;
    require_unpadded(x, "pmlm_exact_loss")?;
    let n = x.len();
    if n > MAX_EXACT_PMLM_LEN {
        return Err(Error::EnumerationLimit {
            what: "exact masked objective",
            n,
            limit: MAX_EXACT_PMLM_LEN,
        });
    }
    let patterns: Vec<MaskPattern> = enumerate_masks(n)?.into_iter().filter(|m| m.k() > 0).collect();
    let inputs: Vec<Vec<TokenId>> = patterns
        .iter()
        .map(|m| x.masked_at(m.positions().iter().copied()))
        .collect();
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = model.forward_batch(&refs)?;
    let mut total = 0.0;
    for (b, m) in patterns.iter().enumerate() {
        let alpha = prior.log_alpha(n, m.k()).exp();
        if alpha == 0.0 {
            continue;
        }
        let lp = gather_log_probs(&logits, b * n, m.positions(), x.ids());
        total += alpha * lp.iter().sum::<f64>() / m.k() as f64;
    }
    Ok(total)
}

pub fn pmlm_exact_loss(model: &Transformer, x: &TokenSequence, prior: &MaskingPrior) -> Result<LossValue> {
    let ll = pmlm_exact_log_likelihood(model, x, prior)?;
    Ok(LossValue {
        value: -ll,
        token_count: x.len(),
    })
}

/// Lexicographic successor of `perm`; `false` once the last permutation is reached.
pub fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = (1..perm.len()).rev().find(|&i| perm[i - 1] < perm[i]) else {
        return false;
    };
    let j = (i..perm.len()).rev().find(|&j| perm[j] > perm[i - 1]).expect("successor exists");
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// All `n!` orders of `0..n`, lexicographically.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut all = vec![perm.clone()];
    while next_permutation(&mut perm) {
        all.push(perm.clone());
    }
    all
}

/// `Σ_t log p(x_{σ_t} | x_{σ_1}, …, x_{σ_{t-1}})` for one order, each
/// conditional evaluated with the revealed positions shown and the rest masked.
pub fn order_log_likelihood(model: &Transformer, x: &TokenSequence, order: &[usize]) -> Result<Vec<f64>> {
    model.require_mode(AttentionMode::Bidirectional, "order_log_likelihood")?;
    let n = x.len();
    let inputs: Vec<Vec<TokenId>> = (0..order.len())
        .map(|t| x.masked_at(order[t..].iter().copied()))
        .collect();
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = model.forward_batch(&refs)?;
    Ok(order
        .iter()
        .enumerate()
        .map(|(t, &pos)| log_softmax(logits.row(t * n + pos))[x.ids()[pos] as usize])
        .collect())
}

/// Mean over all `N!` orders of the total log-likelihood `Σ_t log p(x_{σ_t} | …)`.
pub fn aplm_mean_log_likelihood(model: &Transformer, x: &TokenSequence) -> Result<f64> {
    model.require_mode(AttentionMode::Bidirectional, "aplm_exact_loss")?;
    require_unpadded(x, "aplm_exact_loss")?;
    let n = x.len();
    if n > MAX_EXACT_APLM_LEN {
        return Err(Error::EnumerationLimit {
            what: "exact permutation objective",
            n,
            limit: MAX_EXACT_APLM_LEN,
        });
    }
    let orders = permutations(n);
    let mut total = 0.0;
    for order in &orders {
        total += order_log_likelihood(model, x, order)?.iter().sum::<f64>();
    }
    Ok(total / orders.len() as f64)
}

/// `-(1/(N · N!)) Σ_σ Σ_t log p(x_{σ_t} | x_{σ_1}, …, x_{σ_{t-1}})`.
pub fn aplm_exact_loss(model: &Transformer, x: &TokenSequence) -> Result<LossValue> {
    let mean = aplm_mean_log_likelihood(model, x)?;
    Ok(LossValue {
        value: -mean / x.len() as f64,
        token_count: x.len(),
    })
}
