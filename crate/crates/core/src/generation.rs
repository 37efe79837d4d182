//! Generation in an arbitrary order: start from an all-[MASK] sequence with
//! optional anchor tokens, then repeatedly run a full bidirectional forward
//! and fill one position chosen by the order.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{is_special, TokenId, TokenSequence, MASK_ID, PAD_ID};
use crate::transformer::{AttentionMode, KvCache, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    Random,
    LeftToRight,
    Explicit,
}

/// The sequence of (0-based) positions to fill. Anchor positions are not part
/// of the order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOrder {
    pub sigma: Vec<usize>,
    pub mode: OrderMode,
}

impl GenerationOrder {
    /// Uniformly random order over the positions not fixed by `constraints`.
    pub fn random<R: Rng + ?Sized>(constraints: &GenerationConstraints, rng: &mut R) -> Self {
        let mut sigma = constraints.free_positions();
        sigma.shuffle(rng);
        Self { sigma, mode: OrderMode::Random }
    }

    pub fn left_to_right(constraints: &GenerationConstraints) -> Self {
        Self {
            sigma: constraints.free_positions(),
            mode: OrderMode::LeftToRight,
        }
    }

    pub fn explicit(sigma: Vec<usize>) -> Self {
        Self { sigma, mode: OrderMode::Explicit }
    }

    fn validate(&self, constraints: &GenerationConstraints) -> Result<()> {
        let free = constraints.free_positions();
        let mut seen = BTreeSet::new();
        for &p in &self.sigma {
            if p >= constraints.target_length {
                return Err(Error::InvalidGeneration(format!(
                    "order position {} is outside 1..{}",
                    p + 1,
                    constraints.target_length
                )));
            }
            if constraints.anchors.contains_key(&p) {
                return Err(Error::InvalidGeneration(format!("order position {} is an anchor", p + 1)));
            }
            if !seen.insert(p) {
                return Err(Error::InvalidGeneration(format!("order repeats position {}", p + 1)));
            }
        }
        if seen.len() != free.len() {
            return Err(Error::InvalidGeneration(format!(
                "order covers {} of {} free positions",
                seen.len(),
                free.len()
            )));
        }
        if self.mode == OrderMode::LeftToRight && self.sigma != free {
            return Err(Error::InvalidGeneration("left-to-right order is not ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationConstraints {
    /// 0-based position → token.
    pub anchors: BTreeMap<usize, TokenId>,
    pub target_length: usize,
}

impl GenerationConstraints {
    pub fn new(target_length: usize) -> Self {
        Self {
            anchors: BTreeMap::new(),
            target_length,
        }
    }

    pub fn with_anchors(target_length: usize, anchors: BTreeMap<usize, TokenId>) -> Self {
        Self { anchors, target_length }
    }

    pub fn free_positions(&self) -> Vec<usize> {
        (0..self.target_length).filter(|p| !self.anchors.contains_key(p)).collect()
    }

    /// The starting snapshot: anchors in place, [MASK] everywhere else.
    pub fn initial_snapshot(&self) -> Vec<TokenId> {
        let mut s = vec![MASK_ID; self.target_length];
        for (&p, &t) in &self.anchors {
            s[p] = t;
        }
        s
    }

    fn validate(&self, model: &Transformer) -> Result<()> {
        if self.target_length == 0 {
            return Err(Error::InvalidGeneration("target length must be positive".into()));
        }
        let max_len = model.config().max_len;
        if self.target_length > max_len {
            return Err(Error::SequenceTooLong {
                len: self.target_length,
                max_len,
            });
        }
        for (&p, &t) in &self.anchors {
            if p >= self.target_length {
                return Err(Error::InvalidGeneration(format!(
                    "anchor position {} is outside 1..{}",
                    p + 1,
                    self.target_length
                )));
            }
            if t == MASK_ID || t == PAD_ID {
                return Err(Error::InvalidGeneration(format!("anchor at position {} is a [MASK] or [PAD] token", p + 1)));
            }
        }
        model.validate_tokens(&self.initial_snapshot())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStep {
    /// 1-based step index.
    pub step: usize,
    /// 0-based position filled at this step.
    pub position: usize,
    pub token: TokenId,
    /// Sequence after this step, with [MASK] at positions still unfilled.
    pub snapshot: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub constraints: GenerationConstraints,
    pub steps: Vec<GenerationStep>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    position: usize,
    token: TokenId,
    text: &'a str,
    snapshot: &'a str,
}

impl GenerationTrace {
    /// One JSON object per step (`step`, 1-based `position`, `token`, `text`,
    /// `snapshot`), rendered with `render`.
    pub fn to_json_lines(&self, render: impl Fn(&[TokenId]) -> String) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            let text = render(&[s.token]);
            let snapshot = render(&s.snapshot);
            let line = TraceLine {
                step: s.step,
                position: s.position + 1,
                token: s.token,
                text: &text,
                snapshot: &snapshot,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Table layout: one row per step with its position and snapshot.
    pub fn to_table(&self, render: impl Fn(&[TokenId]) -> String) -> String {
        let mut out = String::from("step  position  snapshot\n");
        for s in &self.steps {
            out.push_str(&format!("{:>4}  {:>8}  {}\n", s.step, s.position + 1, render(&s.snapshot)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    Greedy,
    Temperature { temperature: f64 },
    TopK { k: usize, temperature: f64 },
}

impl Default for SamplerSpec {
    /// Demo default; tests use [`SamplerSpec::Greedy`].
    fn default() -> Self {
        SamplerSpec::TopK { k: 40, temperature: 1.0 }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplerSpec::Greedy => Ok(()),
            SamplerSpec::Temperature { temperature } | SamplerSpec::TopK { temperature, .. }
                if !(temperature > 0.0 && temperature.is_finite()) =>
            {
                Err(Error::InvalidSampler(format!("temperature must be positive, got {temperature}")))
            }
            SamplerSpec::TopK { k: 0, .. } => Err(Error::InvalidSampler("k must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Draws a token id from one logit row, never returning an id in `excluded`.
/// Greedy ties go to the smallest id.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    sampler: &SamplerSpec,
    excluded: &[TokenId],
    rng: &mut R,
) -> Result<TokenId> {
    sampler.validate()?;
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidSampler("logits must be finite".into()));
    }
    let mut candidates: Vec<usize> = (0..logits.len()).filter(|&i| !excluded.contains(&(i as TokenId))).collect();
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    // best first; equal logits keep ascending id order
    candidates.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let (pool, temperature) = match *sampler {
        SamplerSpec::Greedy => return Ok(candidates[0] as TokenId),
        SamplerSpec::Temperature { temperature } => (&candidates[..], temperature),
        SamplerSpec::TopK { k, temperature } => (&candidates[..k.min(candidates.len())], temperature),
    };
    let top = logits[pool[0]];
    let weights: Vec<f64> = pool.iter().map(|&i| ((logits[i] - top) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidSampler(e.to_string()))?;
    Ok(pool[dist.sample(rng)] as TokenId)
}

/// Token ids generation never emits.
pub fn special_ids(vocab_size: usize) -> Vec<TokenId> {
    (0..vocab_size as TokenId).filter(|&t| is_special(t)).collect()
}

/// Fills every non-anchor position in `order`, one full forward per step.
pub fn generate<R: Rng + ?Sized>(
    model: &Transformer,
    constraints: &GenerationConstraints,
    order: &GenerationOrder,
    sampler: &SamplerSpec,
    rng: &mut R,
) -> Result<(TokenSequence, GenerationTrace)> {
    model.require_mode(AttentionMode::Bidirectional, "generate")?;
    sampler.validate()?;
    constraints.validate(model)?;
    order.validate(constraints)?;
    let excluded = special_ids(model.config().vocab_size);
    let mut snapshot = constraints.initial_snapshot();
    let mut steps = Vec::with_capacity(order.sigma.len());
    for (t, &pos) in order.sigma.iter().enumerate() {
        let logits = model.forward(&snapshot)?;
        let token = sample_token(logits.row(pos), sampler, &excluded, rng)?;
        snapshot[pos] = token;
        steps.push(GenerationStep {
            step: t + 1,
            position: pos,
            token,
            snapshot: snapshot.clone(),
        });
    }
    let trace = GenerationTrace {
        constraints: constraints.clone(),
        steps,
    };
    Ok((TokenSequence::new(snapshot), trace))
}

/// Keeps `prompt` at the front and fills the rest left to right.
pub fn generate_left_to_right<R: Rng + ?Sized>(
    model: &Transformer,
    prompt: &TokenSequence,
    target_length: usize,
    sampler: &SamplerSpec,
    rng: &mut R,
) -> Result<TokenSequence> {
    if prompt.len() >= target_length {
        return Err(Error::InvalidGeneration(format!(
            "prompt length {} must be below the target length {target_length}",
            prompt.len()
        )));
    }
    let anchors = prompt.ids().iter().copied().enumerate().collect();
    let constraints = GenerationConstraints::with_anchors(target_length, anchors);
    let order = GenerationOrder::left_to_right(&constraints);
    Ok(generate(model, &constraints, &order, sampler, rng)?.0)
}

/// Left-to-right generation with a causal model, one cached incremental step
/// per position.
pub fn generate_causal<R: Rng + ?Sized>(
    model: &Transformer,
    prompt: &TokenSequence,
    target_length: usize,
    sampler: &SamplerSpec,
    rng: &mut R,
) -> Result<TokenSequence> {
    model.require_mode(AttentionMode::Causal, "generate_causal")?;
    sampler.validate()?;
    if prompt.len() >= target_length {
        return Err(Error::InvalidGeneration(format!(
            "prompt length {} must be below the target length {target_length}",
            prompt.len()
        )));
    }
    if target_length > model.config().max_len {
        return Err(Error::SequenceTooLong {
            len: target_length,
            max_len: model.config().max_len,
        });
    }
    let excluded = special_ids(model.config().vocab_size);
    let mut tokens = prompt.ids().to_vec();
    // row `t` of [MASK, x_0, .., x_{t-1}] predicts x_t
    let mut input = vec![MASK_ID];
    input.extend_from_slice(&tokens);
    let mut cache = KvCache::new();
    while tokens.len() < target_length {
        let logits = model.forward_incremental(&input, &mut cache)?;
        let token = sample_token(&logits, sampler, &excluded, rng)?;
        tokens.push(token);
        input.push(token);
    }
    Ok(TokenSequence::new(tokens))
}

/// Re-derives every step of a greedy trace from the anchors and the trace's
/// own earlier steps. Returns the first step (1-based) that fails to
/// reproduce, or `None` if all do.
pub fn replay_greedy_trace(model: &Transformer, trace: &GenerationTrace) -> Result<Option<usize>> {
    model.require_mode(AttentionMode::Bidirectional, "replay_greedy_trace")?;
    trace.constraints.validate(model)?;
    let excluded = special_ids(model.config().vocab_size);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut state = trace.constraints.initial_snapshot();
    for s in &trace.steps {
        let logits = model.forward(&state)?;
        let token = sample_token(logits.row(s.position), &SamplerSpec::Greedy, &excluded, &mut rng)?;
        state[s.position] = s.token;
        if token != s.token || state != s.snapshot {
            return Ok(Some(s.step));
        }
    }
    Ok(None)
}
