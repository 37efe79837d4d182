//! Teacher-forced perplexity in sequential or random order, and the
//! generation-latency benchmark comparing cached causal decoding with
//! full-recompute bidirectional decoding.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{generate, generate_causal, GenerationConstraints, GenerationOrder, SamplerSpec};
use crate::objectives::{ar_log_probs, order_log_likelihood};
use crate::sequence::TokenSequence;
use crate::transformer::{AttentionMode, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Sequential,
    Random,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Sequential => "sequential",
            EvalMode::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub index: usize,
    /// `-Σ log p` over the sequence's non-pad positions.
    pub nll_sum: f64,
    pub token_count: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub mode: EvalMode,
    pub ppl: f64,
    pub mean_nll: f64,
    pub token_count: usize,
    /// Seed of the per-sequence order streams; `None` in sequential mode.
    pub seed: Option<u64>,
    pub per_sequence: Vec<SequenceScore>,
}

impl PplReport {
    fn from_scores(mode: EvalMode, seed: Option<u64>, per_sequence: Vec<SequenceScore>) -> Result<Self> {
        let token_count: usize = per_sequence.iter().map(|s| s.token_count).sum();
        if token_count == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mean_nll = per_sequence.iter().map(|s| s.nll_sum).sum::<f64>() / token_count as f64;
        Ok(Self {
            mode,
            ppl: mean_nll.exp(),
            mean_nll,
            token_count,
            seed,
            per_sequence,
        })
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:<12} {:>12} {:>10}\n{:<12} {:>12.4} {:>10}\n",
            "mode", "ppl", "tokens", self.mode, self.ppl, self.token_count
        )
    }
}

fn score(index: usize, log_probs: &[f64]) -> SequenceScore {
    let nll_sum = -log_probs.iter().sum::<f64>();
    let token_count = log_probs.len();
    let ppl = if token_count == 0 { 1.0 } else { (nll_sum / token_count as f64).exp() };
    SequenceScore {
        index,
        nll_sum,
        token_count,
        ppl,
    }
}

/// Order stream for sequence `index`: independent of how many sequences
/// precede it or in what order they are scored.
pub fn sequence_order_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generation order used to score `x`: its non-pad positions ascending, or
/// shuffled by the sequence's own stream.
pub fn scoring_order(x: &TokenSequence, mode: EvalMode, seed: u64, index: usize) -> Vec<usize> {
    let mut order = x.content_positions();
    if mode == EvalMode::Random {
        order.shuffle(&mut sequence_order_rng(seed, index));
    }
    order
}

/// Each non-pad token `x_{σ_t}` is scored with the ground truth shown at
/// `σ_1..σ_{t-1}` and [MASK] at the remaining non-pad positions.
pub fn ppl_bidirectional(model: &Transformer, corpus: &[TokenSequence], mode: EvalMode, seed: u64) -> Result<PplReport> {
    model.require_mode(AttentionMode::Bidirectional, "ppl_bidirectional")?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scores = Vec::with_capacity(corpus.len());
    for (i, x) in corpus.iter().enumerate() {
        let order = scoring_order(x, mode, seed, i);
        let lp = if order.is_empty() { Vec::new() } else { order_log_likelihood(model, x, &order)? };
        scores.push(score(i, &lp));
    }
    let seed = (mode == EvalMode::Random).then_some(seed);
    PplReport::from_scores(mode, seed, scores)
}

/// Left-to-right teacher-forced perplexity. Random order is rejected.
pub fn ppl_causal(model: &Transformer, corpus: &[TokenSequence], mode: EvalMode) -> Result<PplReport> {
    model.require_mode(AttentionMode::Causal, "ppl_causal")?;
    if mode == EvalMode::Random {
        return Err(Error::UnsupportedMode(
            "random-order perplexity is unsupported for a causal model: it only conditions on the left context; \
             use sequential mode"
                .into(),
        ));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scores = Vec::with_capacity(corpus.len());
    for (i, x) in corpus.iter().enumerate() {
        scores.push(score(i, &ar_log_probs(model, x)?));
    }
    PplReport::from_scores(mode, None, scores)
}

/// Dispatches on the model's attention mode.
pub fn ppl(model: &Transformer, corpus: &[TokenSequence], mode: EvalMode, seed: u64) -> Result<PplReport> {
    match model.mode() {
        AttentionMode::Bidirectional => ppl_bidirectional(model, corpus, mode, seed),
        AttentionMode::Causal => ppl_causal(model, corpus, mode),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model_kind: String,
    pub sequences: usize,
    pub length: usize,
    pub wall_seconds: f64,
    /// Forward passes run: full-sequence for bidirectional, single-row incremental for causal.
    pub forward_passes: usize,
    /// `wall_seconds` divided by the causal baseline's.
    pub ratio_vs_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBenchmark {
    pub causal: LatencyReport,
    pub bidirectional: LatencyReport,
    pub seed: u64,
}

/// Reference GPU timings for 100 sequences of 128 tokens (seconds).
pub const REFERENCE_CAUSAL_SECONDS: f64 = 105.6;
pub const REFERENCE_BIDIRECTIONAL_SECONDS: f64 = 126.8;

impl LatencyBenchmark {
    /// Two-column table (model, latency) followed by context notes.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "Latency for generating {} {}-length sequences\n",
            self.causal.sequences, self.causal.length
        );
        out.push_str(&format!("{:<36} {:>12}\n", "Model", "Latency (s)"));
        for r in [&self.causal, &self.bidirectional] {
            out.push_str(&format!("{:<36} {:>12.4}\n", r.model_kind, r.wall_seconds));
        }
        out.push_str(&format!(
            "\nratio bidirectional / causal: {:.2}x\n",
            self.bidirectional.ratio_vs_baseline
        ));
        out.push_str(&format!(
            "reference GPU ratio at 100 x 128 tokens: {REFERENCE_BIDIRECTIONAL_SECONDS} s / {REFERENCE_CAUSAL_SECONDS} s = {:.2}x (context only)\n",
            REFERENCE_BIDIRECTIONAL_SECONDS / REFERENCE_CAUSAL_SECONDS
        ));
        out.push_str(
            "per step, the bidirectional model recomputes hidden states of all N positions; \
             the cached causal model computes one new position\n",
        );
        out
    }
}

fn same_size(a: &Transformer, b: &Transformer) -> bool {
    let (a, b) = (a.config(), b.config());
    (a.vocab_size, a.layers, a.heads, a.hidden_size, a.intermediate_size, a.positional_kind)
        == (b.vocab_size, b.layers, b.heads, b.hidden_size, b.intermediate_size, b.positional_kind)
}

/// Times `count` generations of `length` tokens with each model, single-threaded.
pub fn bench_latency(
    causal: &Transformer,
    bidirectional: &Transformer,
    count: usize,
    length: usize,
    sampler: &SamplerSpec,
    seed: u64,
) -> Result<LatencyBenchmark> {
    causal.require_mode(AttentionMode::Causal, "bench_latency (causal model)")?;
    bidirectional.require_mode(AttentionMode::Bidirectional, "bench_latency (bidirectional model)")?;
    if !same_size(causal, bidirectional) {
        return Err(Error::InvalidConfig("latency benchmark needs two models of identical size".into()));
    }
    if count == 0 || length == 0 {
        return Err(Error::InvalidConfig("latency benchmark needs count and length of at least 1".into()));
    }
    let empty = TokenSequence::new(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    for _ in 0..count {
        generate_causal(causal, &empty, length, sampler, &mut rng)?;
    }
    let causal_secs = start.elapsed().as_secs_f64();

    let constraints = GenerationConstraints::new(length);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    for _ in 0..count {
        let order = GenerationOrder::random(&constraints, &mut rng);
        generate(bidirectional, &constraints, &order, sampler, &mut rng)?;
    }
    let bidir_secs = start.elapsed().as_secs_f64();

    let report = |kind: &str, secs: f64| LatencyReport {
        model_kind: kind.into(),
        sequences: count,
        length,
        wall_seconds: secs,
        forward_passes: count * length,
        ratio_vs_baseline: secs / causal_secs,
    };
    Ok(LatencyBenchmark {
        causal: report("causal, cached (GPT-style)", causal_secs),
        bidirectional: report("bidirectional, full recompute (u-PMLM)", bidir_secs),
        seed,
    })
}
