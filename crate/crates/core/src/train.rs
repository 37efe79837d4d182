//! Mini-batch training: sampled-mask objective for bidirectional models,
//! left-to-right objective for causal ones, Adam updates, JSONL loss log and
//! periodic checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::config::{RunConfig, TrainingConfig};
use crate::corpus::{ingest, Vocabulary};
use crate::error::{Error, Result};
use crate::masking::MaskingPrior;
use crate::objectives::{causal_input, sample_training_mask, EmptyMaskPolicy};
use crate::optim::OptimizerState;
use crate::sequence::{TokenId, TokenSequence};
use crate::transformer::{AttentionMode, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Batch loss in nats per predicted token.
    pub loss: f64,
    /// Positions that contributed to the loss.
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: Transformer,
    optimizer: OptimizerState,
    prior: Option<MaskingPrior>,
    policy: EmptyMaskPolicy,
    batch_size: usize,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Transformer, training: &TrainingConfig, prior: Option<MaskingPrior>) -> Result<Self> {
        match (model.mode(), prior) {
            (AttentionMode::Causal, Some(_)) => {
                return Err(Error::InvalidConfig("a causal model is trained without a masking prior".into()))
            }
            (AttentionMode::Bidirectional, None) => {
                return Err(Error::InvalidConfig("a bidirectional model needs a masking prior".into()))
            }
            _ => {}
        }
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(training.seed);
        dropout_rng.set_stream(1);
        Ok(Self {
            model,
            optimizer: OptimizerState::new(training.adam()),
            prior,
            policy: training.empty_mask_policy,
            batch_size: training.batch_size,
            data_rng: ChaCha8Rng::seed_from_u64(training.seed),
            dropout_rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn into_model(self) -> Transformer {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Inputs, per-row targets and per-row loss weights for one batch.
    fn build_batch(&mut self, batch: &[&TokenSequence]) -> (Vec<Vec<TokenId>>, Vec<Option<usize>>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        match self.prior {
            Some(prior) => {
                // each instance contributes its mean over masked positions
                let b = batch.len() as f64;
                for x in batch {
                    let m = sample_training_mask(&prior, &mut self.data_rng, &x.pad_flags(), self.policy);
                    let w = if m.k() == 0 { 0.0 } else { 1.0 / (b * m.k() as f64) };
                    for (p, &id) in x.ids().iter().enumerate() {
                        let masked = m.is_masked(p);
                        targets.push(masked.then_some(id as usize));
                        weights.push(if masked { w } else { 0.0 });
                    }
                    inputs.push(x.masked_at(m.positions().iter().copied()));
                }
            }
            None => {
                let total: usize = batch.iter().map(|x| x.content_len()).sum();
                let w = 1.0 / total.max(1) as f64;
                for x in batch {
                    for (p, &id) in x.ids().iter().enumerate() {
                        let content = !x.is_pad(p);
                        targets.push(content.then_some(id as usize));
                        weights.push(if content { w } else { 0.0 });
                    }
                    inputs.push(causal_input(x.ids()));
                }
            }
        }
        (inputs, targets, weights)
    }

    /// Samples a batch from `docs`, takes one optimizer step and returns its loss.
    /// A batch with no scored position is recorded with zero loss and no update.
    pub fn step(&mut self, docs: &[TokenSequence]) -> Result<LossRecord> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        self.step += 1;
        let batch: Vec<&TokenSequence> = (0..self.batch_size)
            .map(|_| &docs[self.data_rng.random_range(0..docs.len())])
            .collect();
        let (inputs, targets, weights) = self.build_batch(&batch);
        let tokens = targets.iter().filter(|t| t.is_some()).count();
        if tokens == 0 {
            return Ok(LossRecord {
                step: self.step,
                loss: 0.0,
                tokens,
            });
        }
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let logits = self.model.forward_graph(&mut tape, &bound, &refs, Some(&mut self.dropout_rng))?;
        let loss = tape.nll(logits, &targets, &weights)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        tape.backward(loss)?;
        let params = self.model.params_mut();
        params.zero_grad();
        params.absorb_grads(&tape, &bound)?;
        self.optimizer.step(params).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::NonFiniteLoss { step: self.step },
            e => e,
        })?;
        Ok(LossRecord {
            step: self.step,
            loss: value,
            tokens,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    pub checkpoint: PathBuf,
    pub vocab: Vocabulary,
    pub model: Transformer,
}

/// Ingests the training corpus, trains for the configured steps and writes
/// the checkpoint (also at step 0 and every `checkpoint_every` steps) and
/// the loss log. On a non-finite loss the run stops and the checkpoint file
/// keeps the last good parameters.
pub fn train(config: &RunConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<TrainSummary> {
    config.validate()?;
    let corpus = ingest(&config.corpus.train, config.tokenizer, config.model.max_len)?;
    let mut model_config = config.model.clone();
    model_config.vocab_size = corpus.vocab.len();
    let model = Transformer::new(model_config, config.training.seed)?;
    let mut trainer = Trainer::new(model, &config.training, config.prior)?;

    if let Some(dir) = config.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &config.loss_log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?), path))
        }
        None => None,
    };
    let save = |m: &Transformer| checkpoint::save(&config.checkpoint, m, Some(&corpus.vocab));
    save(trainer.model())?;

    let mut records = Vec::with_capacity(config.training.steps);
    for _ in 0..config.training.steps {
        let record = trainer.step(&corpus.documents)?;
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&path, e))?;
        }
        on_step(&record);
        records.push(record);
        let every = config.training.checkpoint_every;
        if every > 0 && record.step % every == 0 {
            save(trainer.model())?;
            if let Some((w, path)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    save(trainer.model())?;
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainSummary {
        records,
        checkpoint: config.checkpoint.clone(),
        vocab: corpus.vocab,
        model: trainer.into_model(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;
    use crate::PAD_ID;

    fn training(seed: u64) -> TrainingConfig {
        TrainingConfig {
            steps: 10,
            batch_size: 4,
            learning_rate: 1e-2,
            seed,
            weight_decay: 0.0,
            empty_mask_policy: EmptyMaskPolicy::ResampleOnce,
            checkpoint_every: 0,
        }
    }

    fn docs() -> Vec<TokenSequence> {
        vec![
            TokenSequence::new(vec![3, 4, 5, 6, 7, 8, 9, 10]),
            TokenSequence::new(vec![4, 5, 6, 7, PAD_ID, PAD_ID, PAD_ID, PAD_ID]),
        ]
    }

    #[test]
    fn prior_must_match_the_attention_mode() {
        let causal = Transformer::new(TransformerConfig::tiny(12).with_mode(AttentionMode::Causal), 0).unwrap();
        assert!(Trainer::new(causal, &training(0), Some(MaskingPrior::Uniform)).is_err());
        let bidir = Transformer::new(TransformerConfig::tiny(12), 0).unwrap();
        assert!(Trainer::new(bidir, &training(0), None).is_err());
    }

    #[test]
    fn steps_reduce_the_loss_and_are_deterministic() {
        for (mode, prior) in [
            (AttentionMode::Causal, None),
            (AttentionMode::Bidirectional, Some(MaskingPrior::point_mass(0.5).unwrap())),
        ] {
            let run = || {
                let m = Transformer::new(TransformerConfig::tiny(12).with_mode(mode), 1).unwrap();
                let mut t = Trainer::new(m, &training(3), prior).unwrap();
                (0..60).map(|_| t.step(&docs()).unwrap().loss).collect::<Vec<_>>()
            };
            let a = run();
            assert_eq!(a, run());
            let head: f64 = a[..10].iter().sum();
            let tail: f64 = a[50..].iter().sum();
            assert!(tail < head, "{mode}: {head} -> {tail}");
        }
    }

    #[test]
    fn non_finite_parameters_abort_the_step() {
        let mut m = Transformer::new(TransformerConfig::tiny(12).with_mode(AttentionMode::Causal), 0).unwrap();
        m.params_mut().get_mut("head.b").unwrap().data_mut()[3] = f64::NAN;
        let mut t = Trainer::new(m, &training(0), None).unwrap();
        assert!(matches!(t.step(&docs()), Err(Error::NonFiniteLoss { step: 1 })));
    }
}
