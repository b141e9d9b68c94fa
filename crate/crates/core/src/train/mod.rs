//! Contrastive retriever pretraining and joint training of the whole
//! model with periodic knowledge-base refresh.

mod checkpoint;
mod contrastive;
mod optim;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{dump_state, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use contrastive::{contrastive_loss, in_batch_accuracy, info_nce, pretrain_pairs, InfoNce, PretrainPair};
pub use optim::{clip_grad_norm, lr_schedule, Adam};

use crate::error::{Error, Result};
use crate::generator::CandidateSet;
use crate::index::MemoryIndex;
use crate::math::{Gradients, Tape};
use crate::model::Model;
use crate::retrieve::{refresh, retrieve_candidates, RetrievedCandidate, SearchMode};
use crate::text::vocab::is_structural;
use crate::text::{encode_query, encode_target, ExampleRecord, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Records per optimizer step, accumulated one record at a time.
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub top_k: usize,
    /// Steps between knowledge-base refreshes; 0 disables refresh.
    pub refresh_interval: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub precision: Precision,
    /// Freeze the memory encoder and never refresh the index.
    pub reduced: bool,
    pub search: SearchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 64,
            warmup_steps: 2000,
            total_steps: 12000,
            top_k: 5,
            refresh_interval: 500,
            temperature: 0.1,
            seed: 0,
            grad_clip: 0.1,
            precision: Precision::F64,
            reduced: false,
            search: SearchMode::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub lambda_mean: Option<f64>,
    /// In joint training, the fraction of records with a candidate sharing a
    /// target bigram; in pretraining, in-batch retrieval accuracy.
    pub retrieval_hit_rate: f64,
}

/// A training record with its inputs already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct JointExample {
    /// Record id, matched against knowledge-base keys for gold exclusion.
    pub key: String,
    pub query: TokenSequence,
    pub target: TokenSequence,
}

pub fn joint_examples(records: &[ExampleRecord], vocab: &Vocabulary, max_len: usize, max_target_len: usize) -> Vec<JointExample> {
    records
        .iter()
        .map(|r| JointExample {
            key: r.id.clone(),
            query: encode_query(r, vocab, max_len),
            target: encode_target(r, vocab, max_target_len),
        })
        .collect()
}

/// Shuffles example indices once per pass and hands out fixed-size batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Ingestion("no training examples".into()));
        }
        let mut s = Self {
            order: (0..n).collect(),
            cursor: 0,
            batch: batch.clamp(1, n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct RecordOutcome {
    grads: Gradients,
    loss: f64,
    lambda_sum: f64,
    lambda_count: usize,
    hit: bool,
}

/// Whether any candidate contains a content bigram of the target.
fn shares_target_bigram(cands: &[RetrievedCandidate], target: &[u32]) -> bool {
    let content: Vec<u32> = target.iter().copied().filter(|&t| !is_structural(t)).collect();
    let wanted: HashSet<(u32, u32)> = content.windows(2).map(|w| (w[0], w[1])).collect();
    cands
        .iter()
        .any(|c| c.token_ids.windows(2).any(|w| wanted.contains(&(w[0], w[1]))))
}

fn record_outcome(model: &Model, index: &MemoryIndex, ex: &JointExample, config: &TrainConfig, weight: f64) -> Result<RecordOutcome> {
    let mut tape = Tape::new(&model.params);
    let query = model.query.encode(&mut tape, &ex.query)?;
    let exclusions: HashSet<u64> = index.id_for_key(&ex.key).into_iter().collect();
    let cands = retrieve_candidates(&mut tape, model, index, query.cls_unit, config.top_k, &exclusions, config.search)?;
    let hit = shares_target_bigram(&cands, &ex.target.ids);
    let source = model.source.encode(&mut tape, &ex.query)?.states;
    let set = CandidateSet::from_candidates(&mut tape, &cands)?;
    let rl = model.generator.record_loss(&mut tape, &ex.target, source, set.as_ref())?;
    let loss = tape.item(rl.loss)?;
    let (lambda_sum, lambda_count) = match rl.lambda {
        Some(l) => {
            let v = tape.value(l).data();
            (v.iter().sum(), v.len())
        }
        None => (0.0, 0),
    };
    let scaled = tape.scale(rl.loss, weight);
    let grads = tape.backward(scaled)?.params;
    Ok(RecordOutcome {
        grads,
        loss,
        lambda_sum,
        lambda_count,
        hit,
    })
}

/// Parameters, optimizer state and step counter for one training phase.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub step: u64,
    pub phase: Phase,
}

impl Trainer {
    /// Fresh optimizer at step 0. In reduced joint training the memory
    /// encoder is frozen.
    pub fn new(mut model: Model, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        model.freeze_memory_encoder(phase == Phase::Joint && config.reduced);
        let optimizer = Adam::new(&model.params);
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
            phase,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, &self.config)
    }

    fn apply(&mut self, mut grads: Gradients) -> Result<(f64, f64)> {
        let norm = clip_grad_norm(&mut grads, &self.model.params, self.config.grad_clip)?;
        let lr = self.lr();
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok((norm, lr))
    }

    /// One in-batch contrastive update of the query and memory encoders.
    pub fn contrastive_pretrain_step(&mut self, pairs: &[PretrainPair]) -> Result<StepLog> {
        let (loss, accuracy, grads) = {
            let mut tape = Tape::new(&self.model.params);
            let (l, scores) = contrastive_loss(&mut tape, &self.model, pairs, self.config.temperature)?;
            let loss = tape.item(l.total)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite contrastive loss {loss}")));
            }
            let accuracy = in_batch_accuracy(tape.value(scores));
            (loss, accuracy, tape.backward(l.total)?.params)
        };
        let (grad_norm, lr) = self.apply(grads)?;
        Ok(StepLog {
            step: self.step,
            loss,
            lr,
            grad_norm,
            lambda_mean: None,
            retrieval_hit_rate: accuracy,
        })
    }

    /// One optimizer step over `batch`, accumulating per-record gradients of
    /// the mean sequence loss. The index is refreshed after every
    /// `refresh_interval`-th step unless training is reduced.
    pub fn joint_train_step(&mut self, batch: &[JointExample], index: &mut MemoryIndex) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros_like(&self.model.params);
        let (mut loss, mut lambda_sum, mut lambda_count, mut hits) = (0.0, 0.0, 0usize, 0usize);
        let chunk = rayon::current_num_threads().max(1);
        for group in batch.chunks(chunk) {
            let outcomes: Vec<RecordOutcome> = group
                .par_iter()
                .map(|ex| record_outcome(&self.model, index, ex, &self.config, weight))
                .collect::<Result<_>>()?;
            // summed in record order so results do not depend on thread count
            for o in outcomes {
                grads.accumulate(&o.grads)?;
                loss += o.loss * weight;
                lambda_sum += o.lambda_sum;
                lambda_count += o.lambda_count;
                hits += usize::from(o.hit);
            }
        }
        let (grad_norm, lr) = self.apply(grads)?;
        let interval = self.config.refresh_interval as u64;
        if !self.config.reduced && interval > 0 && self.step.is_multiple_of(interval) {
            refresh(index, &self.model.memory, &self.model.params)?;
            log::info!("refreshed index at step {} (epoch {})", self.step, index.epoch());
        }
        Ok(StepLog {
            step: self.step,
            loss,
            lr,
            grad_norm,
            lambda_mean: (lambda_count > 0).then(|| lambda_sum / lambda_count as f64),
            retrieval_hit_rate: hits as f64 / batch.len() as f64,
        })
    }
}

fn emit(log: &mut Option<&mut dyn Write>, entry: &StepLog) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        serde_json::to_writer(&mut *w, entry)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Runs `steps` pretraining updates over seeded shuffled batches.
pub fn run_pretraining(
    trainer: &mut Trainer,
    pairs: &[PretrainPair],
    steps: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepLog>> {
    let mut sampler = BatchSampler::new(pairs.len(), trainer.config.batch_size, trainer.config.seed)?;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<PretrainPair> = sampler.next_batch().into_iter().map(|i| pairs[i].clone()).collect();
        let entry = trainer.contrastive_pretrain_step(&batch)?;
        emit(&mut log, &entry)?;
        out.push(entry);
    }
    Ok(out)
}

/// Runs `steps` joint updates. A numeric failure writes the current
/// parameters and optimizer state under `dump_dir` before returning.
pub fn run_joint_training(
    trainer: &mut Trainer,
    examples: &[JointExample],
    index: &mut MemoryIndex,
    steps: usize,
    mut log: Option<&mut dyn Write>,
    dump_dir: Option<&Path>,
) -> Result<Vec<StepLog>> {
    let mut sampler = BatchSampler::new(examples.len(), trainer.config.batch_size, trainer.config.seed ^ 0x5eed)?;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<JointExample> = sampler.next_batch().into_iter().map(|i| examples[i].clone()).collect();
        let entry = match trainer.joint_train_step(&batch, index) {
            Ok(e) => e,
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = dump_dir {
                    dump_state(dir, trainer, &e)?;
                    log::error!("numeric failure at step {}, state written to {}", trainer.step, dir.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        emit(&mut log, &entry)?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::retrieve::{build_index, memory_corpus};

    fn toy_records(n: usize) -> Vec<ExampleRecord> {
        (0..n)
            .map(|i| {
                ExampleRecord::new(
                    format!("r{i}"),
                    format!("source about topic{i} and shared words"),
                    vec![format!("reference {i} mentions topic{i}")],
                    format!("summary of topic{i} with detail{i}"),
                )
            })
            .collect()
    }

    fn toy_model(vocab: &Vocabulary) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: vocab.len(),
                d_model: 8,
                heads: 2,
                layers: 1,
                max_len: 32,
                max_target_len: 16,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 3,
            warmup_steps: 0,
            total_steps: 100,
            top_k: 2,
            refresh_interval: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let err = |c: TrainConfig| matches!(c.validate(), Err(Error::Configuration(_)));
        assert!(err(TrainConfig { warmup_steps: 10, total_steps: 5, ..config() }));
        assert!(err(TrainConfig { top_k: 0, ..config() }));
        assert!(err(TrainConfig { temperature: 0.0, ..config() }));
    }

    #[test]
    fn precision_rejects_unsupported_modes() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"precision":"f64"}"#).is_ok());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"precision":"f16"}"#).is_err());
    }

    #[test]
    fn sampler_covers_each_example_once_per_pass() {
        let mut s = BatchSampler::new(7, 3, 1).unwrap();
        let mut seen: Vec<usize> = (0..7).flat_map(|_| s.next_batch()).take(7).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn pretraining_needs_two_pairs() {
        let recs = toy_records(2);
        let vocab = Vocabulary::build(&recs, 200, 1).unwrap();
        let mut t = Trainer::new(toy_model(&vocab), config(), Phase::Pretrain).unwrap();
        let pairs = pretrain_pairs(&recs, &vocab, 32);
        assert!(matches!(t.contrastive_pretrain_step(&pairs[..1]), Err(Error::Configuration(_))));
        let log = t.contrastive_pretrain_step(&pairs).unwrap();
        assert_eq!(log.step, 1);
        assert!(log.loss.is_finite());
    }

    #[test]
    fn joint_training_refreshes_and_is_deterministic() {
        let recs = toy_records(5);
        let vocab = Vocabulary::build(&recs, 200, 1).unwrap();
        let run = || {
            let model = toy_model(&vocab);
            let docs = memory_corpus(&recs, &vocab, 32);
            let mut index = build_index(&docs, &model.memory, &model.params).unwrap();
            let mut t = Trainer::new(model, config(), Phase::Joint).unwrap();
            let ex = joint_examples(&recs, &vocab, 32, 16);
            let logs = run_joint_training(&mut t, &ex, &mut index, 4, None, None).unwrap();
            (logs, index.epoch())
        };
        let (a, epoch) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(epoch, 2);
        for l in &a {
            let lam = l.lambda_mean.unwrap();
            assert!(lam > 0.0 && lam < 1.0);
        }
    }

    #[test]
    fn reduced_mode_freezes_memory_and_skips_refresh() {
        let recs = toy_records(4);
        let vocab = Vocabulary::build(&recs, 200, 1).unwrap();
        let model = toy_model(&vocab);
        let docs = memory_corpus(&recs, &vocab, 32);
        let mut index = build_index(&docs, &model.memory, &model.params).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { reduced: true, refresh_interval: 1, ..config() };
        let mut t = Trainer::new(model, cfg, Phase::Joint).unwrap();
        let ex = joint_examples(&recs, &vocab, 32, 16);
        run_joint_training(&mut t, &ex, &mut index, 2, None, None).unwrap();
        assert_eq!(index.epoch(), 0);
        let mut moved = false;
        for ((_, p), (_, q)) in t.model.params.iter().zip(before.iter()) {
            if p.name.starts_with("memory.") {
                assert_eq!(p.value, q.value, "{}", p.name);
            } else if p.value != q.value {
                moved = true;
            }
        }
        assert!(moved);
    }

    #[test]
    fn underflow_propagates() {
        let recs = toy_records(2);
        let vocab = Vocabulary::build(&recs, 200, 1).unwrap();
        let model = toy_model(&vocab);
        let docs = memory_corpus(&recs, &vocab, 32);
        let mut index = build_index(&docs, &model.memory, &model.params).unwrap();
        // two documents, one excluded as gold, two requested
        let mut t = Trainer::new(model, config(), Phase::Joint).unwrap();
        let ex = joint_examples(&recs, &vocab, 32, 16);
        assert!(matches!(
            t.joint_train_step(&ex[..1], &mut index),
            Err(Error::RetrievalUnderflow { requested: 2, shortfall: 1 })
        ));
    }
}
