//! Optimizer, learning-rate schedule, batch assembly, the pretraining loop
//! and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderParams, Init, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::{apply_span_masks, select_mlm_targets, MaskedExample, MlmConfig};
use crate::numeric::{Gradients, ParamStore, Tensor};
use crate::objectives::{
    infoword_loss, CandidateSet, NegativeSource, ObjectiveWeights, PretrainBatch,
    SpanCandidates, TokenCandidates,
};
use crate::text::{encode_sequence, read_corpus, TokenSequence, UnigramDistribution, Vocabulary};

/// Optimizer and loop settings.
///
/// Full-scale reference: lr 4e-4, batch 1024, length 512, 400,000 steps
/// with 18,000 warmup steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 90,
            total_steps: 2000,
            batch_size: 16,
            max_len: 128,
            seed: 13,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub lambda_mlm: f64,
    pub lambda_dim: f64,
    pub negatives: NegativeSource,
    /// Negatives per word target when sampling from the unigram distribution.
    pub unigram_negatives: usize,
    pub unigram_power: f64,
    pub mask_rate: f64,
    pub span_budget: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            lambda_mlm: 1.0,
            lambda_dim: 1.0,
            negatives: NegativeSource::InBatch,
            unigram_negatives: 63,
            unigram_power: 1.0,
            mask_rate: 0.15,
            span_budget: 0.15,
        }
    }
}

impl ObjectiveSection {
    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda_mlm: self.lambda_mlm,
            lambda_dim: self.lambda_dim,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// One sentence per line.
    pub corpus: Option<PathBuf>,
    /// Existing vocabulary TSV; built from the corpus when absent.
    pub vocab: Option<PathBuf>,
    pub min_count: u64,
    /// Directory for metrics and checkpoints.
    pub out_dir: Option<PathBuf>,
}

/// The whole run configuration as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub objective: ObjectiveSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate_sections()?;
        Ok(cfg)
    }

    /// Relative data paths are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.corpus, &mut cfg.data.vocab, &mut cfg.data.out_dir]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything except the vocabulary size, which is filled in later.
    pub fn validate_sections(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if t.warmup_steps > t.total_steps {
            return Err(Error::config("warmup_steps must not exceed total_steps"));
        }
        if t.batch_size < 2 {
            return Err(Error::config("batch_size must be ≥ 2"));
        }
        if t.max_len < 2 || t.max_len > self.model.max_positions {
            return Err(Error::config(format!(
                "max_len must lie in [2, max_positions = {}]",
                self.model.max_positions
            )));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps > 0"));
        }
        if !(t.weight_decay >= 0.0 && t.clip_norm > 0.0) {
            return Err(Error::config("weight_decay must be ≥ 0 and clip_norm > 0"));
        }
        let o = &self.objective;
        o.weights().validate()?;
        if !(0.0..=1.0).contains(&o.mask_rate) || !(0.0..=1.0).contains(&o.span_budget) {
            return Err(Error::config("mask_rate and span_budget must lie in [0, 1]"));
        }
        if o.negatives == NegativeSource::Unigram && o.unigram_negatives == 0 {
            return Err(Error::config("unigram negatives need unigram_negatives ≥ 1"));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, p)| Tensor::zeros(p.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

impl From<&TrainSection> for AdamConfig {
    fn from(t: &TrainSection) -> Self {
        Self {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        }
    }
}

/// Bias-corrected Adam step followed by decoupled weight decay.
///
/// Parameters without a gradient are treated as having a zero gradient.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::NonFiniteGradient {
            param: name.to_string(),
        });
    }
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - config.beta1.powf(t);
    let c2 = 1.0 - config.beta2.powf(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_mut(id);
        if m.shape() != p.shape() {
            return Err(Error::contract(format!(
                "moment shape {:?} differs from parameter {:?}",
                m.shape(),
                p.shape()
            )));
        }
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            md[k] = config.beta1 * md[k] + (1.0 - config.beta1) * gk;
            vd[k] = config.beta2 * vd[k] + (1.0 - config.beta2) * gk * gk;
            let mhat = md[k] / c1;
            let vhat = vd[k] / c2;
            pd[k] -= lr * mhat / (vhat.sqrt() + config.eps);
            pd[k] -= lr * config.weight_decay * pd[k];
        }
    }
    Ok(())
}

/// Linear warmup to `lr`, then linear decay to zero at `total_steps`.
pub fn lr_schedule(step: u64, config: &TrainSection) -> f64 {
    let (w, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        0.0
    } else if step < w {
        config.lr * step as f64 / w as f64
    } else if total == w {
        config.lr
    } else {
        config.lr * (total - step) as f64 / (total - w) as f64
    }
}

/// Examples dropped during candidate assembly for lack of negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub token_examples: usize,
    pub span_examples: usize,
}

/// Pairs each target with negatives harvested from the other sequences of
/// the batch. Examples with no other sequence to draw from are dropped.
pub fn assemble_inbatch_negatives(
    token_examples: Vec<MaskedExample>,
    span_examples: Vec<MaskedExample>,
) -> (PretrainBatch, SkipCounts) {
    let mut skipped = SkipCounts::default();
    let has_other = |ex: &[MaskedExample], s: usize| ex.iter().any(|e| e.sequence != s);

    let token_examples: Vec<MaskedExample> = {
        let keep: Vec<bool> = token_examples
            .iter()
            .map(|e| has_other(&token_examples, e.sequence))
            .collect();
        skipped.token_examples = keep.iter().filter(|k| !**k).count();
        token_examples
            .into_iter()
            .zip(keep)
            .filter_map(|(e, k)| k.then_some(e))
            .collect()
    };
    let token_candidates = token_examples
        .iter()
        .map(|e| {
            let negatives: Vec<u32> = token_examples
                .iter()
                .filter(|o| o.sequence != e.sequence)
                .flat_map(|o| o.targets.iter().copied())
                .collect();
            e.targets
                .iter()
                .map(|&t| CandidateSet {
                    positive: t,
                    negatives: negatives.clone(),
                    source: NegativeSource::InBatch,
                })
                .collect()
        })
        .collect();

    let keep: Vec<bool> = span_examples
        .iter()
        .map(|e| has_other(&span_examples, e.sequence))
        .collect();
    skipped.span_examples = keep.iter().filter(|k| !**k).count();
    let span_examples: Vec<MaskedExample> = span_examples
        .into_iter()
        .zip(keep)
        .filter_map(|(e, k)| k.then_some(e))
        .collect();
    let span_candidates = span_candidates(&span_examples);

    (
        PretrainBatch {
            token_examples,
            token_candidates,
            span_examples,
            span_candidates,
        },
        skipped,
    )
}

/// Each span against every span of the other sequences.
pub fn span_candidates(spans: &[MaskedExample]) -> Vec<SpanCandidates> {
    (0..spans.len())
        .map(|k| CandidateSet {
            positive: k,
            negatives: (0..spans.len())
                .filter(|&j| spans[j].sequence != spans[k].sequence)
                .collect(),
            source: NegativeSource::InBatch,
        })
        .collect()
}

/// Candidate sets with `k` negatives drawn from the unigram distribution.
pub fn unigram_candidates<R: rand::Rng + ?Sized>(
    examples: &[MaskedExample],
    dist: &UnigramDistribution,
    k: usize,
    rng: &mut R,
) -> Vec<Vec<TokenCandidates>> {
    examples
        .iter()
        .map(|e| {
            e.targets
                .iter()
                .map(|&t| CandidateSet {
                    positive: t,
                    negatives: (0..k).map(|_| dist.sample(rng)).collect(),
                    source: NegativeSource::Unigram,
                })
                .collect()
        })
        .collect()
}

/// One line of the metrics stream. Absent terms serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mlm: Option<f64>,
    pub loss_dim: Option<f64>,
    pub acc_mlm: Option<f64>,
    pub acc_dim: Option<f64>,
}

/// Tokenizes sentences and maps them to id sequences, dropping ones with no words.
pub fn prepare_sequences<S: AsRef<str>>(
    sentences: &[Vec<S>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.is_empty() {
            continue;
        }
        out.push(encode_sequence(s, vocab, max_len)?);
    }
    Ok(out)
}

/// Reads `data.corpus`, loads or builds the vocabulary and encodes every sentence.
pub fn load_corpus(config: &TrainConfig) -> Result<(Vocabulary, Vec<TokenSequence>)> {
    let path = config
        .data
        .corpus
        .as_ref()
        .ok_or_else(|| Error::config("data.corpus is not set"))?;
    let sentences = read_corpus(BufReader::new(File::open(path)?))?;
    let vocab = match &config.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(sentences.iter().flatten(), config.data.min_count)?,
    };
    let sequences = prepare_sequences(&sentences, &vocab, config.train.max_len)?;
    Ok((vocab, sequences))
}

/// Owns the model, optimizer state and the master RNG.
///
/// All randomness (batch sampling, masking, negatives) is drawn from one
/// ChaCha8 stream, so the seed, config and corpus fix the whole run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: EncoderParams,
    pub adam: AdamState,
    pub vocab: Vocabulary,
    step: u64,
    rng: ChaCha8Rng,
    sequences: Vec<TokenSequence>,
    unigram: Option<UnigramDistribution>,
}

impl Trainer {
    pub fn new(
        mut config: TrainConfig,
        vocab: Vocabulary,
        sequences: Vec<TokenSequence>,
    ) -> Result<Self> {
        config.model.vocab_size = vocab.len();
        config.validate_sections()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = EncoderParams::new(config.model.clone(), Init::Normal, &mut rng)?;
        let adam = AdamState::new(&model.params);
        Self::assemble(config, model, adam, vocab, 0, rng, sequences)
    }

    /// Continues a run from a checkpoint; `sequences` must be the same corpus.
    pub fn resume(ckpt: Checkpoint, sequences: Vec<TokenSequence>) -> Result<Self> {
        let model = ckpt.encoder()?;
        let rng = ckpt.rng.to_rng();
        Self::assemble(ckpt.config, model, ckpt.adam, ckpt.vocab, ckpt.step, rng, sequences)
    }

    fn assemble(
        config: TrainConfig,
        model: EncoderParams,
        adam: AdamState,
        vocab: Vocabulary,
        step: u64,
        rng: ChaCha8Rng,
        sequences: Vec<TokenSequence>,
    ) -> Result<Self> {
        if sequences.len() < config.train.batch_size {
            return Err(Error::config(format!(
                "corpus has {} sequences, fewer than batch_size {}",
                sequences.len(),
                config.train.batch_size
            )));
        }
        let unigram = match config.objective.negatives {
            NegativeSource::Unigram => Some(UnigramDistribution::new(
                &vocab,
                config.objective.unigram_power,
            )?),
            _ => None,
        };
        Ok(Self {
            config,
            model,
            adam,
            vocab,
            step,
            rng,
            sequences,
            unigram,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    /// Draws the next batch of view pairs and their candidates.
    pub fn next_batch(&mut self) -> Result<(PretrainBatch, SkipCounts)> {
        let b = self.config.train.batch_size;
        let picks = rand::seq::index::sample(&mut self.rng, self.sequences.len(), b);
        let mlm = MlmConfig {
            rate: self.config.objective.mask_rate,
            ..MlmConfig::default()
        };
        let words = self.vocab.word_ids();
        let mut tokens = Vec::with_capacity(b);
        let mut spans = Vec::new();
        let mut empty = 0;
        for (slot, idx) in picks.iter().enumerate() {
            let ids = &self.sequences[idx].ids;
            match select_mlm_targets(ids, &mlm, words.clone(), &mut self.rng) {
                Ok(ex) => tokens.push(ex.with_sequence(slot)),
                Err(_) => empty += 1,
            }
            for ex in apply_span_masks(ids, self.config.objective.span_budget, &mut self.rng)? {
                spans.push(ex.with_sequence(slot));
            }
        }
        let (mut batch, mut skipped) = assemble_inbatch_negatives(tokens, spans);
        skipped.token_examples += empty;
        if let Some(dist) = &self.unigram {
            batch.token_candidates = unigram_candidates(
                &batch.token_examples,
                dist,
                self.config.objective.unigram_negatives,
                &mut self.rng,
            );
        }
        Ok((batch, skipped))
    }

    /// One optimizer step. On a non-finite loss nothing is updated.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let (batch, _) = self.next_batch()?;
        let out = infoword_loss(&self.model, &batch, self.config.objective.weights(), true)?;
        let next = self.step + 1;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: next });
        }
        let mut grads = out.grads.expect("gradients requested");
        grads.clip_global_norm(self.config.train.clip_norm);
        let lr = lr_schedule(next, &self.config.train);
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            &AdamConfig::from(&self.config.train),
            lr,
        )?;
        self.step = next;
        Ok(StepMetrics {
            step: next,
            lr,
            loss_total: out.loss,
            loss_mlm: out.mlm.as_ref().map(|o| o.loss),
            loss_dim: out.dim.as_ref().map(|o| o.loss),
            acc_mlm: out.mlm.as_ref().map(|o| o.accuracy()),
            acc_dim: out.dim.as_ref().map(|o| o.accuracy()),
        })
    }

    /// Runs until `total_steps`, handing each record to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        while self.step < self.config.train.total_steps {
            let m = self.train_step()?;
            sink(self, &m)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            vocab: self.vocab.clone(),
        }
    }
}

/// Files produced by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Full pretraining run writing `metrics.jsonl` and checkpoints under `out_dir`.
///
/// On a non-finite loss the last good state is saved before the error is returned.
pub fn train(
    config: TrainConfig,
    vocab: Vocabulary,
    sequences: Vec<TokenSequence>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(config, vocab, sequences)?;
    let metrics = out_dir.join(METRICS_FILE);
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let mut writer = BufWriter::new(File::create(&metrics)?);
    let every = trainer.config.train.checkpoint_every;
    let mut final_loss = None;
    let result = trainer.run(|t, m| {
        serde_json::to_writer(&mut writer, m)?;
        writer.write_all(b"\n")?;
        final_loss = Some(m.loss_total);
        if every > 0 && m.step % every == 0 {
            writer.flush()?;
            t.checkpoint().save(out_dir.join(format!("checkpoint-{}.bin", m.step)))?;
        }
        Ok(())
    });
    writer.flush()?;
    trainer.checkpoint().save(&checkpoint)?;
    result?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        steps: trainer.step_count(),
        final_loss,
    })
}

#[cfg(test)]
mod tests;
