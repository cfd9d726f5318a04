use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::masking::{apply_span_masks, select_mlm_targets, MlmConfig};
use crate::objectives::{dim_loss, mlm_nce_loss, ScorePair};
use crate::text::TokenSequence;
use crate::training::{assemble_inbatch_negatives, span_candidates};

/// z for a two-sided 95% band.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub metric: String,
    pub value: f64,
    /// Candidates per term (mean, for variable sets).
    pub candidates: f64,
    pub samples: usize,
    /// Wilson 95% interval.
    pub band: [f64; 2],
    pub chance: f64,
}

impl ProbeReport {
    pub fn from_scores(metric: &str, scores: &[ScorePair]) -> Self {
        let hits = scores.iter().filter(|s| s.positive_is_top()).count();
        let n = scores.len();
        let candidates = if n == 0 {
            0.0
        } else {
            scores.iter().map(|s| s.candidates.len() as f64).sum::<f64>() / n as f64
        };
        let chance = if n == 0 {
            0.0
        } else {
            scores.iter().map(|s| 1.0 / s.candidates.len() as f64).sum::<f64>() / n as f64
        };
        let (lo, hi) = wilson_interval(hits, n, Z95);
        Self {
            metric: metric.to_string(),
            value: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            candidates,
            samples: n,
            band: [lo, hi],
            chance,
        }
    }

    pub fn hits(&self) -> usize {
        (self.value * self.samples as f64).round() as usize
    }
}

/// Wilson score interval for `hits` successes in `n` trials.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Pearson χ² of hit/miss counts against success probability `p`; returns
/// the statistic and its p-value (1 degree of freedom).
pub fn chance_chi_square(hits: usize, n: usize, p: f64) -> (f64, f64) {
    let n_f = n as f64;
    let (eh, em) = (n_f * p, n_f * (1.0 - p));
    let misses = (n - hits) as f64;
    let stat = (hits as f64 - eh).powi(2) / eh + (misses - em).powi(2) / em;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    (stat, dist.sf(stat))
}

/// Scores for span retrieval: each group draws `candidates` distinct
/// sequences, hides one random span in each and ranks every masked
/// sequence's global representation against all the group's n-grams.
pub fn span_retrieval_scores<R: Rng + ?Sized>(
    model: &EncoderParams,
    sequences: &[TokenSequence],
    candidates: usize,
    groups: usize,
    span_budget: f64,
    rng: &mut R,
) -> Result<Vec<ScorePair>> {
    if candidates < 2 {
        return Err(Error::config("retrieval needs at least two candidates"));
    }
    if sequences.len() < candidates {
        return Err(Error::config(format!(
            "{} held-out sequences cannot supply {candidates} candidates",
            sequences.len()
        )));
    }
    let mut scores = Vec::with_capacity(groups * candidates);
    for _ in 0..groups {
        let picks = index::sample(rng, sequences.len(), candidates);
        let mut spans = Vec::with_capacity(candidates);
        for (slot, i) in picks.iter().enumerate() {
            let mut all = apply_span_masks(&sequences[i].ids, span_budget, rng)?;
            if all.is_empty() {
                return Err(Error::contract("held-out sequence has no maskable word"));
            }
            let k = rng.random_range(0..all.len());
            spans.push(all.swap_remove(k).with_sequence(slot));
        }
        let sets = span_candidates(&spans);
        scores.extend(dim_loss(model, &spans, &sets, false)?.scores);
    }
    Ok(scores)
}

/// Span-retrieval accuracy at a fixed candidate count.
pub fn retrieval_probe<R: Rng + ?Sized>(
    model: &EncoderParams,
    sequences: &[TokenSequence],
    candidates: usize,
    groups: usize,
    rng: &mut R,
) -> Result<ProbeReport> {
    let scores = span_retrieval_scores(model, sequences, candidates, groups, 0.15, rng)?;
    Ok(ProbeReport::from_scores("span_retrieval", &scores))
}

/// Masked-word accuracy against in-batch candidates, `group` sequences at a time.
pub fn mlm_probe<R: Rng + ?Sized>(
    model: &EncoderParams,
    sequences: &[TokenSequence],
    group: usize,
    groups: usize,
    rng: &mut R,
) -> Result<ProbeReport> {
    if group < 2 || sequences.len() < group {
        return Err(Error::config(format!(
            "need ≥ 2 and ≤ {} sequences per group, got {group}",
            sequences.len()
        )));
    }
    let words = crate::text::Vocabulary::NUM_SPECIAL as u32..model.config.vocab_size as u32;
    let mut scores = Vec::new();
    for _ in 0..groups {
        let picks = index::sample(rng, sequences.len(), group);
        let mut examples = Vec::with_capacity(group);
        for (slot, i) in picks.iter().enumerate() {
            if let Ok(ex) =
                select_mlm_targets(&sequences[i].ids, &MlmConfig::default(), words.clone(), rng)
            {
                examples.push(ex.with_sequence(slot));
            }
        }
        let (batch, _) = assemble_inbatch_negatives(examples, Vec::new());
        let out = mlm_nce_loss(model, &batch.token_examples, &batch.token_candidates, false)?;
        scores.extend(out.scores);
    }
    Ok(ProbeReport::from_scores("mlm_accuracy", &scores))
}
