use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logsumexp, Gradients};

/// Where a candidate set's negatives came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    #[default]
    InBatch,
    Unigram,
    FullVocab,
}

/// A positive target plus its negatives. Duplicates of the positive among
/// the negatives are kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet<T> {
    pub positive: T,
    pub negatives: Vec<T>,
    pub source: NegativeSource,
}

impl<T> CandidateSet<T> {
    /// `|B̃|`, the positive included.
    pub fn len(&self) -> usize {
        1 + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positive first, then negatives.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        std::iter::once(&self.positive).chain(&self.negatives)
    }
}

/// Word-target candidates (vocabulary ids).
pub type TokenCandidates = CandidateSet<u32>;
/// Span-target candidates (indices into the batch's span list).
pub type SpanCandidates = CandidateSet<usize>;

/// Scores `f(a, b̃)` of one positive pair against its candidate set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePair {
    pub positive: f64,
    pub candidates: Vec<f64>,
}

impl ScorePair {
    /// `candidates[0]` is taken as the positive.
    pub fn from_row(candidates: Vec<f64>) -> Self {
        Self {
            positive: candidates[0],
            candidates,
        }
    }

    /// True when no candidate outscores the positive.
    pub fn positive_is_top(&self) -> bool {
        self.candidates.iter().all(|&s| s <= self.positive)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NceValue {
    pub loss: f64,
    pub mi_estimate: f64,
}

/// InfoNCE for one sample: `loss = logsumexp(candidates) − s⁺`,
/// `mi_estimate = log|B̃| − loss ≤ log|B̃|`.
pub fn info_nce(scores: &ScorePair) -> Result<NceValue> {
    if !scores.candidates.contains(&scores.positive) {
        return Err(Error::contract("positive score absent from candidates"));
    }
    if !scores.positive.is_finite() {
        return Err(Error::Domain("positive score must be finite".into()));
    }
    let finite: Vec<f64> = scores
        .candidates
        .iter()
        .copied()
        .filter(|s| *s != f64::NEG_INFINITY)
        .collect();
    let lse = logsumexp(&finite)?;
    let loss = (lse - scores.positive).max(0.0);
    Ok(NceValue {
        loss,
        mi_estimate: (scores.candidates.len() as f64).ln() - loss,
    })
}

/// Softmax cross-entropy over the whole vocabulary.
pub fn full_softmax_ce(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::contract(format!(
            "target {target} outside vocabulary of {}",
            logits.len()
        )));
    }
    Ok(logsumexp(logits)? - logits[target])
}

/// λ weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda_mlm: f64,
    pub lambda_dim: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        // λ_DIM was tuned over {0.4, 0.6, 0.8, 1.0} at full scale.
        Self {
            lambda_mlm: 1.0,
            lambda_dim: 1.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mlm >= 0.0 && self.lambda_dim >= 0.0) {
            return Err(Error::config("objective weights must be ≥ 0"));
        }
        if self.lambda_mlm == 0.0 && self.lambda_dim == 0.0 {
            return Err(Error::config("λ_MLM and λ_DIM cannot both be zero"));
        }
        Ok(())
    }
}

/// Value (and optionally gradients) of one objective over a batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Option<Gradients>,
    /// Per-term scores, in term order.
    pub scores: Vec<ScorePair>,
    /// Set when the batch had no terms and the loss was forced to zero.
    pub empty: bool,
}

impl LossOutput {
    pub fn terms(&self) -> usize {
        self.scores.len()
    }

    /// Fraction of terms whose positive is the top-scoring candidate.
    pub fn accuracy(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        let hits = self.scores.iter().filter(|s| s.positive_is_top()).count();
        hits as f64 / self.scores.len() as f64
    }

    /// Mean per-term InfoNCE estimate.
    pub fn mi_estimate(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .scores
            .iter()
            .map(|s| info_nce(s).map_or(0.0, |v| v.mi_estimate))
            .sum();
        total / self.scores.len() as f64
    }

    pub(crate) fn empty(with_grad: bool, params: &crate::numeric::ParamStore) -> Self {
        Self {
            loss: 0.0,
            grads: with_grad.then(|| Gradients::empty(params)),
            scores: Vec::new(),
            empty: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn equal_scores() {
        let v = info_nce(&ScorePair::from_row(vec![0.3; 4])).unwrap();
        assert_relative_eq!(v.loss, 4f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(v.mi_estimate, 0.0, epsilon = 1e-15);
        let v = info_nce(&ScorePair::from_row(vec![2.5])).unwrap();
        assert_eq!((v.loss, v.mi_estimate), (0.0, 0.0));
    }

    #[test]
    fn closed_form_example() {
        // log(e + 3) − 1
        let expected = (1f64.exp() + 3.0).ln() - 1.0;
        let v = info_nce(&ScorePair::from_row(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_relative_eq!(v.loss, expected, epsilon = 1e-15);
        assert_relative_eq!(v.loss, 0.743_668_380_628_679, epsilon = 1e-12);
    }

    #[test]
    fn missing_positive_is_rejected() {
        let s = ScorePair {
            positive: 9.0,
            candidates: vec![1.0, 2.0],
        };
        assert!(matches!(info_nce(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn full_softmax_cases() {
        assert_relative_eq!(
            full_softmax_ce(&[0.0; 10], 3).unwrap(),
            10f64.ln(),
            epsilon = 1e-15
        );
        assert!(full_softmax_ce(&[0.0; 10], 10).is_err());
        let mut prev = 0.0;
        for margin in [0.0, 1.0, 5.0, 20.0] {
            let mut l = vec![0.0; 5];
            l[0] = -margin;
            let loss = full_softmax_ce(&l, 0).unwrap();
            assert!(loss >= prev);
            prev = loss;
        }
    }

    #[test]
    fn weights_validation() {
        assert!(ObjectiveWeights {
            lambda_mlm: 0.0,
            lambda_dim: 0.0
        }
        .validate()
        .is_err());
        assert!(ObjectiveWeights {
            lambda_mlm: 1.0,
            lambda_dim: -0.1
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn bound_cap(scores in prop::collection::vec(-40.0f64..40.0, 1..64)) {
            let v = info_nce(&ScorePair::from_row(scores.clone())).unwrap();
            prop_assert!(v.mi_estimate <= (scores.len() as f64).ln());
        }

        #[test]
        fn shift_invariance(scores in prop::collection::vec(-10.0f64..10.0, 1..32), c in -50.0f64..50.0) {
            let a = info_nce(&ScorePair::from_row(scores.clone())).unwrap();
            let b = info_nce(&ScorePair::from_row(scores.iter().map(|s| s + c).collect())).unwrap();
            prop_assert!((a.loss - b.loss).abs() < 1e-9);
        }

        #[test]
        fn monotone_in_negatives(scores in prop::collection::vec(-10.0f64..10.0, 1..32), extra in -10.0f64..10.0) {
            let base = info_nce(&ScorePair::from_row(scores.clone())).unwrap();
            let mut more = scores.clone();
            more.push(extra);
            prop_assert!(info_nce(&ScorePair::from_row(more)).unwrap().loss >= base.loss);
            let mut inf = scores.clone();
            inf.push(f64::NEG_INFINITY);
            prop_assert_eq!(info_nce(&ScorePair::from_row(inf)).unwrap().loss, base.loss);
        }
    }
}
