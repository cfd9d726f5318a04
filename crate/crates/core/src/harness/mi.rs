use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{truncated_normal, ParamStore, Tape};
use crate::objectives::{info_nce, ScorePair};
use crate::training::{adam_step, AdamConfig, AdamState};

/// Categorical joint `p(A, B)` over `K × K` outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticJoint {
    pub table: Vec<Vec<f64>>,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

impl SyntheticJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let j = Self { table };
        j.validate()?;
        Ok(j)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: Self = serde_json::from_str(text)?;
        j.validate()?;
        Ok(j)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Uniform over the diagonal: `A = B`.
    pub fn correlated(k: usize) -> Self {
        let table = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 / k as f64 } else { 0.0 }).collect())
            .collect();
        Self { table }
    }

    /// Product of two marginals.
    pub fn independent(pa: &[f64], pb: &[f64]) -> Result<Self> {
        Self::new(pa.iter().map(|a| pb.iter().map(|b| a * b).collect()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.table.len();
        if k == 0 || self.table.iter().any(|r| r.len() != k) {
            return Err(Error::config("joint table must be a non-empty K×K matrix"));
        }
        if self.table.iter().flatten().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::config("joint probabilities must be finite and ≥ 0"));
        }
        let total = compensated_sum(self.table.iter().flatten().copied());
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("joint sums to {total}, not 1")));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.table.len()
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        self.table
            .iter()
            .map(|r| compensated_sum(r.iter().copied()))
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.k())
            .map(|j| compensated_sum(self.table.iter().map(|r| r[j])))
            .collect()
    }

    /// `Σ p(a,b) log(p(a,b) / (p(a)p(b)))` in nats.
    pub fn analytic_mi(&self) -> f64 {
        let (pa, pb) = (self.marginal_a(), self.marginal_b());
        let terms = self.table.iter().enumerate().flat_map(|(i, r)| {
            let (pa, pb) = (&pa, &pb);
            r.iter().enumerate().map(move |(j, &p)| {
                if p == 0.0 {
                    0.0
                } else {
                    p * (p.ln() - pa[i].ln() - pb[j].ln())
                }
            })
        });
        compensated_sum(terms).max(0.0)
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.table.iter().flatten().copied()).expect("validated joint")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiEvalConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub dim: usize,
    pub eval_samples: usize,
    pub seed: u64,
    /// Allowed excess of the estimate over the analytic MI.
    pub tolerance: f64,
}

impl Default for MiEvalConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 64,
            lr: 0.05,
            dim: 8,
            eval_samples: 20_000,
            seed: 13,
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiPoint {
    pub candidates: usize,
    pub estimate: f64,
    pub cap: f64,
    /// Every per-sample estimate was ≤ log|B̃|.
    pub within_cap: bool,
    pub within_analytic: bool,
    pub eval_loss: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiReport {
    pub analytic_mi: f64,
    pub points: Vec<MiPoint>,
}

impl MiReport {
    pub fn all_within_cap(&self) -> bool {
        self.points.iter().all(|p| p.within_cap)
    }
}

/// Bilinear critic `f(a, b) = U[a]·V[b]`.
struct Critic {
    params: ParamStore,
    u: crate::numeric::ParamId,
    v: crate::numeric::ParamId,
}

impl Critic {
    fn new(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let u = params.register("u", truncated_normal(&[k, dim], 0.1, rng))?;
        let v = params.register("v", truncated_normal(&[k, dim], 0.1, rng))?;
        Ok(Self { params, u, v })
    }

    fn score(&self, a: usize, b: usize) -> f64 {
        crate::numeric::dot(self.params.get(self.u).row_slice(a), self.params.get(self.v).row_slice(b))
    }
}

/// `(a, candidates)` with the positive first and negatives from `p(b)`.
fn draw_rows(
    joint: &WeightedIndex<f64>,
    marginal: &WeightedIndex<f64>,
    k: usize,
    n: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<usize>)> {
    (0..n)
        .map(|_| {
            let cell = joint.sample(rng);
            let (a, b) = (cell / k, cell % k);
            let cands = std::iter::once(b)
                .chain((1..size).map(|_| marginal.sample(rng)))
                .collect();
            (a, cands)
        })
        .collect()
}

/// Trains a fresh critic per candidate size and reports the held-out InfoNCE estimate.
pub fn mi_synthetic_eval(
    joint: &SyntheticJoint,
    sizes: &[usize],
    cfg: &MiEvalConfig,
) -> Result<MiReport> {
    joint.validate()?;
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::config("candidate sizes must be ≥ 2"));
    }
    let k = joint.k();
    let analytic = joint.analytic_mi();
    let cells = joint.sampler();
    let marginal = WeightedIndex::new(joint.marginal_b()).expect("validated joint");
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (size as u64).rotate_left(17));
        let mut critic = Critic::new(k, cfg.dim, &mut rng)?;
        let mut adam = AdamState::new(&critic.params);
        let opt = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for step in 0..cfg.steps {
            let rows = draw_rows(&cells, &marginal, k, cfg.batch, size, &mut rng);
            let grads = {
                let mut tape = Tape::new(&critic.params);
                let u = tape.param(critic.u);
                let v = tape.param(critic.v);
                let a_idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
                let a = tape.rows(u, &a_idx);
                // columns of the logits are the outcomes of B
                let logits = tape.matmul_bt(a, v);
                let ce = tape.cross_entropy(logits, rows.into_iter().map(|r| r.1).collect());
                let loss = tape.mean(ce);
                tape.backward(loss)?.params
            };
            let lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64).max(0.05);
            adam_step(&mut critic.params, &grads, &mut adam, &opt, lr)?;
        }

        let mut within_cap = true;
        let cap = (size as f64).ln();
        let rows = draw_rows(&cells, &marginal, k, cfg.eval_samples, size, &mut rng);
        let mut est = Vec::with_capacity(rows.len());
        let mut losses = Vec::with_capacity(rows.len());
        for (a, cands) in rows {
            let scores = ScorePair::from_row(cands.iter().map(|&b| critic.score(a, b)).collect());
            let v = info_nce(&scores)?;
            within_cap &= v.mi_estimate <= cap;
            est.push(v.mi_estimate);
            losses.push(v.loss);
        }
        let n = est.len() as f64;
        let estimate = compensated_sum(est) / n;
        let eval_loss = compensated_sum(losses) / n;
        points.push(MiPoint {
            candidates: size,
            estimate,
            cap,
            within_cap,
            within_analytic: estimate <= analytic + cfg.tolerance,
            eval_loss,
            converged: eval_loss <= cap + 1e-2,
        });
    }
    Ok(MiReport {
        analytic_mi: analytic,
        points,
    })
}

/// Draw `(a, b)` pairs from the joint.
pub fn sample_pairs<R: Rng + ?Sized>(joint: &SyntheticJoint, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let cells = joint.sampler();
    let k = joint.k();
    (0..n)
        .map(|_| {
            let c = cells.sample(rng);
            (c / k, c % k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn analytic_values() {
        assert_relative_eq!(SyntheticJoint::correlated(2).analytic_mi(), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(SyntheticJoint::correlated(5).analytic_mi(), 5f64.ln(), epsilon = 1e-14);
        let ind = SyntheticJoint::independent(&[0.2, 0.8], &[0.5, 0.3, 0.2]);
        assert!(ind.is_err(), "non-square product rejected");
        let ind = SyntheticJoint::independent(&[0.2, 0.3, 0.5], &[0.5, 0.3, 0.2]).unwrap();
        assert!(ind.analytic_mi().abs() < 1e-15);
        // Binary symmetric channel with flip 0.1: log 2 − H(0.1).
        let j = SyntheticJoint::new(vec![vec![0.45, 0.05], vec![0.05, 0.45]]).unwrap();
        let h = -(0.1f64 * 0.1f64.ln() + 0.9 * 0.9f64.ln());
        assert_relative_eq!(j.analytic_mi(), 2f64.ln() - h, epsilon = 1e-15);
    }

    #[test]
    fn invalid_tables() {
        assert!(SyntheticJoint::new(vec![]).is_err());
        assert!(SyntheticJoint::new(vec![vec![0.5, 0.5]]).is_err());
        assert!(SyntheticJoint::new(vec![vec![0.5, 0.6], vec![0.0, -0.1]]).is_err());
        assert!(SyntheticJoint::from_json(r#"{"table": [[0.5, 0.0], [0.0, 0.5]]}"#).is_ok());
    }

    #[test]
    fn pair_sampling_follows_table() {
        let j = SyntheticJoint::new(vec![vec![0.7, 0.1], vec![0.0, 0.2]]).unwrap();
        let pairs = sample_pairs(&j, 20_000, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(!pairs.contains(&(1, 0)));
        let f = pairs.iter().filter(|p| **p == (0, 0)).count() as f64 / 20_000.0;
        assert!((f - 0.7).abs() < 3.0 * (0.21f64 / 20_000.0).sqrt());
    }

    #[test]
    fn two_candidates_stay_under_log_two() {
        let cfg = MiEvalConfig {
            steps: 150,
            eval_samples: 4000,
            ..Default::default()
        };
        for table in [
            vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            vec![vec![0.4, 0.1], vec![0.1, 0.4]],
            vec![vec![0.25, 0.25], vec![0.25, 0.25]],
        ] {
            let r = mi_synthetic_eval(&SyntheticJoint::new(table).unwrap(), &[2], &cfg).unwrap();
            let p = &r.points[0];
            assert!(p.within_cap && p.estimate <= 2f64.ln(), "{p:?}");
        }
        assert!(mi_synthetic_eval(&SyntheticJoint::correlated(2), &[1], &cfg).is_err());
    }
}
