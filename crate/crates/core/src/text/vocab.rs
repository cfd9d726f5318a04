use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Specials in id order; they always occupy ids `0..5`.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub type TokenId = u32;

/// Word type ↔ id map with counts. Special symbols come first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    ids: HashMap<String, TokenId>,
    types: Vec<String>,
    counts: Vec<u64>,
    min_count: u64,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const CLS: TokenId = 2;
    pub const SEP: TokenId = 3;
    pub const MASK: TokenId = 4;
    pub const NUM_SPECIAL: usize = SPECIALS.len();

    /// Counts every token in `corpus` and keeps types seen at least `min_count` times.
    ///
    /// Ordering after the specials is by descending count, then lexicographic.
    pub fn build<I, S>(corpus: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for tok in corpus {
            *counts.entry(tok.as_ref().to_string()).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Build("corpus yielded no tokens".into()));
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_entries(kept, min_count))
    }

    fn from_entries(entries: Vec<(String, u64)>, min_count: u64) -> Self {
        let mut types: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIALS.len()];
        for (t, c) in entries {
            types.push(t);
            counts.push(c);
        }
        let ids = types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            ids,
            types,
            counts,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    /// Id of `token`, or UNK when it is out of vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.types.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < Self::NUM_SPECIAL
    }

    /// Ids of the ordinary (non-special) word types.
    pub fn word_ids(&self) -> std::ops::Range<TokenId> {
        Self::NUM_SPECIAL as TokenId..self.types.len() as TokenId
    }

    /// `token<TAB>count` per line, specials first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.types.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Build(format!("vocab line {} lacks a tab", n + 1)))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::Build(format!("vocab line {}: bad count", n + 1)))?;
            if n < SPECIALS.len() {
                if tok != SPECIALS[n] {
                    return Err(Error::Build(format!(
                        "vocab line {}: expected special {}, found {tok}",
                        n + 1,
                        SPECIALS[n]
                    )));
                }
                continue;
            }
            entries.push((tok.to_string(), count));
        }
        let min_count = entries.iter().map(|e| e.1).min().unwrap_or(1);
        Ok(Self::from_entries(entries, min_count))
    }

    pub(crate) fn with_min_count(mut self, min_count: u64) -> Self {
        self.min_count = min_count;
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

/// Negative-sampling distribution with `p(w) ∝ count(w)^power`.
#[derive(Clone, Debug)]
pub struct UnigramDistribution {
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl UnigramDistribution {
    pub fn new(vocab: &Vocabulary, power: f64) -> Result<Self> {
        if !(power >= 0.0) || !power.is_finite() {
            return Err(Error::config(format!("unigram power must be ≥ 0, got {power}")));
        }
        let mut weights = vec![0.0; vocab.len()];
        for id in vocab.word_ids() {
            let c = vocab.count(id) as f64;
            weights[id as usize] = if power == 0.0 { 1.0 } else { c.powf(power) };
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Build("vocabulary has no ordinary word types".into()));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        let sampler = WeightedIndex::new(&weights)
            .map_err(|e| Error::Build(format!("unigram table: {e}")))?;
        Ok(Self { probs, sampler })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        self.sampler.sample(rng) as TokenId
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn aab(min: u64) -> Vocabulary {
        Vocabulary::build(["a", "a", "b"], min).unwrap()
    }

    #[test]
    fn counts_and_threshold() {
        let v = aab(1);
        assert_eq!(v.count(v.id("a")), 2);
        assert_eq!(v.count(v.id("b")), 1);
        let v2 = aab(2);
        assert_eq!(v2.get("b"), None);
        assert_eq!(v2.id("b"), Vocabulary::UNK);
    }

    #[test]
    fn ids_dense_with_specials_first() {
        let v = aab(1);
        assert_eq!(v.len(), 7);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), i as TokenId);
        }
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
    }

    #[test]
    fn empty_corpus_fails() {
        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 1),
            Err(Error::Build(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let v = aab(1);
        let text = v.to_tsv();
        assert!(text.starts_with("[PAD]\t0\n[UNK]\t0\n[CLS]\t0\n"));
        assert_eq!(Vocabulary::from_tsv(&text).unwrap().to_tsv(), text);
    }

    #[test]
    fn unigram_probabilities() {
        let v = aab(1);
        let u = UnigramDistribution::new(&v, 1.0).unwrap();
        assert!((u.prob(v.id("a")) - 2.0 / 3.0).abs() < 1e-15);
        assert!((u.prob(v.id("b")) - 1.0 / 3.0).abs() < 1e-15);
        assert!((u.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for s in 0..Vocabulary::NUM_SPECIAL as TokenId {
            assert_eq!(u.prob(s), 0.0);
        }
        let flat = UnigramDistribution::new(&v, 0.0).unwrap();
        assert_eq!(flat.prob(v.id("a")), 0.5);
        assert!(matches!(
            UnigramDistribution::new(&v, -0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unigram_sampling_frequency() {
        // 3σ band for p = 2/3 over 10^6 draws is ±0.0014.
        let v = aab(1);
        let u = UnigramDistribution::new(&v, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a = v.id("a");
        let n = 1_000_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let s = u.sample(&mut rng);
            assert!(!Vocabulary::is_special(s));
            hits += usize::from(s == a);
        }
        let freq = hits as f64 / n as f64;
        assert!((0.665..=0.668).contains(&freq), "{freq}");
    }
}
