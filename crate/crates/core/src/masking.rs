//! Builds the two views of an input: corrupted sequences paired with the
//! words or n-grams they hide, and permutation orders expressed as
//! query/content attention masks.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::text::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Token,
    Span,
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// One view pair: a corrupted sequence and the ids it hides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MaskedExample {
    /// Index of the source sequence within its batch.
    pub sequence: usize,
    pub original: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    /// Target positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions` (the word, or the n-gram for spans).
    pub targets: Vec<TokenId>,
    pub corruption: Vec<Corruption>,
    pub kind: TargetKind,
}

impl MaskedExample {
    pub fn with_sequence(mut self, sequence: usize) -> Self {
        self.sequence = sequence;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    NoMaskablePosition,
}

/// Token-level corruption probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmConfig {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

fn maskable(id: TokenId) -> bool {
    !matches!(id, Vocabulary::CLS | Vocabulary::PAD | Vocabulary::SEP)
}

/// Number of targets for `n` maskable positions: nearest integer, at least one
/// when `rate > 0`.
pub fn target_count(rate: f64, n: usize) -> usize {
    if rate <= 0.0 || n == 0 {
        return 0;
    }
    ((rate * n as f64).round() as usize).clamp(1, n)
}

/// BERT-style selection: picks `target_count(rate, T)` positions uniformly
/// without replacement, then independently masks (80%), replaces with a
/// random word (10%) or keeps (10%) each one.
pub fn select_mlm_targets<R: Rng + ?Sized>(
    seq: &[TokenId],
    config: &MlmConfig,
    word_ids: Range<TokenId>,
    rng: &mut R,
) -> std::result::Result<MaskedExample, SkipReason> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| maskable(seq[i])).collect();
    if candidates.is_empty() {
        return Err(SkipReason::NoMaskablePosition);
    }
    let k = target_count(config.rate, candidates.len());
    let mut positions: Vec<usize> = candidates.choose_multiple(rng, k).copied().collect();
    positions.sort_unstable();

    let mut corrupted = seq.to_vec();
    let mut corruption = Vec::with_capacity(k);
    for &p in &positions {
        let u: f64 = rng.random();
        let c = if u < config.mask_prob {
            corrupted[p] = Vocabulary::MASK;
            Corruption::Mask
        } else if u < config.mask_prob + config.random_prob {
            corrupted[p] = rng.random_range(word_ids.clone());
            Corruption::Random
        } else {
            Corruption::Keep
        };
        corruption.push(c);
    }
    Ok(MaskedExample {
        sequence: 0,
        original: seq.to_vec(),
        targets: positions.iter().map(|&p| seq[p]).collect(),
        corrupted,
        positions,
        corruption,
        kind: TargetKind::Token,
    })
}

pub const SPAN_MIN: usize = 1;
pub const SPAN_MAX: usize = 10;

/// Rounds a raw Gaussian draw and clamps it to `[1, 10]`.
pub fn span_length_from_draw(x: f64) -> usize {
    let r = x.round();
    if r < SPAN_MIN as f64 {
        SPAN_MIN
    } else if r > SPAN_MAX as f64 {
        SPAN_MAX
    } else {
        r as usize
    }
}

/// n-gram length drawn from N(5, 1), rounded and clipped to `[1, 10]`.
pub fn sample_span_length<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let normal = Normal::new(5.0, 1.0).expect("valid normal");
    span_length_from_draw(normal.sample(rng))
}

/// Iterative n-gram masking until `round(budget_rate · T)` words are masked.
///
/// Each example hides one span; the rest of its sequence is untouched.
pub fn apply_span_masks<R: Rng + ?Sized>(
    seq: &[TokenId],
    budget_rate: f64,
    rng: &mut R,
) -> Result<Vec<MaskedExample>> {
    apply_span_masks_with(seq, budget_rate, rng, |r| sample_span_length(r))
}

/// [`apply_span_masks`] with an injectable length sampler.
pub fn apply_span_masks_with<R, L>(
    seq: &[TokenId],
    budget_rate: f64,
    rng: &mut R,
    mut sample_len: L,
) -> Result<Vec<MaskedExample>>
where
    R: Rng + ?Sized,
    L: FnMut(&mut R) -> usize,
{
    if !(0.0..=1.0).contains(&budget_rate) {
        return Err(Error::config(format!(
            "budget rate must lie in [0, 1], got {budget_rate}"
        )));
    }
    let free: Vec<bool> = seq.iter().map(|&id| maskable(id)).collect();
    let total = free.iter().filter(|&&f| f).count();
    let budget = target_count(budget_rate, total);
    let mut covered = vec![false; seq.len()];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut remaining = budget;

    while remaining > 0 {
        let mut len = sample_len(rng).min(remaining);
        // Shrink until some placement fits; length 1 always fits while budget remains.
        let starts = loop {
            let starts = admissible_starts(&free, &covered, len);
            if !starts.is_empty() || len == 1 {
                break starts;
            }
            len -= 1;
        };
        if starts.is_empty() {
            break;
        }
        let start = starts[rng.random_range(0..starts.len())];
        covered[start..start + len].iter_mut().for_each(|c| *c = true);
        spans.push((start, len));
        remaining -= len;
    }

    spans.sort_unstable();
    Ok(spans
        .into_iter()
        .map(|(start, len)| {
            let positions: Vec<usize> = (start..start + len).collect();
            let mut corrupted = seq.to_vec();
            for &p in &positions {
                corrupted[p] = Vocabulary::MASK;
            }
            MaskedExample {
                sequence: 0,
                original: seq.to_vec(),
                targets: seq[start..start + len].to_vec(),
                corrupted,
                corruption: vec![Corruption::Mask; len],
                positions,
                kind: TargetKind::Span,
            }
        })
        .collect())
}

fn admissible_starts(free: &[bool], covered: &[bool], len: usize) -> Vec<usize> {
    if len == 0 || len > free.len() {
        return Vec::new();
    }
    let ok: Vec<bool> = free.iter().zip(covered).map(|(f, c)| *f && !c).collect();
    // run[i] = number of consecutive admissible positions starting at i
    let mut run = vec![0usize; ok.len() + 1];
    for i in (0..ok.len()).rev() {
        run[i] = if ok[i] { run[i + 1] + 1 } else { 0 };
    }
    (0..ok.len()).filter(|&i| run[i] >= len).collect()
}

/// A factorization order over positions `0..T`; the last `targets` entries are predicted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Permutation {
    order: Vec<usize>,
    targets: usize,
}

impl Permutation {
    pub fn new(order: Vec<usize>, targets: usize) -> Result<Self> {
        let t = order.len();
        let mut seen = vec![false; t];
        for &p in &order {
            if p >= t || std::mem::replace(&mut seen[p], true) {
                return Err(Error::contract("order is not a permutation"));
            }
        }
        if targets < 1 || targets > t {
            return Err(Error::contract(format!(
                "need 1 ≤ S ≤ T, got S={targets}, T={t}"
            )));
        }
        Ok(Self { order, targets })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_targets(&self) -> usize {
        self.targets
    }

    pub fn with_targets(self, targets: usize) -> Result<Self> {
        Self::new(self.order, targets)
    }

    /// Positions predicted under this order (the last `S` of it).
    pub fn target_positions(&self) -> &[usize] {
        &self.order[self.order.len() - self.targets..]
    }

    /// `rank[p]` = index of position `p` within the order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (i, &p) in self.order.iter().enumerate() {
            rank[p] = i;
        }
        rank
    }
}

/// Uniform random order over `0..t` with a single target.
pub fn sample_permutation<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Result<Permutation> {
    if t == 0 {
        return Err(Error::contract("permutation over zero positions"));
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(rng);
    Permutation::new(order, 1)
}

/// Row-major `T × T` visibility for the two attention streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskPair {
    len: usize,
    pub query: Vec<bool>,
    pub content: Vec<bool>,
}

impl AttentionMaskPair {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn query_row(&self, t: usize) -> &[bool] {
        &self.query[t * self.len..(t + 1) * self.len]
    }

    pub fn content_row(&self, t: usize) -> &[bool] {
        &self.content[t * self.len..(t + 1) * self.len]
    }

    /// Positions visible to the query stream at `t`, ascending.
    pub fn query_visible(&self, t: usize) -> Vec<usize> {
        visible(self.query_row(t))
    }

    pub fn content_visible(&self, t: usize) -> Vec<usize> {
        visible(self.content_row(t))
    }
}

fn visible(row: &[bool]) -> Vec<usize> {
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect()
}

/// Query row `t` sees positions strictly earlier in the order; the content row also sees `t`.
pub fn build_attention_masks(perm: &Permutation) -> AttentionMaskPair {
    let t = perm.len();
    let rank = perm.ranks();
    let mut query = vec![false; t * t];
    let mut content = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            query[i * t + j] = rank[j] < rank[i];
            content[i * t + j] = rank[j] <= rank[i];
        }
    }
    AttentionMaskPair {
        len: t,
        query,
        content,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const WORDS: Range<TokenId> = 5..40;

    fn sentence(words: usize) -> Vec<TokenId> {
        std::iter::once(Vocabulary::CLS)
            .chain((0..words).map(|i| 5 + (i % 35) as TokenId))
            .collect()
    }

    #[test]
    fn fifteen_percent_of_twenty_is_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = select_mlm_targets(&sentence(20), &MlmConfig::default(), WORDS, &mut rng).unwrap();
        assert_eq!(ex.positions.len(), 3);
        assert!(ex.positions.iter().all(|&p| p != 0));
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MlmConfig {
            rate: 0.0,
            ..Default::default()
        };
        let s = sentence(12);
        let ex = select_mlm_targets(&s, &cfg, WORDS, &mut rng).unwrap();
        assert_eq!(ex.corrupted, s);
        assert!(ex.positions.is_empty());
    }

    #[test]
    fn no_maskable_position_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = select_mlm_targets(
            &[Vocabulary::CLS, Vocabulary::PAD],
            &MlmConfig::default(),
            WORDS,
            &mut rng,
        );
        assert_eq!(r, Err(SkipReason::NoMaskablePosition));
    }

    #[test]
    fn span_length_rounding_and_range() {
        assert_eq!(span_length_from_draw(5.4), 5);
        assert_eq!(span_length_from_draw(-3.0), 1);
        assert_eq!(span_length_from_draw(14.2), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            assert!((1..=10).contains(&sample_span_length(&mut rng)));
        }
    }

    #[test]
    fn span_budget_forty_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let spans = apply_span_masks(&sentence(40), 0.15, &mut rng).unwrap();
            let total: usize = spans.iter().map(|s| s.positions.len()).sum();
            assert_eq!(total, 6);
        }
        assert!(apply_span_masks(&sentence(40), 0.0, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn overflowing_span_is_truncated() {
        // 13 words → budget round(1.95) = 2; a drawn length of 5 must shrink to 2.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut drawn = Vec::new();
        let spans = apply_span_masks_with(&sentence(13), 0.15, &mut rng, |_| {
            drawn.push(5);
            5
        })
        .unwrap();
        assert_eq!(drawn, vec![5]);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].positions.len(), 2);
    }

    #[test]
    fn permutation_mask_examples() {
        // Order 3,1,5,2,4 over 1-based positions, shifted to 0-based.
        let perm = Permutation::new(vec![2, 0, 4, 1, 3], 1).unwrap();
        let m = build_attention_masks(&perm);
        assert_eq!(m.query_visible(0), vec![2]);
        assert_eq!(m.query_visible(4), vec![0, 2]);
        assert_eq!(perm.target_positions(), &[3]);
        assert_eq!(m.query_visible(3), vec![0, 1, 2, 4]);

        let id = Permutation::new((0..6).collect(), 1).unwrap();
        let m = build_attention_masks(&id);
        assert_eq!(m.query_visible(5), (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_singleton_and_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_permutation(1, &mut rng).unwrap();
        assert_eq!(p.order(), &[0]);
        assert_eq!(p.num_targets(), 1);
        let a = sample_permutation(5, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = sample_permutation(5, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
        assert!(Permutation::new(vec![0, 0], 1).is_err());
        assert!(Permutation::new(vec![0, 1], 3).is_err());
    }

    #[test]
    fn permutations_are_uniform_at_t3() {
        // 10^4 draws over 6 orders: σ = sqrt(n p (1-p)) ≈ 37.3, 3σ ≈ 112.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..10_000 {
            let p = sample_permutation(3, &mut rng).unwrap();
            *counts.entry(p.order().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let sigma = (10_000.0f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - 10_000.0 / 6.0).abs() < 3.0 * sigma, "{c}");
        }
    }

    proptest! {
        #[test]
        fn token_corruption_only_at_selected(seed in any::<u64>(), words in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sentence(words);
            let ex = select_mlm_targets(&s, &MlmConfig::default(), WORDS, &mut rng).unwrap();
            for i in 0..s.len() {
                if !ex.positions.contains(&i) {
                    prop_assert_eq!(ex.corrupted[i], s[i]);
                }
            }
            for (p, c) in ex.positions.iter().zip(&ex.corruption) {
                match c {
                    Corruption::Mask => prop_assert_eq!(ex.corrupted[*p], Vocabulary::MASK),
                    Corruption::Keep => prop_assert_eq!(ex.corrupted[*p], s[*p]),
                    Corruption::Random => prop_assert!(WORDS.contains(&ex.corrupted[*p])),
                }
            }
        }

        #[test]
        fn spans_disjoint_and_budget_exact(seed in any::<u64>(), words in 1usize..80, rate in 0.0f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sentence(words);
            let spans = apply_span_masks(&s, rate, &mut rng).unwrap();
            let mut hit = vec![false; s.len()];
            for sp in &spans {
                for &p in &sp.positions {
                    prop_assert!(p != 0);
                    prop_assert!(!hit[p]);
                    hit[p] = true;
                    prop_assert_eq!(sp.corrupted[p], Vocabulary::MASK);
                }
                prop_assert_eq!(&sp.targets, &s[sp.positions[0]..=*sp.positions.last().unwrap()].to_vec());
            }
            let total: usize = spans.iter().map(|sp| sp.positions.len()).sum();
            prop_assert_eq!(total, target_count(rate, words));
        }

        #[test]
        fn query_row_subset_of_content(seed in any::<u64>(), t in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perm = sample_permutation(t, &mut rng).unwrap();
            let m = build_attention_masks(&perm);
            for i in 0..t {
                prop_assert!(!m.query_row(i)[i]);
                prop_assert!(m.content_row(i)[i]);
                for j in 0..t {
                    prop_assert!(!m.query_row(i)[j] || m.content_row(i)[j]);
                }
            }
        }

        #[test]
        fn masking_is_reproducible(seed in any::<u64>()) {
            let s = sentence(30);
            let a = apply_span_masks(&s, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = apply_span_masks(&s, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
