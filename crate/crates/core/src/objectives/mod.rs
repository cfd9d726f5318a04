//! The InfoNCE family and its instantiations.
//!
//! Every batch objective follows the same plan: each sequence is encoded on
//! its own tape (in parallel), a small head tape scores the results, and the
//! head's input gradients are pushed back through each sequence tape. The
//! per-sequence gradients are then summed in input order.

mod nce;

pub use nce::{
    full_softmax_ce, info_nce, CandidateSet, LossOutput, NceValue, NegativeSource,
    ObjectiveWeights, ScorePair, SpanCandidates, TokenCandidates,
};

use std::collections::BTreeMap;

use rand::Rng;

use crate::encoders::{AttnMask, EncoderParams, SkipGramModel};
use crate::error::{Error, Result};
use crate::masking::{MaskedExample, Permutation, TargetKind};
use crate::numeric::{Gradients, Tape, Tensor, Var};
use crate::par;
use crate::text::{TokenId, Vocabulary};

enum Job<'a> {
    /// Full-attention pass, keeping the listed rows.
    Rows { ids: &'a [TokenId], rows: Vec<usize> },
    Ngram(&'a [TokenId]),
    Query { ids: &'a [TokenId], perm: &'a Permutation },
}

struct Encoded<'p> {
    tape: Tape<'p>,
    out: Var,
}

fn encode_jobs<'p>(model: &'p EncoderParams, jobs: &[Job<'_>]) -> Result<Vec<Encoded<'p>>> {
    par::map(jobs, |job| {
        let mut tape = Tape::new(&model.params);
        let enc = &model.transformer;
        let out = match job {
            Job::Rows { ids, rows } => {
                let h = enc.forward(&mut tape, ids, AttnMask::ALL, None)?;
                tape.rows(h, rows)
            }
            Job::Ngram(ngram) => enc.encode_ngram(&mut tape, ngram)?,
            Job::Query { ids, perm } => enc.two_stream(&mut tape, ids, perm)?,
        };
        Ok(Encoded { tape, out })
    })
    .into_iter()
    .collect()
}

/// Scores encoded outputs on a head tape and backpropagates when asked.
fn run_head<'p, F>(
    model: &'p EncoderParams,
    encoded: Vec<Encoded<'p>>,
    with_grad: bool,
    head: F,
) -> Result<LossOutput>
where
    F: FnOnce(&mut Tape<'p>, &[Var]) -> Result<(Var, Vec<ScorePair>)>,
{
    let mut tape = Tape::new(&model.params);
    let inputs: Vec<Var> = encoded
        .iter()
        .map(|e| tape.input(e.tape.value(e.out).clone()))
        .collect();
    let (loss_var, scores) = head(&mut tape, &inputs)?;
    let loss = tape.value(loss_var).item();
    let grads = if with_grad {
        let mut bw = tape.backward(loss_var)?;
        let seeded: Vec<(Encoded<'p>, Option<Tensor>)> = encoded
            .into_iter()
            .zip(inputs.iter().map(|&v| bw.take_grad(v)))
            .collect();
        let parts = par::map_owned(seeded, |(e, seed)| {
            seed.map(|s| e.tape.backward_with(e.out, s).params)
        });
        let head_grads = bw.params;
        Some(Gradients::sum(
            &model.params,
            std::iter::once(head_grads).chain(parts.into_iter().flatten()),
        ))
    } else {
        None
    };
    Ok(LossOutput {
        loss,
        grads,
        scores,
        empty: false,
    })
}

/// Score rows `cols[r]` of `logits`, positive first.
fn score_pairs(logits: &Tensor, cols: &[Vec<usize>]) -> Vec<ScorePair> {
    cols.iter()
        .enumerate()
        .map(|(r, c)| {
            let row = logits.row_slice(r);
            ScorePair::from_row(c.iter().map(|&j| row[j]).collect())
        })
        .collect()
}

/// Column layout for word candidates: unique ids, and per-row column lists.
fn token_columns<'a>(
    sets: impl Iterator<Item = &'a TokenCandidates>,
) -> (Vec<TokenId>, Vec<Vec<usize>>) {
    let sets: Vec<&TokenCandidates> = sets.collect();
    let mut index = BTreeMap::new();
    for s in &sets {
        for &id in s.iter() {
            index.entry(id).or_insert(0usize);
        }
    }
    let ids: Vec<TokenId> = index.keys().copied().collect();
    for (col, id) in ids.iter().enumerate() {
        index.insert(*id, col);
    }
    let cols = sets
        .iter()
        .map(|s| s.iter().map(|id| index[id]).collect())
        .collect();
    (ids, cols)
}

/// `(center, context)` pairs within `radius` of each position of a sentence
/// of word ids.
pub fn window_pairs(words: &[TokenId], radius: usize) -> Vec<(TokenId, TokenId)> {
    let mut pairs = Vec::new();
    for (i, &center) in words.iter().enumerate() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(words.len().saturating_sub(1));
        for (j, &ctx) in words.iter().enumerate().take(hi + 1).skip(lo) {
            if j != i {
                pairs.push((center, ctx));
            }
        }
    }
    pairs
}

/// One Skip-gram term: center word and its context candidates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipGramTerm {
    pub center: TokenId,
    pub candidates: TokenCandidates,
}

/// Mean InfoNCE with `a` looked up in ω and candidates in ψ.
pub fn skipgram_loss(
    model: &SkipGramModel,
    terms: &[SkipGramTerm],
    with_grad: bool,
) -> Result<LossOutput> {
    if terms.is_empty() {
        return Ok(LossOutput::empty(with_grad, &model.params));
    }
    let mut tape = Tape::new(&model.params);
    let centers: Vec<TokenId> = terms.iter().map(|t| t.center).collect();
    let (uniq, cols) = token_columns(terms.iter().map(|t| &t.candidates));
    let a = model.context.lookup(&mut tape, &centers)?;
    let b = model.target.lookup(&mut tape, &uniq)?;
    let logits = tape.matmul_bt(a, b);
    let scores = score_pairs(tape.value(logits), &cols);
    let ce = tape.cross_entropy(logits, cols);
    let loss_var = tape.mean(ce);
    let loss = tape.value(loss_var).item();
    let grads = if with_grad {
        Some(tape.backward(loss_var)?.params)
    } else {
        None
    };
    Ok(LossOutput {
        loss,
        grads,
        scores,
        empty: false,
    })
}

fn check_token_sets(examples: &[MaskedExample], sets: &[Vec<TokenCandidates>]) -> Result<()> {
    if examples.len() != sets.len() {
        return Err(Error::contract("one candidate list per example"));
    }
    for (ex, s) in examples.iter().zip(sets) {
        if ex.kind != TargetKind::Token {
            return Err(Error::contract("word objective given a span example"));
        }
        if s.len() != ex.targets.len() {
            return Err(Error::contract("one candidate set per target"));
        }
        if s.iter().zip(&ex.targets).any(|(c, &t)| c.positive != t) {
            return Err(Error::contract("candidate positive differs from target"));
        }
    }
    Ok(())
}

/// Shared head: gathered rows against ψ-lookups of word candidates.
fn word_head<'p>(
    model: &'p EncoderParams,
    encoded: Vec<Encoded<'p>>,
    sets: Vec<&TokenCandidates>,
    with_grad: bool,
) -> Result<LossOutput> {
    let (uniq, cols) = token_columns(sets.into_iter());
    run_head(model, encoded, with_grad, |tape, inputs| {
        let a = tape.concat_rows(inputs);
        let b = model.target.lookup(tape, &uniq)?;
        let logits = tape.matmul_bt(a, b);
        let scores = score_pairs(tape.value(logits), &cols);
        let ce = tape.cross_entropy(logits, cols);
        Ok((tape.mean(ce), scores))
    })
}

/// Mean InfoNCE over masked word targets.
///
/// `candidates[e][k]` is the candidate set of target `k` of example `e`.
/// A batch without targets yields loss 0 with `empty` set.
pub fn mlm_nce_loss(
    model: &EncoderParams,
    examples: &[MaskedExample],
    candidates: &[Vec<TokenCandidates>],
    with_grad: bool,
) -> Result<LossOutput> {
    check_token_sets(examples, candidates)?;
    let jobs: Vec<Job> = examples
        .iter()
        .filter(|e| !e.positions.is_empty())
        .map(|e| Job::Rows {
            ids: &e.corrupted,
            rows: e.positions.clone(),
        })
        .collect();
    if jobs.is_empty() {
        return Ok(LossOutput::empty(with_grad, &model.params));
    }
    let encoded = encode_jobs(model, &jobs)?;
    word_head(model, encoded, candidates.iter().flatten().collect(), with_grad)
}

/// Mean InfoNCE between span-masked sequences and their held-out n-grams.
///
/// `candidates[k]` indexes into `examples`; its positive must be `k` and its
/// negatives must come from other sequences.
pub fn dim_loss(
    model: &EncoderParams,
    examples: &[MaskedExample],
    candidates: &[SpanCandidates],
    with_grad: bool,
) -> Result<LossOutput> {
    if examples.len() != candidates.len() {
        return Err(Error::contract("one candidate set per span"));
    }
    if examples.is_empty() {
        return Ok(LossOutput::empty(with_grad, &model.params));
    }
    let first = examples[0].sequence;
    if examples.iter().all(|e| e.sequence == first) {
        return Err(Error::contract(
            "span objective needs at least two sequences for negatives",
        ));
    }
    for (k, (ex, set)) in examples.iter().zip(candidates).enumerate() {
        if ex.kind != TargetKind::Span {
            return Err(Error::contract("span objective given a word example"));
        }
        if set.positive != k {
            return Err(Error::contract("span candidate positive must be its own index"));
        }
        for &n in &set.negatives {
            let other = examples
                .get(n)
                .ok_or_else(|| Error::contract(format!("span candidate {n} out of range")))?;
            if other.sequence == ex.sequence {
                return Err(Error::contract("span negative drawn from its own sequence"));
            }
        }
    }
    let k = examples.len();
    let jobs: Vec<Job> = examples
        .iter()
        .map(|e| Job::Rows {
            ids: &e.corrupted,
            rows: vec![0],
        })
        .chain(examples.iter().map(|e| Job::Ngram(&e.targets)))
        .collect();
    let encoded = encode_jobs(model, &jobs)?;
    let cols: Vec<Vec<usize>> = candidates
        .iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    run_head(model, encoded, with_grad, |tape, inputs| {
        let a = tape.concat_rows(&inputs[..k]);
        let b = tape.concat_rows(&inputs[k..]);
        let logits = tape.matmul_bt(a, b);
        let scores = score_pairs(tape.value(logits), &cols);
        let ce = tape.cross_entropy(logits, cols);
        Ok((tape.mean(ce), scores))
    })
}

/// Everything one combined step needs.
#[derive(Clone, Debug, Default)]
pub struct PretrainBatch {
    pub token_examples: Vec<MaskedExample>,
    pub token_candidates: Vec<Vec<TokenCandidates>>,
    pub span_examples: Vec<MaskedExample>,
    pub span_candidates: Vec<SpanCandidates>,
}

#[derive(Clone, Debug)]
pub struct InfoWordOutput {
    pub loss: f64,
    pub grads: Option<Gradients>,
    /// Component values; their `grads` are folded into the total.
    pub mlm: Option<LossOutput>,
    pub dim: Option<LossOutput>,
}

/// `λ_MLM · mlm_nce_loss + λ_DIM · dim_loss`. A zero weight skips its term.
pub fn infoword_loss(
    model: &EncoderParams,
    batch: &PretrainBatch,
    weights: ObjectiveWeights,
    with_grad: bool,
) -> Result<InfoWordOutput> {
    weights.validate()?;
    let mut loss = 0.0;
    let mut grads = with_grad.then(|| Gradients::empty(&model.params));
    let mut fold = |mut out: LossOutput, lambda: f64| {
        loss += lambda * out.loss;
        if let (Some(total), Some(g)) = (grads.as_mut(), out.grads.take()) {
            total.add_scaled(lambda, &g);
        }
        out
    };
    let mlm = if weights.lambda_mlm > 0.0 {
        let out = mlm_nce_loss(
            model,
            &batch.token_examples,
            &batch.token_candidates,
            with_grad,
        )?;
        Some(fold(out, weights.lambda_mlm))
    } else {
        None
    };
    let dim = if weights.lambda_dim > 0.0 {
        let out = dim_loss(model, &batch.span_examples, &batch.span_candidates, with_grad)?;
        Some(fold(out, weights.lambda_dim))
    } else {
        None
    };
    Ok(InfoWordOutput {
        loss,
        grads,
        mlm,
        dim,
    })
}

/// A sentence pair `[CLS, x¹, SEP, x²]` labelled with whether `x²` follows `x¹`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NspPair {
    pub ids: Vec<TokenId>,
    pub is_next: bool,
}

/// `[CLS, first, SEP, second]`, truncated to `max_len`.
pub fn concat_pair(first: &[TokenId], second: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(first.len() + second.len() + 2);
    ids.push(Vocabulary::CLS);
    ids.extend_from_slice(first);
    ids.push(Vocabulary::SEP);
    ids.extend_from_slice(second);
    ids.truncate(max_len);
    ids
}

/// Consecutive sentence pairs; half the time the second sentence is swapped
/// for a random other one.
pub fn make_nsp_pairs<R: Rng + ?Sized>(
    sentences: &[Vec<TokenId>],
    max_len: usize,
    rng: &mut R,
) -> Vec<NspPair> {
    let n = sentences.len();
    let mut pairs = Vec::new();
    for i in 0..n.saturating_sub(1) {
        let mut next = i + 1;
        let mut is_next = true;
        if n > 2 && rng.random_bool(0.5) {
            next = rng.random_range(0..n - 1);
            if next > i {
                next += 1;
            }
            is_next = false;
        }
        pairs.push(NspPair {
            ids: concat_pair(&sentences[i], &sentences[next], max_len),
            is_next,
        });
    }
    pairs
}

/// Binary logistic loss of the discriminator on first-token hiddens, in logit space.
///
/// Scores are reported as the two-way pair `(±z/2, ∓z/2)`, whose InfoNCE
/// value equals the logistic loss.
pub fn nsp_local_loss(
    model: &EncoderParams,
    pairs: &[NspPair],
    with_grad: bool,
) -> Result<LossOutput> {
    if pairs.is_empty() {
        return Ok(LossOutput::empty(with_grad, &model.params));
    }
    let jobs: Vec<Job> = pairs
        .iter()
        .map(|p| Job::Rows {
            ids: &p.ids,
            rows: vec![0],
        })
        .collect();
    let encoded = encode_jobs(model, &jobs)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.is_next).collect();
    let heads = model.nsp;
    run_head(model, encoded, with_grad, |tape, inputs| {
        let g = tape.concat_rows(inputs);
        let w = tape.param(heads.disc_w);
        let b = tape.param(heads.disc_b);
        let z = tape.matmul_bt(g, w);
        let z = tape.add_row(z, b);
        let scores = tape
            .value(z)
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| {
                let s = if y { z / 2.0 } else { -z / 2.0 };
                ScorePair::from_row(vec![s, -s])
            })
            .collect();
        let bce = tape.bce_with_logits(z, &labels);
        Ok((tape.mean(bce), scores))
    })
}

/// One ranking instance: the true continuation first, then sampled ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NspGroup {
    pub first: Vec<TokenId>,
    pub candidates: CandidateSet<Vec<TokenId>>,
}

/// InfoNCE over concatenations scored by `ψᵀ g([x¹, x̃²])`.
pub fn nsp_global_loss(
    model: &EncoderParams,
    groups: &[NspGroup],
    max_len: usize,
    with_grad: bool,
) -> Result<LossOutput> {
    if groups.iter().any(|g| g.candidates.len() < 2) {
        return Err(Error::contract("ranking needs at least two candidates"));
    }
    if groups.is_empty() {
        return Ok(LossOutput::empty(with_grad, &model.params));
    }
    let seqs: Vec<Vec<TokenId>> = groups
        .iter()
        .flat_map(|g| g.candidates.iter().map(|c| concat_pair(&g.first, c, max_len)))
        .collect();
    let jobs: Vec<Job> = seqs
        .iter()
        .map(|ids| Job::Rows {
            ids,
            rows: vec![0],
        })
        .collect();
    let encoded = encode_jobs(model, &jobs)?;
    let sizes: Vec<usize> = groups.iter().map(|g| g.candidates.len()).collect();
    let psi_id = model.nsp.rank_psi;
    run_head(model, encoded, with_grad, |tape, inputs| {
        let psi = tape.param(psi_id);
        let mut start = 0;
        let mut losses = Vec::with_capacity(sizes.len());
        let mut scores = Vec::with_capacity(sizes.len());
        for &c in &sizes {
            let g = tape.concat_rows(&inputs[start..start + c]);
            start += c;
            let s = tape.matmul_bt(psi, g);
            scores.push(ScorePair::from_row(tape.value(s).data().to_vec()));
            losses.push(tape.cross_entropy(s, vec![(0..c).collect()]));
        }
        let all = tape.concat_rows(&losses);
        Ok((tape.mean(all), scores))
    })
}

/// One permutation-LM instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlmExample {
    pub ids: Vec<TokenId>,
    pub perm: Permutation,
    /// One set per target position, in `perm.target_positions()` order.
    pub candidates: Vec<TokenCandidates>,
}

/// Mean InfoNCE of query-stream outputs against word candidates.
pub fn plm_nce_loss(
    model: &EncoderParams,
    examples: &[PlmExample],
    with_grad: bool,
) -> Result<LossOutput> {
    for ex in examples {
        let targets = ex.perm.target_positions();
        if targets.len() != ex.candidates.len() {
            return Err(Error::contract("one candidate set per permutation target"));
        }
        if targets
            .iter()
            .zip(&ex.candidates)
            .any(|(&p, c)| ex.ids.get(p) != Some(&c.positive))
        {
            return Err(Error::contract("candidate positive differs from target"));
        }
    }
    let jobs: Vec<Job> = examples
        .iter()
        .filter(|e| e.perm.num_targets() > 0)
        .map(|e| Job::Query {
            ids: &e.ids,
            perm: &e.perm,
        })
        .collect();
    if jobs.is_empty() {
        return Ok(LossOutput::empty(with_grad, &model.params));
    }
    let encoded = encode_jobs(model, &jobs)?;
    word_head(
        model,
        encoded,
        examples.iter().flat_map(|e| &e.candidates).collect(),
        with_grad,
    )
}
