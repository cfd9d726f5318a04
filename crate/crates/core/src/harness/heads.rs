use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{dot, softmax, truncated_normal, ParamId, ParamStore, Tape, Tensor, Var};

/// Start/end scoring vectors of the extractive QA head.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanDecoderParams {
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
}

/// Best span, 0-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub probability: f64,
}

fn column_scores(hiddens: &Tensor, w: &[f64]) -> Result<Vec<f64>> {
    if hiddens.cols() != w.len() {
        return Err(Error::contract(format!(
            "decoder width {} does not match hidden width {}",
            w.len(),
            hiddens.cols()
        )));
    }
    Ok((0..hiddens.rows()).map(|r| dot(hiddens.row_slice(r), w)).collect())
}

/// Start and end distributions over the `M` context positions.
pub fn span_distributions(
    hiddens: &Tensor,
    params: &SpanDecoderParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if hiddens.rows() == 0 {
        return Err(Error::contract("span decoding needs at least one position"));
    }
    let ps = softmax(&column_scores(hiddens, &params.w_start)?)?;
    let pe = softmax(&column_scores(hiddens, &params.w_end)?)?;
    Ok((ps, pe))
}

/// `argmax_{s ≤ e} p_start(s)·p_end(e)` in one pass.
///
/// Ties go to the smallest end, then the smallest start.
pub fn qa_span_decode(hiddens: &Tensor, params: &SpanDecoderParams) -> Result<SpanPrediction> {
    let (ps, pe) = span_distributions(hiddens, params)?;
    Ok(decode_from_probs(&ps, &pe))
}

pub fn decode_from_probs(ps: &[f64], pe: &[f64]) -> SpanPrediction {
    let mut best_start = 0;
    let mut best = SpanPrediction {
        start: 0,
        end: 0,
        probability: f64::NEG_INFINITY,
    };
    for e in 0..pe.len() {
        if ps[e] > ps[best_start] {
            best_start = e;
        }
        let p = ps[best_start] * pe[e];
        if p > best.probability {
            best = SpanPrediction {
                start: best_start,
                end: e,
                probability: p,
            };
        }
    }
    best
}

/// Registered span-decoder parameters, for training and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanDecoderHead {
    pub w_start: ParamId,
    pub w_end: ParamId,
}

impl SpanDecoderHead {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamStore,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w_start: params.register("qa.w_start", truncated_normal(&[1, d], std, rng))?,
            w_end: params.register("qa.w_end", truncated_normal(&[1, d], std, rng))?,
        })
    }

    pub fn values(&self, params: &ParamStore) -> SpanDecoderParams {
        SpanDecoderParams {
            w_start: params.get(self.w_start).data().to_vec(),
            w_end: params.get(self.w_end).data().to_vec(),
        }
    }

    /// `−log p_start(start) − log p_end(end)` for hiddens `M × d`.
    pub fn nll(&self, tape: &mut Tape<'_>, hiddens: Var, start: usize, end: usize) -> Result<Var> {
        let m = tape.value(hiddens).rows();
        if start > end || end >= m {
            return Err(Error::contract(format!("gold span ({start}, {end}) invalid for {m} positions")));
        }
        let cols = |gold: usize| {
            std::iter::once(gold)
                .chain((0..m).filter(move |&j| j != gold))
                .collect::<Vec<_>>()
        };
        let ws = tape.param(self.w_start);
        let we = tape.param(self.w_end);
        let s = tape.matmul_bt(ws, hiddens);
        let e = tape.matmul_bt(we, hiddens);
        let ls = tape.cross_entropy(s, vec![cols(start)]);
        let le = tape.cross_entropy(e, vec![cols(end)]);
        let both = tape.concat_rows(&[ls, le]);
        Ok(tape.sum(both))
    }
}

/// Linear layer plus softmax over `labels` classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    /// `labels × d`.
    pub w: ParamId,
    /// `1 × labels`.
    pub b: ParamId,
    pub labels: usize,
}

impl ClassifierHead {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamStore,
        d: usize,
        labels: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if labels < 2 {
            return Err(Error::config(format!("classifier needs ≥ 2 labels, got {labels}")));
        }
        Ok(Self {
            w: params.register("cls.w", truncated_normal(&[labels, d], std, rng))?,
            b: params.register("cls.b", Tensor::zeros(&[1, labels]))?,
            labels,
        })
    }

    /// Mean NLL of `labels` given global representations `n × d`.
    pub fn nll(&self, tape: &mut Tape<'_>, global: Var, labels: &[usize]) -> Result<Var> {
        if labels.len() != tape.value(global).rows() || labels.iter().any(|&l| l >= self.labels) {
            return Err(Error::contract("one in-range label per row"));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matmul_bt(global, w);
        let z = tape.add_row(z, b);
        let k = self.labels;
        let cols = labels
            .iter()
            .map(|&l| std::iter::once(l).chain((0..k).filter(|&j| j != l)).collect())
            .collect();
        let ce = tape.cross_entropy(z, cols);
        Ok(tape.mean(ce))
    }
}

/// `softmax(W·global + b)`.
pub fn classify(params: &ParamStore, head: &ClassifierHead, global: &[f64]) -> Result<Vec<f64>> {
    let w = params.get(head.w);
    if w.cols() != global.len() {
        return Err(Error::contract("classifier width does not match representation"));
    }
    let b = params.get(head.b).data();
    let logits: Vec<f64> = (0..head.labels)
        .map(|l| dot(w.row_slice(l), global) + b[l])
        .collect();
    softmax(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hiddens(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![m, d], data).unwrap()
    }

    fn brute_force(ps: &[f64], pe: &[f64]) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for e in 0..pe.len() {
            for s in 0..=e {
                let p = ps[s] * pe[e];
                if p > best.2 {
                    best = (s, e, p);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn identical_hiddens_give_uniform_start() {
        let h = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9]; 6]).unwrap();
        let p = SpanDecoderParams {
            w_start: vec![1.0, 2.0, 3.0],
            w_end: vec![0.5, 0.1, -1.0],
        };
        let (ps, _) = span_distributions(&h, &p).unwrap();
        assert!(ps.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        let d = qa_span_decode(&h, &p).unwrap();
        assert_eq!((d.start, d.end), (0, 0));
    }

    #[test]
    fn singleton_context() {
        let h = Tensor::from_rows(&[vec![0.4, 0.1]]).unwrap();
        let p = SpanDecoderParams {
            w_start: vec![1.0, 1.0],
            w_end: vec![-1.0, 2.0],
        };
        let d = qa_span_decode(&h, &p).unwrap();
        assert_eq!((d.start, d.end, d.probability), (0, 0, 1.0));
        let empty = Tensor::zeros(&[0, 2]);
        assert!(qa_span_decode(&empty, &p).is_err());
    }

    #[test]
    fn matches_enumeration_at_m12() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let h = random_hiddens(12, 6, &mut rng);
            let p = SpanDecoderParams {
                w_start: (0..6).map(|_| rng.random_range(-3.0..3.0)).collect(),
                w_end: (0..6).map(|_| rng.random_range(-3.0..3.0)).collect(),
            };
            let (ps, pe) = span_distributions(&h, &p).unwrap();
            let d = qa_span_decode(&h, &p).unwrap();
            assert!(d.start <= d.end);
            assert_eq!((d.start, d.end), brute_force(&ps, &pe));
        }
    }

    #[test]
    fn ties_prefer_earliest() {
        let d = decode_from_probs(&[0.25; 4], &[0.25; 4]);
        assert_eq!((d.start, d.end), (0, 0));
        let d = decode_from_probs(&[0.1, 0.4, 0.4, 0.1], &[0.1, 0.1, 0.4, 0.4]);
        assert_eq!((d.start, d.end), (1, 2));
    }

    #[test]
    fn classifier_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        assert!(matches!(
            ClassifierHead::register(&mut store, 4, 1, 0.1, &mut rng),
            Err(Error::Config(_))
        ));
        let zero = ClassifierHead::register(&mut store, 4, 3, 0.0, &mut rng).unwrap();
        let p = classify(&store, &zero, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let mut store = ParamStore::new();
        let head = ClassifierHead::register(&mut store, 4, 5, 1.0, &mut rng).unwrap();
        for _ in 0..100 {
            let g: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = classify(&store, &head, &g).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cls = ClassifierHead::register(&mut store, 6, 3, 0.5, &mut rng).unwrap();
        let qa = SpanDecoderHead::register(&mut store, 6, 0.5, &mut rng).unwrap();
        let g = random_hiddens(4, 6, &mut rng);
        let h = random_hiddens(9, 6, &mut rng);
        let cfg = GradCheckConfig {
            coords_per_param: None,
            ..Default::default()
        };
        let report = finite_diff_check(
            &store,
            |p| {
                let mut tape = Tape::new(p);
                let gv = tape.constant(g.clone());
                let loss = cls.nll(&mut tape, gv, &[0, 2, 1, 2])?;
                let v = tape.value(loss).item();
                Ok((v, tape.backward(loss)?.params))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let report = finite_diff_check(
            &store,
            |p| {
                let mut tape = Tape::new(p);
                let hv = tape.constant(h.clone());
                let loss = qa.nll(&mut tape, hv, 2, 5)?;
                let v = tape.value(loss).item();
                Ok((v, tape.backward(loss)?.params))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
