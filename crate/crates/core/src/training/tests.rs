use super::*;
use crate::masking::{Corruption, TargetKind};
use approx::assert_relative_eq;

fn store(values: &[f64]) -> (ParamStore, crate::numeric::ParamId) {
    let mut p = ParamStore::new();
    let id = p
        .register("w", Tensor::new(vec![1, values.len()], values.to_vec()).unwrap())
        .unwrap();
    (p, id)
}

fn grads_of(p: &ParamStore, id: crate::numeric::ParamId, g: &[f64]) -> Gradients {
    let mut grads = Gradients::empty(p);
    grads.accumulate(id, Tensor::new(vec![1, g.len()], g.to_vec()).unwrap());
    grads
}

const NO_DECAY: AdamConfig = AdamConfig {
    beta1: 0.9,
    beta2: 0.98,
    eps: 1e-6,
    weight_decay: 0.0,
};

#[test]
fn adam_first_step_is_signed_lr() {
    let (mut p, id) = store(&[1.0, -2.0, 0.5]);
    let g = [0.3, -4.0, 1e-2];
    let mut st = AdamState::new(&p);
    let gr = grads_of(&p, id, &g);
    adam_step(&mut p, &gr, &mut st, &NO_DECAY, 1e-3).unwrap();
    for (k, (before, gk)) in [1.0, -2.0, 0.5].iter().zip(g).enumerate() {
        let step = p.get(id).data()[k] - before;
        // m̂ = g and v̂ = g², so the step is −lr·g/(|g| + ε).
        assert_relative_eq!(step, -1e-3 * gk / (gk.abs() + 1e-6), epsilon = 1e-15);
        assert_relative_eq!(step, -1e-3 * gk.signum(), max_relative = 1e-3);
    }
    assert_eq!(st.t, 1);
}

#[test]
fn adam_zero_gradient_without_decay_is_identity() {
    let (mut p, id) = store(&[1.0, -2.0]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    let gr = grads_of(&p, id, &[0.0, 0.0]);
    adam_step(&mut p, &gr, &mut st, &NO_DECAY, 0.1).unwrap();
    assert_eq!(p, before);
    adam_step(&mut p, &Gradients::empty(&before), &mut st, &NO_DECAY, 0.1).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_decoupled_decay() {
    let (mut p, id) = store(&[2.0]);
    let mut st = AdamState::new(&p);
    let cfg = AdamConfig {
        weight_decay: 0.01,
        ..NO_DECAY
    };
    let gr = grads_of(&p, id, &[0.0]);
    adam_step(&mut p, &gr, &mut st, &cfg, 0.5).unwrap();
    assert_relative_eq!(p.get(id).data()[0], 2.0 * (1.0 - 0.5 * 0.01), epsilon = 1e-15);
}

#[test]
fn adam_rejects_non_finite_without_touching_state() {
    let (mut p, id) = store(&[1.0, 1.0]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    let gr = grads_of(&p, id, &[0.0, f64::NAN]);
    let err = adam_step(&mut p, &gr, &mut st, &NO_DECAY, 0.1)
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "w"));
    assert_eq!(p, before);
    assert_eq!(st.t, 0);
}

#[test]
fn adam_update_magnitude_approaches_lr() {
    let (mut p, id) = store(&[0.0]);
    let mut st = AdamState::new(&p);
    let g = grads_of(&p, id, &[0.7]);
    let mut last = 0.0;
    for _ in 0..2000 {
        let before = p.get(id).data()[0];
        adam_step(&mut p, &g, &mut st, &NO_DECAY, 0.01).unwrap();
        last = (p.get(id).data()[0] - before).abs();
        assert!(last <= 0.01 * (1.0 + 1e-9));
    }
    assert_relative_eq!(last, 0.01, max_relative = 1e-4);
}

#[test]
fn default_hyperparameters() {
    let t = TrainSection::default();
    assert_eq!((t.beta1, t.beta2, t.eps, t.weight_decay), (0.9, 0.98, 1e-6, 0.01));
    assert_eq!((t.total_steps, t.warmup_steps, t.batch_size, t.max_len), (2000, 90, 16, 128));
    assert_eq!(AdamConfig::from(&t), AdamConfig::default());
}

#[test]
fn schedule_shape() {
    let t = TrainSection {
        lr: 1e-3,
        warmup_steps: 100,
        total_steps: 1000,
        ..Default::default()
    };
    assert_eq!(lr_schedule(0, &t), 0.0);
    assert_eq!(lr_schedule(100, &t), 1e-3);
    assert_relative_eq!(lr_schedule(50, &t), 5e-4, epsilon = 1e-18);
    assert_relative_eq!(lr_schedule(550, &t), 5e-4, epsilon = 1e-18);
    assert_eq!(lr_schedule(1000, &t), 0.0);
    assert_eq!(lr_schedule(5000, &t), 0.0);
}

fn token_ex(sequence: usize, targets: &[u32]) -> MaskedExample {
    let original: Vec<u32> = std::iter::once(Vocabulary::CLS)
        .chain(targets.iter().copied())
        .collect();
    MaskedExample {
        sequence,
        corrupted: original.clone(),
        original,
        positions: (1..=targets.len()).collect(),
        targets: targets.to_vec(),
        corruption: vec![Corruption::Keep; targets.len()],
        kind: TargetKind::Token,
    }
}

fn span_ex(sequence: usize, targets: &[u32]) -> MaskedExample {
    MaskedExample {
        kind: TargetKind::Span,
        ..token_ex(sequence, targets)
    }
}

#[test]
fn inbatch_counts_and_exclusion() {
    let (batch, skipped) = assemble_inbatch_negatives(
        vec![token_ex(0, &[10, 11, 12]), token_ex(1, &[20, 21, 22])],
        vec![span_ex(0, &[10, 11]), span_ex(0, &[12]), span_ex(1, &[20])],
    );
    assert_eq!(skipped, SkipCounts::default());
    for (e, sets) in batch.token_examples.iter().zip(&batch.token_candidates) {
        for s in sets {
            assert_eq!(s.len(), 4);
            for n in &s.negatives {
                assert!(!e.targets.contains(n));
            }
        }
    }
    assert_eq!(batch.span_candidates[0].negatives, vec![2]);
    assert_eq!(batch.span_candidates[2].negatives, vec![0, 1]);

    let (batch, skipped) =
        assemble_inbatch_negatives(vec![token_ex(3, &[10])], vec![span_ex(3, &[10])]);
    assert!(batch.token_examples.is_empty() && batch.span_examples.is_empty());
    assert_eq!(
        skipped,
        SkipCounts {
            token_examples: 1,
            span_examples: 1
        }
    );
}

#[test]
fn config_json() {
    let cfg = TrainConfig::default();
    let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let partial = TrainConfig::from_json(r#"{"train": {"total_steps": 10, "warmup_steps": 2}}"#)
        .unwrap();
    assert_eq!(partial.train.total_steps, 10);
    assert_eq!(partial.model.d_model, 128);
    assert!(TrainConfig::from_json(r#"{"train": {"bogus": 1}}"#).is_err());
    assert!(matches!(
        TrainConfig::from_json(r#"{"train": {"total_steps": 10, "warmup_steps": 20}}"#),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        TrainConfig::from_json(r#"{"train": {"batch_size": 1}}"#),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        TrainConfig::from_json(r#"{"objective": {"lambda_mlm": 0, "lambda_dim": 0}}"#),
        Err(Error::Config(_))
    ));
}

pub(crate) fn toy_setup(lambda_dim: f64) -> (TrainConfig, Vocabulary, Vec<TokenSequence>) {
    let words = ["red", "green", "blue", "cat", "dog", "fish", "runs", "sits", "eats", "fast"];
    let sentences: Vec<Vec<String>> = (0..40)
        .map(|i| {
            (0..6 + i % 5)
                .map(|k| words[(i * 7 + k * 3) % words.len()].to_string())
                .collect()
        })
        .collect();
    let vocab = Vocabulary::build(sentences.iter().flatten(), 1).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_positions: 16,
        init_std: 0.1,
        ..Default::default()
    };
    cfg.train.max_len = 16;
    cfg.train.batch_size = 4;
    cfg.train.total_steps = 6;
    cfg.train.warmup_steps = 2;
    cfg.train.lr = 1e-2;
    cfg.objective.lambda_dim = lambda_dim;
    let seqs = prepare_sequences(&sentences, &vocab, cfg.train.max_len).unwrap();
    (cfg, vocab, seqs)
}

fn run_all(t: &mut Trainer) -> Vec<StepMetrics> {
    let mut out = Vec::new();
    t.run(|_, m| {
        out.push(m.clone());
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn seeded_runs_are_identical() {
    let (cfg, vocab, seqs) = toy_setup(1.0);
    let a = run_all(&mut Trainer::new(cfg.clone(), vocab.clone(), seqs.clone()).unwrap());
    let b = run_all(&mut Trainer::new(cfg, vocab, seqs).unwrap());
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert!(a.iter().all(|m| m.loss_dim.is_some()));
}

#[test]
fn zero_dim_weight_is_mlm_only() {
    let (cfg, vocab, seqs) = toy_setup(0.0);
    let m = run_all(&mut Trainer::new(cfg, vocab, seqs).unwrap());
    assert!(m.iter().all(|m| m.loss_dim.is_none() && Some(m.loss_total) == m.loss_mlm));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let (cfg, vocab, seqs) = toy_setup(1.0);
    let mut direct = Trainer::new(cfg.clone(), vocab.clone(), seqs.clone()).unwrap();
    for _ in 0..3 {
        direct.train_step().unwrap();
    }
    let ckpt = direct.checkpoint();
    let bytes = ckpt.to_bytes();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.config, ckpt.config);
    assert_eq!(loaded.vocab, ckpt.vocab);
    assert_eq!(loaded.rng, ckpt.rng);
    assert_eq!(loaded.adam, ckpt.adam);
    assert_eq!(loaded, ckpt);
    for ((_, _, a), (_, _, b)) in loaded.params.iter().zip(ckpt.params.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let mut resumed = Trainer::resume(loaded, seqs).unwrap();
    let rest_direct = run_all(&mut direct);
    let rest_resumed = run_all(&mut resumed);
    assert_eq!(rest_direct, rest_resumed);
    assert_eq!(
        rest_direct[0].loss_total.to_bits(),
        rest_resumed[0].loss_total.to_bits()
    );
}

#[test]
fn checkpoint_errors() {
    let (cfg, vocab, seqs) = toy_setup(1.0);
    let t = Trainer::new(cfg.clone(), vocab.clone(), seqs).unwrap();
    let bytes = t.checkpoint().to_bytes();

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Checkpoint(_))));

    let mut version = bytes.clone();
    version[8] = 9;
    let err = Checkpoint::from_bytes(&version).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 40]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all, clearly not one").is_err());

    let mut wider = cfg;
    wider.model.d_model = 12;
    wider.model.vocab_size = vocab.len();
    let mut other = EncoderParams::new(
        wider.model,
        Init::Normal,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let before = other.params.clone();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(
        ckpt.restore_params(&mut other.params),
        Err(Error::Checkpoint(_))
    ));
    assert_eq!(other.params, before);
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let (mut cfg, vocab, seqs) = toy_setup(1.0);
    cfg.train.checkpoint_every = 3;
    let dir = tempfile::tempdir().unwrap();
    let out = train(cfg, vocab, seqs, dir.path()).unwrap();
    let text = std::fs::read_to_string(&out.metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["step", "lr", "loss_total", "loss_mlm", "loss_dim", "acc_mlm", "acc_dim"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("checkpoint-3.bin").exists());
    assert_eq!(Checkpoint::load(&out.checkpoint).unwrap().step, 6);
}

#[test]
fn unigram_negatives_option() {
    let (mut cfg, vocab, seqs) = toy_setup(1.0);
    cfg.objective.negatives = NegativeSource::Unigram;
    cfg.objective.unigram_negatives = 5;
    let mut t = Trainer::new(cfg, vocab, seqs).unwrap();
    let (batch, _) = t.next_batch().unwrap();
    for s in batch.token_candidates.iter().flatten() {
        assert_eq!(s.len(), 6);
        assert_eq!(s.source, NegativeSource::Unigram);
        assert!(s.negatives.iter().all(|&n| !Vocabulary::is_special(n)));
    }
    t.train_step().unwrap();
}
