use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use infoword::harness::TopicCorpus;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn infoword(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infoword"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Writes a toy corpus plus a config for a 6-step run into `dir`.
fn toy_run(dir: &Path) -> std::path::PathBuf {
    let sentences = TopicCorpus::default().generate(80, &mut ChaCha8Rng::seed_from_u64(3));
    let text: String = sentences.iter().map(|s| s.join(" ") + "\n").collect();
    fs::write(dir.join("corpus.txt"), text).unwrap();
    let cfg = r#"{
        "model": {"d_model": 8, "layers": 1, "heads": 2, "ffn_dim": 16, "max_positions": 16, "init_std": 0.1},
        "train": {"total_steps": 6, "warmup_steps": 2, "batch_size": 4, "max_len": 16, "lr": 0.01},
        "data": {"corpus": "corpus.txt", "out_dir": "run"}
    }"#;
    let path = dir.join("cfg.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["--no-such-flag"][..],
        &[][..],
        &["pretrain"][..],
        &["probe", "--checkpoint", "x", "--task", "nonsense"][..],
        &["mi-check", "--joint", "j.json"][..],
    ] {
        let o = infoword(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
    let o = infoword(&["--no-such-flag"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage: infoword"));
}

#[test]
fn help_exits_zero() {
    let o = infoword(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mask-preview"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = infoword(&["pretrain", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let o = infoword(&["mask-preview", "--config", bad.to_str().unwrap(), "--lines", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = infoword(&["probe", "--checkpoint", missing.to_str().unwrap(), "--task", "retrieval"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_probe_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run(dir.path());
    let o = infoword(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.is_file());
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps"], 6);

    let c = ckpt.to_str().unwrap();
    for task in ["retrieval", "mlm-acc"] {
        let o = infoword(&["probe", "--checkpoint", c, "--task", task, "--candidates", "8", "--groups", "3"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
        let v = r["value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
        let band = r["band"].as_array().unwrap();
        assert!(band[0].as_f64().unwrap() <= v && v <= band[1].as_f64().unwrap());
    }
    let o = infoword(&["probe", "--checkpoint", c, "--task", "retrieval", "--candidates", "500"]);
    assert_eq!(o.status.code(), Some(2));

    let input = dir.path().join("q.json");
    fs::write(
        &input,
        r#"{"question": "f1 a0w1", "context": "a0w0 a0w1 f2 a0w3 f5",
            "w_start": [1, 0, 0, 0, 0, 0, 0, 0], "w_end": [0, 1, 0, 0, 0, 0, 0, 0]}"#,
    )
    .unwrap();
    let o = infoword(&["decode-span", "--checkpoint", c, "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let (s, e) = (r["start"].as_u64().unwrap(), r["end"].as_u64().unwrap());
    assert!(s <= e && e < 5);
    let p = r["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);

    fs::write(&input, r#"{"context": "a0w0", "w_start": [1], "w_end": [1]}"#).unwrap();
    let o = infoword(&["decode-span", "--checkpoint", c, "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mask_preview_prints_exact_line_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run(dir.path());
    for n in ["3", "0", "250"] {
        let o = infoword(&["mask-preview", "--config", cfg.to_str().unwrap(), "--lines", n]);
        assert_eq!(o.status.code(), Some(0));
        let out = stdout(&o);
        assert_eq!(out.lines().count(), n.parse::<usize>().unwrap());
        for line in out.lines() {
            let rec: Value = serde_json::from_str(line).unwrap();
            assert!(rec["kind"].is_string());
            assert_eq!(rec["corrupted"].as_array().unwrap().len(), rec["original"].as_array().unwrap().len());
        }
    }
}

#[test]
fn mi_check_reports_bound_cap() {
    let dir = tempfile::tempdir().unwrap();
    let joint = dir.path().join("joint.json");
    fs::write(&joint, r#"{"table": [[0.5, 0.0], [0.0, 0.5]]}"#).unwrap();
    let o = infoword(&["mi-check", "--joint", joint.to_str().unwrap(), "--candidates", "2,16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["bound_cap"], "pass");
    assert!((r["analytic_mi"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
    let points = r["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    for p in points {
        assert!(p["estimate"].as_f64().unwrap() <= p["cap"].as_f64().unwrap());
    }

    fs::write(&joint, r#"{"table": [[0.7, 0.0], [0.0, 0.5]]}"#).unwrap();
    let o = infoword(&["mi-check", "--joint", joint.to_str().unwrap(), "--candidates", "2"]);
    assert_eq!(o.status.code(), Some(2));
}
