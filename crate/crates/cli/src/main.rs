use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use infoword::encoders::AttnMask;
use infoword::error::{Error, Result};
use infoword::harness::{
    mi_synthetic_eval, mlm_probe, qa_span_decode, retrieval_probe, MiEvalConfig,
    SpanDecoderParams, SyntheticJoint,
};
use infoword::masking::{apply_span_masks, select_mlm_targets, MaskedExample, MlmConfig};
use infoword::numeric::Tensor;
use infoword::text::{read_corpus, tokenize, Vocabulary};
use infoword::training::{load_corpus, prepare_sequences, train, Checkpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "infoword", version, about = "Contrastive span pretraining toolkit")]
struct Cli {
    /// Seed for every random draw (pretrain: overrides `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

const DEFAULT_SEED: u64 = 13;

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder; writes metrics.jsonl and checkpoint.bin.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `data.out_dir`, else the config's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out text.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Held-out corpus, one sentence per line (default: the training corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        candidates: usize,
        #[arg(long, default_value_t = 20)]
        groups: usize,
    },
    /// InfoNCE estimates on a categorical joint for several candidate-set sizes.
    MiCheck {
        #[arg(long)]
        joint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print masked examples as JSON lines.
    MaskPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lines: usize,
    },
    /// Best answer span under given start/end vectors.
    DecodeSpan {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON with `context`, optional `question`, `w_start` and `w_end`.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Retrieval,
    MlmAcc,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Pretrain { config, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let out_dir = out
                .or_else(|| cfg.data.out_dir.clone())
                .unwrap_or_else(|| config.parent().map(PathBuf::from).unwrap_or_default());
            let (vocab, sequences) = load_corpus(&cfg)?;
            let outcome = train(cfg, vocab, sequences, &out_dir)?;
            print_json(&serde_json::json!({
                "steps": outcome.steps,
                "final_loss": outcome.final_loss,
                "metrics": outcome.metrics,
                "checkpoint": outcome.checkpoint,
            }))
        }
        Command::Probe {
            checkpoint,
            task,
            corpus,
            candidates,
            groups,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.encoder()?;
            let path = corpus
                .or_else(|| ckpt.config.data.corpus.clone())
                .ok_or_else(|| Error::Config("no --corpus given and the checkpoint names none".into()))?;
            let sentences = read_corpus(io::BufReader::new(fs::File::open(path)?))?;
            let seqs = prepare_sequences(&sentences, &ckpt.vocab, ckpt.config.train.max_len)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = match task {
                Task::Retrieval => retrieval_probe(&model, &seqs, candidates, groups, &mut rng)?,
                Task::MlmAcc => mlm_probe(&model, &seqs, candidates, groups, &mut rng)?,
            };
            print_json(&report)
        }
        Command::MiCheck {
            joint,
            candidates,
            steps,
        } => {
            let joint = SyntheticJoint::load(&joint)?;
            let mut cfg = MiEvalConfig {
                seed,
                ..MiEvalConfig::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let report = mi_synthetic_eval(&joint, &candidates, &cfg)?;
            let verdict = if report.all_within_cap() { "pass" } else { "fail" };
            print_json(&serde_json::json!({
                "analytic_mi": report.analytic_mi,
                "points": report.points,
                "bound_cap": verdict,
            }))
        }
        Command::MaskPreview { config, lines } => {
            let cfg = TrainConfig::load(&config)?;
            let (vocab, sequences) = load_corpus(&cfg)?;
            mask_preview(&cfg, &vocab, &sequences, lines, seed)
        }
        Command::DecodeSpan { checkpoint, input } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let query: SpanQuery = serde_json::from_str(&fs::read_to_string(input)?)?;
            decode_span(&ckpt, &query)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct PreviewRecord<'a> {
    line: usize,
    sentence: usize,
    #[serde(flatten)]
    example: &'a MaskedExample,
    corrupted_text: Vec<&'a str>,
    target_text: Vec<&'a str>,
}

fn mask_preview(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    sequences: &[infoword::text::TokenSequence],
    lines: usize,
    seed: u64,
) -> Result<()> {
    if sequences.is_empty() && lines > 0 {
        return Err(Error::Config("corpus has no sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlm = MlmConfig {
        rate: cfg.objective.mask_rate,
        ..MlmConfig::default()
    };
    let text = |ids: &[u32]| -> Vec<&str> {
        ids.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect()
    };
    let mut out = io::stdout().lock();
    let mut line = 0;
    // Cycle through the corpus until enough records exist.
    for (sentence, seq) in sequences.iter().enumerate().cycle() {
        if line == lines {
            break;
        }
        let mut batch = Vec::new();
        if let Ok(ex) = select_mlm_targets(&seq.ids, &mlm, vocab.word_ids(), &mut rng) {
            batch.push(ex);
        }
        batch.extend(apply_span_masks(&seq.ids, cfg.objective.span_budget, &mut rng)?);
        for ex in &batch {
            if line == lines {
                break;
            }
            let rec = PreviewRecord {
                line,
                sentence,
                example: ex,
                corrupted_text: text(&ex.corrupted),
                target_text: text(&ex.targets),
            };
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out)?;
            line += 1;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanQuery {
    #[serde(default)]
    question: Option<String>,
    context: String,
    w_start: Vec<f64>,
    w_end: Vec<f64>,
}

fn decode_span(ckpt: &Checkpoint, q: &SpanQuery) -> Result<()> {
    let vocab = &ckpt.vocab;
    let context = tokenize(&q.context);
    if context.is_empty() {
        return Err(Error::Config("context has no tokens".into()));
    }
    let mut ids = vec![Vocabulary::CLS];
    if let Some(question) = &q.question {
        ids.extend(tokenize(question).iter().map(|t| vocab.id(t)));
        ids.push(Vocabulary::SEP);
    }
    let offset = ids.len();
    let room = ckpt.config.model.max_positions.saturating_sub(offset);
    if room == 0 {
        return Err(Error::Config("question leaves no room for the context".into()));
    }
    let context = &context[..context.len().min(room)];
    ids.extend(context.iter().map(|t| vocab.id(t)));
    let model = ckpt.encoder()?;
    let out = model.encode(&ids, AttnMask::ALL)?;
    let rows: Vec<Vec<f64>> = (offset..ids.len())
        .map(|r| out.hiddens.row_slice(r).to_vec())
        .collect();
    let params = SpanDecoderParams {
        w_start: q.w_start.clone(),
        w_end: q.w_end.clone(),
    };
    let span = qa_span_decode(&Tensor::from_rows(&rows)?, &params)?;
    print_json(&serde_json::json!({
        "start": span.start,
        "end": span.end,
        "probability": span.probability,
        "answer": context[span.start..=span.end].join(" "),
    }))
}
