use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use cutie_core::data::synth::{synth_generate, SynthSpec};
use cutie_core::data::{load_dataset, save_dataset, ClassSet, Document};
use cutie_core::gridder::{map_to_grid, GridShape};
use cutie_core::infer::{InferRequest, Predictor};
use cutie_core::metrics::{evaluate, DocPrediction};
use cutie_core::model::{Checkpoint, CutieModel};
use cutie_core::tokenizer::{build_vocab_min_count, tokenize_document, Vocabulary};
use cutie_core::trainer::{predict_all, prepare, Trainer};

mod config;
mod serve;

use config::{FileConfig, CONFIG_ENV};

#[derive(Parser)]
#[command(name = "cutie", version, about = "Grid-based key information extraction")]
struct Cli {
    /// JSON file with optional `model`, `train` and `vocab` sections.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Class names, one JSON array; defaults to the receipt classes.
    #[arg(long, global = true)]
    classes: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled receipts as JSONL.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Positional noise in points.
        #[arg(long)]
        jitter: Option<f64>,
        /// Line spacing range, e.g. `1.0,1.5`.
        #[arg(long, value_parser = parse_pair)]
        spacing: Option<(f64, f64)>,
    },
    /// Build a vocabulary file from a dataset.
    Vocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Write the token grid of one document as text.
    GridDump {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Document id; the first document by default.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        cols: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; checkpoints go to `<out>/step-<N>.ckpt`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary file; built from the training data when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Continue from a checkpoint, optimizer state included.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score a model (or a prediction file) against labeled documents.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predicted", required_unless_present = "predicted")]
        checkpoint: Option<PathBuf>,
        /// Labeled JSONL whose labels are taken as predictions, matched by id.
        #[arg(long)]
        predicted: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Annotate documents (a JSON document or JSONL) with predicted classes.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "cols")]
        rows: Option<usize>,
        #[arg(long, requires = "rows")]
        cols: Option<usize>,
    },
    /// Print the exact number of model parameters.
    ParamCount {
        #[arg(long)]
        embedding_dim: Option<usize>,
    },
    /// Serve `POST /infer` and `GET /healthz` over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_docs(path: &Path, classes: &ClassSet) -> Result<Vec<Document>> {
    load_dataset(path, classes).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let classes = match &cli.classes {
        Some(path) => ClassSet::load(path)?,
        None => ClassSet::receipts(),
    };
    match cli.command {
        Command::Synth {
            n,
            out,
            jitter,
            spacing,
        } => {
            let mut spec = SynthSpec::new(n, cli.seed.unwrap_or(0));
            if let Some(j) = jitter {
                spec.jitter = j;
            }
            if let Some(s) = spacing {
                spec.line_spacing = s;
            }
            save_dataset(&out, &synth_generate(&spec)?)?;
        }
        Command::Vocab {
            data,
            out,
            max_size,
            min_count,
        } => {
            let docs = load_docs(&data, &classes)?;
            let vocab = build_vocab_min_count(
                &docs,
                max_size.unwrap_or(cfg.vocab.max_size),
                min_count.unwrap_or(cfg.vocab.min_count),
            )?;
            vocab.save(&out)?;
            println!("{} tokens", vocab.len());
        }
        Command::GridDump {
            data,
            vocab,
            id,
            rows,
            cols,
            out,
        } => {
            let docs = load_docs(&data, &classes)?;
            let doc = match &id {
                Some(id) => docs.iter().find(|d| &d.id == id),
                None => docs.first(),
            }
            .with_context(|| format!("document {} not found", id.as_deref().unwrap_or("#0")))?;
            let vocab = Vocabulary::load(&vocab)?;
            let pieces = tokenize_document(doc, &vocab);
            let grid = map_to_grid(doc, &pieces, &classes, GridShape::new(rows, cols)?)?;
            write_output(out.as_deref(), &grid.dump(&pieces))?;
        }
        Command::Train {
            data,
            out,
            vocab,
            resume,
            steps,
        } => train(cfg, &classes, &data, &out, vocab.as_deref(), resume.as_deref(), steps)?,
        Command::Eval {
            data,
            checkpoint,
            predicted,
            json,
        } => {
            let docs = load_docs(&data, &classes)?;
            let preds = match (checkpoint, predicted) {
                (Some(ck), _) => {
                    let predictor = Predictor::from_checkpoint(load_checkpoint(&ck)?, None)?;
                    ensure!(
                        predictor.classes.len() == classes.len(),
                        "checkpoint predicts {} classes, evaluation uses {}",
                        predictor.classes.len(),
                        classes.len()
                    );
                    let examples = prepare(&docs, &predictor.vocab, &classes);
                    predict_all(&predictor.model, &examples, predictor.grid)?
                }
                (None, Some(p)) => label_predictions(&docs, &load_docs(&p, &classes)?, &classes)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let report = evaluate(&preds, &classes)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            rows,
            cols,
        } => {
            let grid = match (rows, cols) {
                (Some(r), Some(c)) => Some(GridShape::new(r, c)?),
                _ => None,
            };
            let predictor = Predictor::from_checkpoint(load_checkpoint(&checkpoint)?, grid)?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let rendered = match serde_json::from_str::<InferRequest>(&text) {
                Ok(req) => serde_json::to_string_pretty(&predictor.predict(&req)?)? + "\n",
                Err(_) => {
                    let mut lines = String::new();
                    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                        let req: InferRequest =
                            serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
                        lines += &serde_json::to_string(&predictor.predict(&req)?)?;
                        lines.push('\n');
                    }
                    lines
                }
            };
            write_output(out.as_deref(), &rendered)?;
        }
        Command::ParamCount { embedding_dim } => {
            let mut model = cfg.model;
            if let Some(e) = embedding_dim {
                model.embedding_dim = e;
            }
            println!("{}", CutieModel::<f32>::build(model, 0)?.param_count());
        }
        Command::Serve { checkpoint, addr } => {
            let predictor = Predictor::from_checkpoint(load_checkpoint(&checkpoint)?, None)?;
            serve::serve(predictor, addr)?;
        }
    }
    Ok(())
}

fn train(
    mut cfg: FileConfig,
    classes: &ClassSet,
    data: &Path,
    out: &Path,
    vocab_path: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<u64>,
) -> Result<()> {
    let docs = load_docs(data, classes)?;
    if docs.is_empty() {
        bail!("{} holds no documents", data.display());
    }
    if let Some(s) = steps {
        cfg.train.max_steps = s;
    }
    fs::create_dir_all(out)?;
    let checkpoint = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.expect_classes(classes)?;
            if ck.vocab.is_none() {
                bail!("{} carries no vocabulary", path.display());
            }
            ck
        }
        None => {
            let vocab = match vocab_path {
                Some(p) => Vocabulary::load(p)?,
                None => build_vocab_min_count(&docs, cfg.vocab.max_size, cfg.vocab.min_count)?,
            };
            vocab.save(&out.join("vocab.txt"))?;
            cfg.model.vocab_size = vocab.len();
            cfg.model.num_classes = classes.len();
            let mut ck = Checkpoint::new(CutieModel::build(cfg.model.clone(), cfg.train.seed)?);
            ck.vocab = Some(vocab);
            ck.classes = Some(classes.clone());
            ck
        }
    };
    let vocab = checkpoint.vocab.clone().expect("set above");
    let examples = prepare(&docs, &vocab, classes);
    let mut trainer = Trainer::new(checkpoint, cfg.train.clone())?.with_out_dir(out);
    let log = trainer.run(&examples, &mut ())?;
    match log.last() {
        Some(last) => println!(
            "trained to step {} (loss {:.5}); checkpoint {}",
            last.step + 1,
            last.loss,
            out.join(format!("step-{}.ckpt", last.step + 1)).display()
        ),
        None => println!("already at step {}; nothing to do", trainer.step()),
    }
    Ok(())
}

/// Token-level predictions from the labels of `predicted`, aligned with
/// `truth` by document id and token index.
fn label_predictions(truth: &[Document], predicted: &[Document], classes: &ClassSet) -> Result<Vec<DocPrediction>> {
    truth
        .iter()
        .map(|t| {
            let p = predicted
                .iter()
                .find(|p| p.id == t.id)
                .with_context(|| format!("no prediction for document {:?}", t.id))?;
            if p.tokens.len() != t.tokens.len() {
                bail!("document {:?}: {} predicted tokens for {}", t.id, p.tokens.len(), t.tokens.len());
            }
            let labels = |d: &Document| -> Vec<usize> { d.label_indices(classes).into_iter().map(|l| l.unwrap_or(0)).collect() };
            let keys = (0..t.tokens.len()).map(|i| (i, 0)).collect();
            Ok(DocPrediction::new(t.id.clone(), keys, labels(t), labels(p))?)
        })
        .collect()
}
