use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relspeak::data::{
    build_vocab, read_dataset, synth_generate, tokenize, write_dataset, Split, SynthConfig,
    Vocabulary,
};
use relspeak::harness::verify::run_verify;
use relspeak::harness::{evaluate, train, Checkpoint, MainMetric, TrainConfig, BEST_CKPT};
use relspeak::model::{greedy_decode, ModelConfig, Variant};

#[derive(Parser)]
#[command(
    name = "relspeak",
    about = "Train and evaluate relational speaker models that caption the difference between two images."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-scene dataset (JSONL).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total number of examples across all splits.
        #[arg(long, default_value_t = 2400)]
        count: usize,
        /// Grid side; each image has n*n cells.
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Feature dimension per cell.
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a variant on a dataset with early stopping.
    Train {
        #[arg(long)]
        variant: Variant,
        /// Dataset JSONL produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, the vocabulary, and logs.
        /// Training resumes if it already holds a checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Evaluations without improvement before stopping.
        #[arg(long, default_value_t = 10)]
        patience: usize,
        /// Early-stopping metric: cider, bleu4, or rougel.
        #[arg(long, default_value = "cider")]
        metric: MainMetric,
        #[arg(long, default_value_t = 512)]
        hidden: usize,
        #[arg(long, default_value_t = 256)]
        embed: usize,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional path for the full JSON report (metrics + predictions).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption a single example by id.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Run the built-in correctness suite (gradient checks, oracle
    /// comparison, attention invariants).
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per grid size in the oracle comparison.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => anyhow::bail!("unknown split '{other}' (expected train, val, or test)"),
    }
}

fn vocab_from_dataset(data: &relspeak::data::Dataset) -> anyhow::Result<Vocabulary> {
    let corpus: Vec<Vec<String>> = data
        .split(Split::Train)
        .flat_map(|ex| ex.captions.iter().map(|c| tokenize(c)))
        .collect();
    Ok(build_vocab(&corpus, 1)?)
}

fn run() -> anyhow::Result<bool> {
    match Cli::parse().command {
        Command::GenData { seed, count, n, d, out } => {
            let cfg = SynthConfig {
                seed,
                count,
                grid_side: n,
                feature_dim: d,
                ..SynthConfig::default()
            };
            let ds = synth_generate(&cfg)?;
            write_dataset(&out, &ds)?;
            println!(
                "wrote {} examples (train {}, val {}, test {}) to {}",
                ds.examples.len(),
                ds.split(Split::Train).count(),
                ds.split(Split::Val).count(),
                ds.split(Split::Test).count(),
                out.display()
            );
        }
        Command::Train {
            variant,
            data,
            out,
            seed,
            lr,
            batch,
            epochs,
            patience,
            metric,
            hidden,
            embed,
            dropout,
        } => {
            let ds = read_dataset(&data)?;
            let (n, d) = match (ds.grid_side(), ds.feature_dim()) {
                (Some(n), Some(d)) => (n, d),
                _ => anyhow::bail!("dataset {} is empty", data.display()),
            };
            let vocab = vocab_from_dataset(&ds)?;
            let mut model_cfg = ModelConfig::new(variant, n, d, vocab.len());
            model_cfg.hidden_dim = hidden;
            model_cfg.embed_dim = embed;
            model_cfg.dropout_rate = dropout;
            let train_cfg = TrainConfig {
                lr,
                batch_size: batch,
                max_epochs: epochs,
                patience,
                main_metric: metric,
                seed,
                eval_every: 1,
            };
            std::fs::create_dir_all(&out)?;
            vocab.save(&out.join("vocab.txt"))?;
            println!(
                "training {} (hidden {hidden}, embed {embed}, vocab {}) on {} train examples",
                variant.name(),
                vocab.len(),
                ds.split(Split::Train).count()
            );
            let outcome = train(&ds, &vocab, &model_cfg, &train_cfg, &out, |log| {
                println!(
                    "epoch {:>3}  loss {:.4}  val {} {:.4}  bleu4 {:.4}  acc {:.4}  best {:.4} @ {}",
                    log.epoch,
                    log.train_loss,
                    metric.name(),
                    log.main,
                    log.bleu4,
                    log.token_accuracy,
                    log.best_main,
                    log.best_epoch
                );
                false
            })?;
            println!(
                "finished after {} epochs; best {} {:.4} at epoch {} ({})",
                outcome.epochs_run,
                metric.name(),
                outcome.best_main,
                outcome.best_epoch,
                out.join(BEST_CKPT).display()
            );
        }
        Command::Eval { ckpt, data, split, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let split = parse_split(&split)?;
            let outcome = evaluate(&ckpt.model_params(), &ckpt.model, &ckpt.vocabulary(), &ds, split)?;
            let json = serde_json::to_string_pretty(&outcome)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &json)?;
                    println!("wrote report to {}", path.display());
                }
                None => println!("{json}"),
            }
            println!(
                "{}: bleu4 {:.4}  rougeL {:.4}  cider {:.4}  token accuracy {:.4} ({} examples)",
                split.name(),
                outcome.report.bleu4,
                outcome.report.rouge_l,
                outcome.report.cider,
                outcome.token_accuracy,
                outcome.report.n_examples
            );
        }
        Command::Caption { ckpt, data, id } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let ex = ds
                .examples
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| anyhow::anyhow!("no example with id '{id}'"))?;
            let ids = greedy_decode(ex, &ckpt.model_params(), &ckpt.model)?;
            println!("{}", ckpt.vocabulary().decode_to_text(&ids));
        }
        Command::Verify { seed, instances } => {
            let report = run_verify(seed, instances)?;
            for c in &report.checks {
                println!(
                    "{} {} — {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let ok = report.all_pass();
            println!(
                "{} ({} checks)",
                if ok { "all checks passed" } else { "CHECKS FAILED" },
                report.checks.len()
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
