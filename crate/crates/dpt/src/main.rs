use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use dpt::commands::{self, FinetuneArgs};
use dpt::core::dpt::Paradigm;
use dpt::core::harness::ExperimentConfig;
use dpt::core::world::SplitName;
use dpt::io;
use dpt::runner::{self, RunOptions};

#[derive(Parser)]
#[command(name = "dpt", about = "Declaration-based prompt tuning on a synthetic VQA world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test splits into a dataset directory.
    BuildDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask the answer out of each full answer.
    BuildDeclarations {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Induce question-to-declaration rules from a declaration corpus.
    FitConverter {
        #[arg(long)]
        declarations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert questions with a fitted converter.
    Convert {
        #[arg(long)]
        model: PathBuf,
        /// A single question; printed to stdout.
        #[arg(long, conflicts_with = "questions")]
        question: Option<String>,
        /// JSONL with a `question` field per line.
        #[arg(long, requires = "out")]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus BLEU between two declaration files.
    Bleu {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Pre-train the encoder with masked language modeling and image-text matching.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint stem; writes `<out>.bin`, `<out>.json`, `<out>.log.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pre-trained checkpoint and evaluate it on the test split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_paradigm)]
        paradigm: Paradigm,
        /// Few-shot training set size; the full train split when absent.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, default_value_t = 0)]
        split_index: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitName,
        #[arg(long, value_parser = parse_paradigm)]
        paradigm: Paradigm,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Pre-train, fine-tune and evaluate per the config into a run directory.
    RunExperiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse this pre-trained checkpoint.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Rebuild report.md, report.json and plots from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "report")]
        title: String,
    },
    /// Print the default experiment configuration.
    DefaultConfig,
}

fn parse_paradigm(s: &str) -> Result<Paradigm, String> {
    Paradigm::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Paradigm::ALL.iter().map(|p| p.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    SplitName::parse(s).ok_or_else(|| "expected train, val or test".to_string())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_accuracy(a: &dpt::core::eval::Accuracy) {
    println!("n = {}, accuracy = {:.4}, soft accuracy = {:.4}", a.n, a.exact, a.soft);
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::BuildDataset { config, out } => {
            commands::build_dataset_dir(&load_config(config.as_deref())?, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Cmd::BuildDeclarations { annotations, out } => {
            let n = commands::build_declarations(&annotations, &out)?;
            eprintln!("{n} declarations written to {}", out.display());
        }
        Cmd::FitConverter { declarations, out } => {
            for w in commands::fit_converter(&declarations, &out)? {
                eprintln!("warning: {w}");
            }
        }
        Cmd::Convert { model, question, questions, out } => match (question, questions, out) {
            (Some(q), _, _) => {
                let m: dpt::core::declaration::ConverterModel = io::read_json(&model)?;
                println!("{}", dpt::core::declaration::convert(&q, &m));
            }
            (None, Some(qs), Some(out)) => {
                let n = commands::convert_file(&model, &qs, &out)?;
                eprintln!("{n} questions converted");
            }
            _ => return Err(anyhow!("give --question, or --questions with --out")),
        },
        Cmd::Bleu { candidates, references } => {
            println!("{:.6}", commands::bleu_files(&candidates, &references)?);
        }
        Cmd::Pretrain { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            commands::pretrain(&data, &cfg, &out, |e| {
                eprintln!("step {}: mlm {:.4} itm {:.4} itm acc {:.3}", e.step, e.mlm_loss, e.itm_loss, e.itm_acc)
            })?;
        }
        Cmd::Finetune { data, ckpt, paradigm, shots, split_index, config, out, predictions } => {
            let cfg = load_config(config.as_deref())?;
            let args = FinetuneArgs { paradigm, shots, split_index, out: out.as_deref(), predictions: predictions.as_deref() };
            print_accuracy(&commands::finetune(&data, &ckpt, &cfg, &args)?);
        }
        Cmd::Eval { data, ckpt, split, paradigm, config, predictions } => {
            let cfg = load_config(config.as_deref())?;
            print_accuracy(&commands::eval_checkpoint(&data, &ckpt, split, paradigm, &cfg, predictions.as_deref())?);
        }
        Cmd::RunExperiment { config, out, pretrained } => {
            let cfg = load_config(config.as_deref())?;
            let run = runner::run_experiment(&cfg, &out, &RunOptions { pretrained }, &mut |m| eprintln!("{m}"))?;
            print!("{}", std::fs::read_to_string(run.dir.join("report.md"))?);
        }
        Cmd::Report { records, out, title } => {
            commands::report_from_records(&records, &out, &title)?;
            eprintln!("wrote {}", out.join("report.md").display());
        }
        Cmd::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    Ok(())
}
