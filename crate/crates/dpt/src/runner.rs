//! One experiment end to end, written into a run directory:
//!
//! ```text
//! config.json            the resolved configuration
//! pretrain_log.jsonl     losses every `log_every` steps
//! checkpoint/pretrained.{bin,json}
//! checkpoint/dpt_full.{bin,json}   first-seed full-DPT model, if supervised ran
//! health.json
//! records.jsonl          one ResultRecord per evaluated question
//! report.md, report.json, plots/*.png
//! summary.json           health, converter BLEU, match separation
//! ```
//!
//! Everything is a function of `config.json`, so rerunning it reproduces
//! every file byte for byte.

use std::path::{Path, PathBuf};

use dpt_core::encoder::EncoderParams;
use dpt_core::eval::{Report, ResultRecord};
use dpt_core::harness::{self, ExperimentConfig, MatchSeparation, Workspace};
use dpt_core::pretrain::PretrainHealth;
use dpt_core::world::SplitName;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::Result;
use crate::io::{self, JsonlWriter};
use crate::report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub health: PretrainHealth,
    pub converter_bleu: f64,
    pub converter_rules: usize,
    pub converter_warnings: usize,
    pub separation: Option<MatchSeparation>,
    pub n_records: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub records: Vec<ResultRecord>,
    pub report: Report,
    pub summary: Summary,
    pub pretrained: EncoderParams<f32>,
    pub dpt_full: Option<EncoderParams<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Load this checkpoint instead of pre-training.
    pub pretrained: Option<PathBuf>,
}

pub fn checkpoint_stem(dir: &Path, name: &str) -> PathBuf {
    dir.join("checkpoint").join(name)
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    dir: &Path,
    opts: &RunOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<RunOutputs> {
    cfg.validate()?;
    io::write_json(&dir.join("config.json"), cfg)?;
    progress(&format!("building dataset {:?}", cfg.sizes));
    let ws = Workspace::build(&cfg.world, cfg.sizes)?;
    let converter_bleu = ws.converter_bleu(SplitName::Test)?;
    progress(&format!("converter: {} rules, test BLEU {converter_bleu:.4}", ws.converter.rules.len()));

    let pretrained = match &opts.pretrained {
        Some(stem) => {
            let (p, v) = checkpoint::load_checkpoint(stem)?;
            if v != ws.vocab {
                return Err(dpt_core::Error::VocabMismatch(format!("{} was trained on another vocabulary", stem.display())).into());
            }
            p
        }
        None => {
            let mut log = JsonlWriter::create(&dir.join("pretrain_log.jsonl"))?;
            let mut failed = None;
            let log_every = cfg.pretrain.log_every.max(1) * 10;
            let (p, _) = harness::pretrain_checkpoint(&ws, cfg, |e| {
                if failed.is_none() {
                    failed = log.push(e).err();
                }
                if e.step % log_every == 0 {
                    progress(&format!("pretrain step {}: mlm {:.4} itm {:.4} acc {:.3}", e.step, e.mlm_loss, e.itm_loss, e.itm_acc));
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            p
        }
    };
    checkpoint::save_checkpoint(&checkpoint_stem(dir, "pretrained"), &pretrained, &ws.vocab)?;
    let health = harness::health(&ws, &pretrained, cfg)?;
    io::write_json(&dir.join("health.json"), &health)?;
    progress(&format!("health: itm {:.3}, attribute recovery {:.3}", health.itm_acc, health.attribute_recovery));

    let mut records = Vec::new();
    let mut separation = None;
    let mut dpt_full = None;
    if cfg.supervised.is_some() {
        let out = harness::run_supervised(&ws, &pretrained, cfg, progress)?;
        records.extend(out.records);
        separation = out.separation;
        if let Some(p) = &out.dpt_full {
            checkpoint::save_checkpoint(&checkpoint_stem(dir, "dpt_full"), p, &ws.vocab)?;
        }
        dpt_full = out.dpt_full;
    }
    if cfg.few_shot.is_some() {
        records.extend(harness::few_shot_protocol(&ws, &pretrained, cfg, progress)?);
    }
    io::write_jsonl(&dir.join("records.jsonl"), &records)?;
    let rep = Report::from_records(&records);
    report::write_report(&rep, dir, &cfg.name)?;
    let summary = Summary {
        name: cfg.name.clone(),
        health,
        converter_bleu,
        converter_rules: ws.converter.rules.len(),
        converter_warnings: ws.fit_warnings.len(),
        separation,
        n_records: records.len(),
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(RunOutputs { dir: dir.to_path_buf(), records, report: rep, summary, pretrained, dpt_full })
}
