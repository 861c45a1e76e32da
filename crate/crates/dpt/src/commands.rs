//! The work behind each CLI subcommand, kept out of `main` so tests can
//! call it directly.

use std::collections::BTreeMap;
use std::path::Path;

use dpt_core::declaration::{self, AnnotationTriple, ConverterModel, DeclarationPair};
use dpt_core::dpt::{self, FinetuneConfig, HeadInit, InferOptions, Paradigm, Prediction, VqaSample};
use dpt_core::encoder::EncoderParams;
use dpt_core::eval::{self, Accuracy};
use dpt_core::harness::{self, ExperimentConfig, Workspace};
use dpt_core::pretrain::PretrainLogEntry;
use dpt_core::vocab::Vocabulary;
use dpt_core::world::{build_dataset, SplitName};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{IoError, Result};
use crate::io::{self, JsonlWriter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub full_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclarationRecord {
    pub question_id: String,
    pub question: String,
    pub declaration: String,
}

/// One line of a predictions file. Scores are keyed by answer word; `p2`
/// and `fused` hold only the matched candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: String,
    pub answer: String,
    pub p1: BTreeMap<String, f64>,
    pub p2: BTreeMap<String, f64>,
    pub fused: BTreeMap<String, f64>,
}

pub fn prediction_record(question_id: &str, p: &Prediction, vocab: &Vocabulary) -> PredictionRecord {
    let name = |i: usize| vocab.answers()[i].clone();
    PredictionRecord {
        question_id: question_id.to_string(),
        answer: name(p.answer),
        p1: p.p1.iter().enumerate().map(|(i, &v)| (name(i), v)).collect(),
        p2: p.candidates.iter().zip(&p.p2).map(|(&c, &v)| (name(c), v)).collect(),
        fused: p.candidates.iter().zip(&p.fused).map(|(&c, &v)| (name(c), v)).collect(),
    }
}

pub fn build_dataset_dir(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.world.validate()?;
    io::write_dataset(out, &build_dataset(&cfg.world, cfg.sizes)?)
}

pub fn build_declarations(annotations: &Path, out: &Path) -> Result<usize> {
    let recs: Vec<AnnotationRecord> = io::read_jsonl(annotations)?;
    let mut w = JsonlWriter::create(out)?;
    for r in &recs {
        let t = AnnotationTriple { question: r.question.clone(), answer: r.answer.clone(), full_answer: r.full_answer.clone() };
        let d = declaration::mask_full_answer(&t)?;
        w.push(&DeclarationRecord { question_id: r.question_id.clone(), question: d.question, declaration: d.declaration })?;
    }
    Ok(recs.len())
}

/// Fits the converter on a declaration corpus; returns the warnings.
pub fn fit_converter(declarations: &Path, out: &Path) -> Result<Vec<String>> {
    let recs: Vec<DeclarationRecord> = io::read_jsonl(declarations)?;
    let pairs: Vec<DeclarationPair> =
        recs.into_iter().map(|r| DeclarationPair { question: r.question, declaration: r.declaration }).collect();
    let (model, warnings) = declaration::fit_converter(&pairs)?;
    io::write_json(out, &model)?;
    Ok(warnings.iter().map(|w| format!("{w:?}")).collect())
}

pub fn convert_file(model: &Path, questions: &Path, out: &Path) -> Result<usize> {
    let model: ConverterModel = io::read_json(model)?;
    let recs: Vec<serde_json::Value> = io::read_jsonl(questions)?;
    let mut w = JsonlWriter::create(out)?;
    for (i, r) in recs.iter().enumerate() {
        let field = |k: &str| r.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let question = field("question").ok_or_else(|| IoError::format(questions, format!("line {}: no question", i + 1)))?;
        let declaration = declaration::convert(&question, &model);
        w.push(&DeclarationRecord { question_id: field("question_id").unwrap_or_default(), question, declaration })?;
    }
    Ok(recs.len())
}

/// Corpus BLEU of two declaration files aligned line by line.
pub fn bleu_files(candidates: &Path, references: &Path) -> Result<f64> {
    let c: Vec<DeclarationRecord> = io::read_jsonl(candidates)?;
    let r: Vec<DeclarationRecord> = io::read_jsonl(references)?;
    if let Some(i) = c.iter().zip(&r).position(|(a, b)| a.question_id != b.question_id) {
        return Err(IoError::format(candidates, format!("line {} does not align with the references", i + 1)).into());
    }
    let c: Vec<String> = c.into_iter().map(|x| x.declaration).collect();
    let r: Vec<String> = r.into_iter().map(|x| x.declaration).collect();
    Ok(declaration::corpus_bleu(&c, &r)?)
}

pub fn load_workspace(data: &Path) -> Result<Workspace> {
    Ok(Workspace::from_data(io::read_dataset(data)?)?)
}

fn load_matching(ckpt: &Path, ws: &Workspace) -> Result<EncoderParams<f32>> {
    let (p, v) = checkpoint::load_checkpoint(ckpt)?;
    if v != ws.vocab {
        return Err(dpt_core::Error::VocabMismatch(format!("{} does not match the dataset vocabulary", ckpt.display())).into());
    }
    Ok(p)
}

pub fn pretrain(data: &Path, cfg: &ExperimentConfig, out: &Path, mut progress: impl FnMut(&PretrainLogEntry)) -> Result<()> {
    cfg.validate()?;
    let ws = load_workspace(data)?;
    let mut log = JsonlWriter::create(&out.with_extension("log.jsonl"))?;
    let mut failed = None;
    let (params, _) = harness::pretrain_checkpoint(&ws, cfg, |e| {
        if failed.is_none() {
            failed = log.push(e).err();
        }
        progress(e);
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    checkpoint::save_checkpoint(out, &params, &ws.vocab)
}

#[derive(Debug, Clone)]
pub struct FinetuneArgs<'a> {
    pub paradigm: Paradigm,
    /// `None` trains on the whole train split with the supervised settings.
    pub shots: Option<usize>,
    pub split_index: usize,
    pub out: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
}

fn write_predictions(path: &Path, preds: &[Prediction], samples: &[VqaSample<'_>], vocab: &Vocabulary) -> Result<()> {
    let recs: Vec<PredictionRecord> =
        preds.iter().zip(samples).map(|(p, s)| prediction_record(&s.record.question_id, p, vocab)).collect();
    io::write_jsonl(path, &recs)
}

/// Fine-tunes a pre-trained checkpoint and evaluates on the test split.
pub fn finetune(data: &Path, ckpt: &Path, cfg: &ExperimentConfig, args: &FinetuneArgs<'_>) -> Result<Accuracy> {
    cfg.validate()?;
    let ws = load_workspace(data)?;
    let pretrained = load_matching(ckpt, &ws)?;
    let p = args.paradigm;
    let (train, test, ft, init) = match args.shots {
        Some(n) => {
            let fc = cfg.few_shot.clone().unwrap_or_default();
            let (pool, test) = harness::few_shot_pools(&ws, &fc);
            let idx: Vec<usize> = (0..pool.len()).collect();
            let picked = eval::sample_shots(&idx, n, fc.seed, args.split_index)?;
            (picked.iter().map(|&i| pool[i]).collect::<Vec<_>>(), test, fc.finetune, HeadInit::Pretrained)
        }
        None => {
            let sc = cfg.supervised.clone().unwrap_or_default();
            let mut train = ws.samples(SplitName::Train);
            train.truncate(sc.train_size.unwrap_or(train.len()));
            let mut test = ws.samples(SplitName::Test);
            test.truncate(sc.test_size.unwrap_or(test.len()));
            (train, test, sc.finetune, HeadInit::Fresh)
        }
    };
    let seed = ft.seed;
    let start = dpt::prepare(&pretrained, p, init, seed, &ws.vocab)?;
    let ft = FinetuneConfig { k: cfg.k, ..ft };
    let (params, _) = dpt::finetune(start, &train, p, &ft, &ws.vocab, |_| {})?;
    if let Some(out) = args.out {
        checkpoint::save_checkpoint(out, &params, &ws.vocab)?;
    }
    evaluate(&ws, &params, p, &test, cfg, args.predictions)
}

fn evaluate(
    ws: &Workspace,
    params: &EncoderParams<f32>,
    p: Paradigm,
    samples: &[VqaSample<'_>],
    cfg: &ExperimentConfig,
    predictions: Option<&Path>,
) -> Result<Accuracy> {
    let opts = InferOptions { k: if p.uses_itm() { cfg.k } else { 0 }, renormalize_p1: cfg.renormalize_p1, ..InferOptions::default() };
    let preds = dpt::infer(params, samples, p, &opts, &ws.vocab)?;
    if let Some(path) = predictions {
        write_predictions(path, &preds, samples, &ws.vocab)?;
    }
    let ctx = eval::RecordContext { experiment: "eval", paradigm: p, shots: 0, split_index: 0, k: (opts.k > 0).then_some(opts.k) };
    let recs = eval::records_for(samples, &eval::prediction_answers(&preds), &ws.vocab, &ctx)?;
    Ok(eval::accuracy(&recs))
}

/// Evaluates a checkpoint as it is on one split.
pub fn eval_checkpoint(
    data: &Path,
    ckpt: &Path,
    split: SplitName,
    paradigm: Paradigm,
    cfg: &ExperimentConfig,
    predictions: Option<&Path>,
) -> Result<Accuracy> {
    let ws = load_workspace(data)?;
    let params = load_matching(ckpt, &ws)?;
    let samples = ws.samples(split);
    evaluate(&ws, &params, paradigm, &samples, cfg, predictions)
}

pub fn report_from_records(records: &Path, out: &Path, title: &str) -> Result<eval::Report> {
    let recs: Vec<eval::ResultRecord> = io::read_jsonl(records)?;
    let rep = eval::Report::from_records(&recs);
    crate::report::write_report(&rep, out, title)?;
    Ok(rep)
}
