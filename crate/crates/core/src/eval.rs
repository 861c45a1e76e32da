//! Metrics, per-question records, breakdowns and the report tables. Every
//! number in a [`Report`] is recomputed from [`ResultRecord`]s alone.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dpt::{Paradigm, Prediction, VqaSample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::text;
use crate::vocab::Vocabulary;
use crate::world::QARecord;

pub const LENGTH_BUCKET: usize = 3;

/// `min(votes for the prediction / 3, 1)`.
pub fn soft_accuracy(predicted: &str, human_counts: &BTreeMap<String, u32>) -> f64 {
    let c = human_counts.get(predicted).copied().unwrap_or(0) as f64;
    (c / 3.0).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub question_id: String,
    pub qtype: String,
    pub question_length: usize,
    pub gold: String,
    pub predicted: String,
    pub correct: bool,
    pub soft_acc: f64,
    pub paradigm: Paradigm,
    pub shots: usize,
    pub split_index: usize,
    /// Candidates verified by matching, when it ran.
    pub k: Option<usize>,
}

/// Identifies the run a record belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordContext<'a> {
    pub experiment: &'a str,
    pub paradigm: Paradigm,
    pub shots: usize,
    pub split_index: usize,
    pub k: Option<usize>,
}

pub fn make_record(r: &QARecord, predicted: &str, ctx: &RecordContext<'_>) -> ResultRecord {
    ResultRecord {
        experiment: ctx.experiment.to_string(),
        question_id: r.question_id.clone(),
        qtype: r.qtype.as_str().to_string(),
        question_length: text::tokenize(&r.question).len(),
        gold: r.answer.clone(),
        predicted: predicted.to_string(),
        correct: predicted == r.answer,
        soft_acc: soft_accuracy(predicted, &r.human_counts),
        paradigm: ctx.paradigm,
        shots: ctx.shots,
        split_index: ctx.split_index,
        k: ctx.k,
    }
}

/// One record per sample; `answers[i]` indexes the answer set.
pub fn records_for(
    samples: &[VqaSample<'_>],
    answers: &[usize],
    vocab: &Vocabulary,
    ctx: &RecordContext<'_>,
) -> Result<Vec<ResultRecord>> {
    if samples.len() != answers.len() {
        return Err(Error::Input("one prediction per sample required".into()));
    }
    samples
        .iter()
        .zip(answers)
        .map(|(s, &a)| {
            let ans = vocab.answers().get(a).ok_or_else(|| Error::VocabMismatch(format!("answer index {a}")))?;
            Ok(make_record(s.record, ans, ctx))
        })
        .collect()
}

pub fn prediction_answers(preds: &[Prediction]) -> Vec<usize> {
    preds.iter().map(|p| p.answer).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub exact: f64,
    pub soft: f64,
}

pub fn accuracy<'a>(records: impl IntoIterator<Item = &'a ResultRecord>) -> Accuracy {
    let (mut n, mut c, mut s) = (0usize, 0usize, 0.0f64);
    for r in records {
        n += 1;
        c += r.correct as usize;
        s += r.soft_acc;
    }
    if n == 0 {
        return Accuracy::default();
    }
    Accuracy { n, exact: c as f64 / n as f64, soft: s / n as f64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Qtype,
    LengthBucket,
}

pub fn length_bucket(len: usize) -> String {
    let lo = len / LENGTH_BUCKET * LENGTH_BUCKET;
    format!("{lo}-{}", lo + LENGTH_BUCKET - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    pub accuracy: f64,
    pub soft: f64,
}

/// Accuracy per group, groups in sorted order (length buckets numerically).
pub fn breakdown<'a>(records: impl IntoIterator<Item = &'a ResultRecord>, axis: Axis) -> Vec<GroupRow> {
    let mut groups: BTreeMap<(usize, String), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let key = match axis {
            Axis::Qtype => (0, r.qtype.clone()),
            Axis::LengthBucket => (r.question_length / LENGTH_BUCKET, length_bucket(r.question_length)),
        };
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((_, group), rs)| {
            let a = accuracy(rs.iter().copied());
            GroupRow { group, n: a.n, accuracy: a.exact, soft: a.soft }
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(v))
}

/// `n` distinct pool entries for few-shot split `split`, drawn uniformly.
pub fn sample_shots(pool: &[usize], n: usize, seed: u64, split: usize) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::Protocol(format!("{n} shots requested from a pool of {}", pool.len())));
    }
    let mut r = rng::stream(seed, &[tag::FEW_SHOT, n as u64, split as u64]);
    let mut picked: Vec<usize> = index::sample(&mut r, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

pub mod experiment {
    pub const SUPERVISED: &str = "supervised";
    pub const FEW_SHOT: &str = "few-shot";
    pub const K_SWEEP: &str = "k-sweep";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmRow {
    pub paradigm: Paradigm,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub soft_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub paradigm: Paradigm,
    pub rows: Vec<GroupRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub shots: usize,
    pub paradigm: Paradigm,
    pub splits: usize,
    pub mean: f64,
    pub std: f64,
    /// Difference of means against the baseline at the same shot count.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub runs: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub supervised: Vec<ParadigmRow>,
    pub per_qtype: Vec<BreakdownTable>,
    pub per_length: Vec<BreakdownTable>,
    pub few_shot: Vec<FewShotRow>,
    pub k_sweep: Vec<KRow>,
}

/// Per-run accuracies keyed by `key`, one entry per split index.
fn run_accuracies<K: Ord>(records: &[&ResultRecord], key: impl Fn(&ResultRecord) -> K) -> BTreeMap<K, Vec<(f64, f64)>> {
    let mut runs: BTreeMap<(K, usize), Vec<&ResultRecord>> = BTreeMap::new();
    for &r in records {
        runs.entry((key(r), r.split_index)).or_default().push(r);
    }
    let mut out: BTreeMap<K, Vec<(f64, f64)>> = BTreeMap::new();
    for ((k, _), rs) in runs {
        let a = accuracy(rs.iter().copied());
        out.entry(k).or_default().push((a.exact, a.soft));
    }
    out
}

impl Report {
    pub fn from_records(records: &[ResultRecord]) -> Self {
        let of = |e: &str| records.iter().filter(|r| r.experiment == e).collect::<Vec<_>>();
        let sup = of(experiment::SUPERVISED);
        let supervised = run_accuracies(&sup, |r| r.paradigm)
            .into_iter()
            .map(|(paradigm, v)| {
                let (mean, std) = mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>());
                let (soft_mean, _) = mean_std(&v.iter().map(|x| x.1).collect::<Vec<_>>());
                ParadigmRow { paradigm, runs: v.len(), mean, std, soft_mean }
            })
            .collect();
        let mut by_paradigm: BTreeMap<Paradigm, Vec<&ResultRecord>> = BTreeMap::new();
        for &r in &sup {
            by_paradigm.entry(r.paradigm).or_default().push(r);
        }
        let table = |axis| {
            by_paradigm
                .iter()
                .map(|(&paradigm, rs)| BreakdownTable { paradigm, rows: breakdown(rs.iter().copied(), axis) })
                .collect()
        };
        let per_qtype = table(Axis::Qtype);
        let per_length = table(Axis::LengthBucket);

        let fs = of(experiment::FEW_SHOT);
        let cells = run_accuracies(&fs, |r| (r.shots, r.paradigm));
        let base: BTreeMap<usize, f64> = cells
            .iter()
            .filter(|((_, p), _)| *p == Paradigm::Baseline)
            .map(|((s, _), v)| (*s, mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>()).0))
            .collect();
        let few_shot = cells
            .into_iter()
            .map(|((shots, paradigm), v)| {
                let (mean, std) = mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>());
                let delta_vs_baseline = base.get(&shots).map(|b| mean - b);
                FewShotRow { shots, paradigm, splits: v.len(), mean, std, delta_vs_baseline }
            })
            .collect();

        let ks = of(experiment::K_SWEEP);
        let k_sweep = run_accuracies(&ks, |r| r.k.unwrap_or(0))
            .into_iter()
            .map(|(k, v)| KRow { k, runs: v.len(), mean: mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>()).0 })
            .collect();
        Report { supervised, per_qtype, per_length, few_shot, k_sweep }
    }

    pub fn supervised_mean(&self, p: Paradigm) -> Option<f64> {
        self.supervised.iter().find(|r| r.paradigm == p).map(|r| r.mean)
    }

    pub fn few_shot_row(&self, shots: usize, p: Paradigm) -> Option<&FewShotRow> {
        self.few_shot.iter().find(|r| r.shots == shots && r.paradigm == p)
    }

    pub fn k_mean(&self, k: usize) -> Option<f64> {
        self.k_sweep.iter().find(|r| r.k == k).map(|r| r.mean)
    }
}
