//! Experiment configuration and the protocols that turn a pre-trained
//! checkpoint into [`ResultRecord`]s: supervised fine-tuning of every
//! paradigm, the candidate-count sweep, and the zero/few-shot splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::declaration::{self, convert, fit_converter, AnnotationTriple, ConverterModel, FitWarning};
use crate::dpt::{self, FinetuneConfig, HeadInit, InferOptions, Paradigm, Prediction, VqaSample};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{self, experiment, RecordContext, ResultRecord};
use crate::optim::AdamWConfig;
use crate::pretrain::{self, PretrainConfig, PretrainData, PretrainHealth, PretrainLogEntry};
use crate::rng::{self, tag};
use crate::vocab::{self, Vocabulary};
use crate::world::{build_dataset, DatasetSplits, Split, SplitName, SplitSizes, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub paradigms: Vec<Paradigm>,
    /// One fine-tuning run per seed and paradigm.
    pub seeds: Vec<u64>,
    /// Leading train records used for fine-tuning (all when `None`).
    pub train_size: Option<usize>,
    /// Leading test records evaluated (all when `None`).
    pub test_size: Option<usize>,
    pub finetune: FinetuneConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            paradigms: Paradigm::ALL.to_vec(),
            seeds: alloc::vec![0, 1, 2],
            train_size: None,
            test_size: None,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    pub paradigms: Vec<Paradigm>,
    pub shots: Vec<usize>,
    pub n_splits: usize,
    pub exclude_yes_no: bool,
    pub test_size: Option<usize>,
    pub seed: u64,
    pub finetune: FinetuneConfig,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            paradigms: alloc::vec![Paradigm::Baseline, Paradigm::DptMlmItm],
            shots: alloc::vec![0, 1, 4, 16, 32, 64, 128],
            n_splits: 5,
            exclude_yes_no: true,
            test_size: None,
            seed: 0,
            finetune: FinetuneConfig {
                epochs: 10,
                min_steps: 10,
                batch_size: 16,
                optimizer: AdamWConfig { lr: 1e-4, warmup_frac: 0.0, ..AdamWConfig::default() },
                ..FinetuneConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldConfig,
    pub sizes: SplitSizes,
    /// Architecture; vocabulary, answer-set and region sizes are filled in
    /// from the world.
    pub encoder: EncoderConfig,
    pub init_seed: u64,
    pub pretrain: PretrainConfig,
    pub health_pairs: usize,
    pub k: usize,
    pub k_sweep: Vec<usize>,
    pub renormalize_p1: bool,
    pub supervised: Option<SupervisedConfig>,
    pub few_shot: Option<FewShotConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "reference".into(),
            world: WorldConfig::default(),
            sizes: SplitSizes { train: 2000, val: 200, test: 300 },
            encoder: EncoderConfig::default(),
            init_seed: 0,
            pretrain: PretrainConfig::default(),
            health_pairs: 1000,
            k: 8,
            k_sweep: alloc::vec![0, 1, 2, 4, 8, 16],
            renormalize_p1: false,
            supervised: Some(SupervisedConfig::default()),
            few_shot: Some(FewShotConfig::default()),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain.validate()?;
        if let Some(fs) = &self.few_shot {
            if fs.n_splits == 0 {
                return Err(Error::Config("n_splits must be at least 1".into()));
            }
            if fs.shots.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("shot schedule must be strictly ascending".into()));
            }
        }
        let n_ans = self.world.answer_vocabulary().len();
        if self.k == 0 || self.k > n_ans || self.k_sweep.iter().any(|&k| k > n_ans) {
            return Err(Error::Config(format!("K values must lie within the answer set (|C| = {n_ans})")));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            answer_set_size: vocab.answers().len(),
            region_feat_dim: self.world.region_feat_dim(),
            max_regions: self.world.objects_per_scene.1,
            ..self.encoder.clone()
        }
    }
}

/// Closed vocabulary of the world: its lexicon plus the prompt words.
pub fn build_vocabulary(world: &WorldConfig) -> Result<Vocabulary> {
    let mut words = world.lexicon();
    words.extend(vocab::PROMPT_WORDS.iter().map(|s| String::from(*s)));
    Vocabulary::new(&words, &world.answer_vocabulary())
}

pub fn annotation_triples(split: &Split) -> Vec<AnnotationTriple> {
    split
        .records
        .iter()
        .map(|r| AnnotationTriple { question: r.question.clone(), answer: r.answer.clone(), full_answer: r.full_answer.clone() })
        .collect()
}

/// Dataset, vocabulary, converter fitted on the train split, and the
/// converted declaration of every question.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub data: DatasetSplits,
    pub vocab: Vocabulary,
    pub converter: ConverterModel,
    pub fit_warnings: Vec<FitWarning>,
    pub declarations: BTreeMap<SplitName, Vec<String>>,
}

impl Workspace {
    pub fn build(world: &WorldConfig, sizes: SplitSizes) -> Result<Self> {
        Self::from_data(build_dataset(world, sizes)?)
    }

    pub fn from_data(data: DatasetSplits) -> Result<Self> {
        let vocab = build_vocabulary(&data.world)?;
        let pairs = annotation_triples(&data.train)
            .iter()
            .map(declaration::mask_full_answer)
            .collect::<Result<Vec<_>>>()?;
        let (converter, fit_warnings) = fit_converter(&pairs)?;
        let declarations = SplitName::ALL
            .into_iter()
            .map(|s| (s, data.split(s).records.iter().map(|r| convert(&r.question, &converter)).collect()))
            .collect();
        Ok(Self { data, vocab, converter, fit_warnings, declarations })
    }

    pub fn samples(&self, split: SplitName) -> Vec<VqaSample<'_>> {
        let sp = self.data.split(split);
        let decl = &self.declarations[&split];
        sp.records
            .iter()
            .zip(decl)
            .map(|(r, d)| VqaSample {
                record: r,
                declaration: d,
                regions: sp.regions_of(&r.scene_id).expect("record scene belongs to its split"),
            })
            .collect()
    }

    pub fn pretrain_data(&self, split: SplitName, max_text_len: usize) -> PretrainData {
        PretrainData::from_split(self.data.split(split), &self.vocab, max_text_len)
    }
}

impl Workspace {
    /// Corpus BLEU of the converted declarations of `split` against the
    /// declarations masked out of its full answers.
    pub fn converter_bleu(&self, split: SplitName) -> Result<f64> {
        let refs = annotation_triples(self.data.split(split))
            .iter()
            .map(|t| declaration::mask_full_answer(t).map(|p| p.declaration))
            .collect::<Result<Vec<_>>>()?;
        declaration::corpus_bleu(&self.declarations[&split], &refs)
    }
}

/// Initializes and pre-trains the encoder on the train captions.
pub fn pretrain_checkpoint(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    on_log: impl FnMut(&PretrainLogEntry),
) -> Result<(EncoderParams<f32>, Vec<PretrainLogEntry>)> {
    let ecfg = cfg.encoder_config(&ws.vocab);
    let init = EncoderParams::init(&ecfg, cfg.init_seed)?;
    let data = ws.pretrain_data(SplitName::Train, ecfg.max_text_len);
    pretrain::pretrain(&data, init, &cfg.pretrain, on_log)
}

/// Health of a checkpoint on the validation captions.
pub fn health(ws: &Workspace, params: &EncoderParams<f32>, cfg: &ExperimentConfig) -> Result<PretrainHealth> {
    let held = ws.pretrain_data(SplitName::Val, params.config.max_text_len);
    pretrain::pretrain_health(params, &held, &ws.vocab, cfg.health_pairs, cfg.pretrain.seed)
}

fn head_seed(base: u64, parts: &[u64]) -> u64 {
    rng::derive_seed(base, parts)
}

fn paradigm_tag(p: Paradigm) -> u64 {
    Paradigm::ALL.iter().position(|&q| q == p).unwrap_or(0) as u64
}

/// Mean `p2` of gold-answer candidates and of all other candidates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSeparation {
    pub gold_mean: f64,
    pub gold_n: usize,
    pub other_mean: f64,
    pub other_n: usize,
}

pub fn match_separation(preds: &[Prediction], samples: &[VqaSample<'_>], vocab: &Vocabulary) -> MatchSeparation {
    let (mut g, mut gn, mut o, mut on) = (0.0, 0usize, 0.0, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        let gold = vocab.answer_index(&s.record.answer);
        for (&c, &p2) in p.candidates.iter().zip(&p.p2) {
            if Some(c) == gold {
                g += p2;
                gn += 1;
            } else {
                o += p2;
                on += 1;
            }
        }
    }
    MatchSeparation { gold_mean: g / gn.max(1) as f64, gold_n: gn, other_mean: o / on.max(1) as f64, other_n: on }
}

/// Records of the K sweep, read off predictions that scored at least
/// `max(ks)` candidates. `K = 0` is the decision by `p1` alone.
pub fn k_sweep_records(
    preds: &[Prediction],
    samples: &[VqaSample<'_>],
    ks: &[usize],
    renormalize: bool,
    vocab: &Vocabulary,
    shots: usize,
    split_index: usize,
) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for &k in ks {
        let answers = preds.iter().map(|p| p.with_k(k, renormalize)).collect::<Result<Vec<_>>>()?;
        let ctx = RecordContext { experiment: experiment::K_SWEEP, paradigm: Paradigm::DptMlmItm, shots, split_index, k: Some(k) };
        out.extend(eval::records_for(samples, &answers, vocab, &ctx)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub records: Vec<ResultRecord>,
    /// Fine-tuned full-DPT model of the first seed, when that paradigm ran.
    pub dpt_full: Option<EncoderParams<f32>>,
    pub separation: Option<MatchSeparation>,
}

/// Fine-tunes every paradigm from fresh heads on the train split, once per
/// seed, and evaluates on the test split. The full-DPT runs also produce the
/// K-sweep records.
pub fn run_supervised(
    ws: &Workspace,
    pretrained: &EncoderParams<f32>,
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<SupervisedOutcome> {
    let sc = cfg.supervised.clone().unwrap_or_default();
    let train_all = ws.samples(SplitName::Train);
    let train = &train_all[..sc.train_size.unwrap_or(train_all.len()).min(train_all.len())];
    let test_all = ws.samples(SplitName::Test);
    let test = &test_all[..sc.test_size.unwrap_or(test_all.len()).min(test_all.len())];
    let k_max = cfg.k_sweep.iter().copied().chain([cfg.k]).max().unwrap_or(cfg.k);
    let mut out = SupervisedOutcome { records: Vec::new(), dpt_full: None, separation: None };
    for (si, &seed) in sc.seeds.iter().enumerate() {
        for &p in &sc.paradigms {
            let hs = head_seed(seed, &[tag::HEADS, paradigm_tag(p)]);
            let start = dpt::prepare(pretrained, p, HeadInit::Fresh, hs, &ws.vocab)?;
            let ft = FinetuneConfig { seed: head_seed(seed, &[tag::FINETUNE, paradigm_tag(p)]), k: cfg.k, ..sc.finetune.clone() };
            let (params, log) = dpt::finetune(start, train, p, &ft, &ws.vocab, |_| {})?;
            let opts = InferOptions { k: if p.uses_itm() { k_max } else { 0 }, renormalize_p1: cfg.renormalize_p1, ..InferOptions::default() };
            let preds = dpt::infer(&params, test, p, &opts, &ws.vocab)?;
            let answers = if p.uses_itm() {
                preds.iter().map(|x| x.with_k(cfg.k, cfg.renormalize_p1)).collect::<Result<Vec<_>>>()?
            } else {
                eval::prediction_answers(&preds)
            };
            let ctx = RecordContext {
                experiment: experiment::SUPERVISED,
                paradigm: p,
                shots: train.len(),
                split_index: si,
                k: p.uses_itm().then_some(cfg.k),
            };
            let recs = eval::records_for(test, &answers, &ws.vocab, &ctx)?;
            let acc = eval::accuracy(&recs).exact;
            out.records.extend(recs);
            if p.uses_itm() {
                out.records.extend(k_sweep_records(&preds, test, &cfg.k_sweep, cfg.renormalize_p1, &ws.vocab, train.len(), si)?);
                if si == 0 {
                    out.separation = Some(match_separation(&preds, test, &ws.vocab));
                    out.dpt_full = Some(params);
                }
            }
            let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
            progress(&format!("supervised seed {seed} {}: loss {last:.4}, test accuracy {acc:.4}", p.as_str()));
        }
    }
    Ok(out)
}

/// Test questions and train pool of the few-shot protocol.
pub fn few_shot_pools<'a>(ws: &'a Workspace, fc: &FewShotConfig) -> (Vec<VqaSample<'a>>, Vec<VqaSample<'a>>) {
    let keep = |s: &VqaSample<'_>| !(fc.exclude_yes_no && s.record.is_yes_no());
    let pool: Vec<_> = ws.samples(SplitName::Train).into_iter().filter(keep).collect();
    let mut test: Vec<_> = ws.samples(SplitName::Test).into_iter().filter(keep).collect();
    test.truncate(fc.test_size.unwrap_or(test.len()));
    (pool, test)
}

/// For every shot count and split, draws that many train questions,
/// fine-tunes each paradigm from the pre-trained heads (fresh for the
/// baseline) and evaluates. Zero shots skips optimization.
pub fn few_shot_protocol(
    ws: &Workspace,
    pretrained: &EncoderParams<f32>,
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<ResultRecord>> {
    let fc = cfg.few_shot.clone().unwrap_or_default();
    let (pool, test) = few_shot_pools(ws, &fc);
    let idx: Vec<usize> = (0..pool.len()).collect();
    let mut out = Vec::new();
    for &n in &fc.shots {
        for split in 0..fc.n_splits {
            let picked = eval::sample_shots(&idx, n, fc.seed, split)?;
            let shots: Vec<VqaSample<'_>> = picked.iter().map(|&i| pool[i]).collect();
            for &p in &fc.paradigms {
                let hs = head_seed(fc.seed, &[tag::HEADS, n as u64, split as u64, paradigm_tag(p)]);
                let start = dpt::prepare(pretrained, p, HeadInit::Pretrained, hs, &ws.vocab)?;
                let ft = FinetuneConfig {
                    seed: head_seed(fc.seed, &[tag::FINETUNE, n as u64, split as u64, paradigm_tag(p)]),
                    k: cfg.k,
                    ..fc.finetune.clone()
                };
                let (params, _) = dpt::finetune(start, &shots, p, &ft, &ws.vocab, |_| {})?;
                let opts = InferOptions { k: if p.uses_itm() { cfg.k } else { 0 }, renormalize_p1: cfg.renormalize_p1, ..InferOptions::default() };
                let preds = dpt::infer(&params, &test, p, &opts, &ws.vocab)?;
                let ctx = RecordContext {
                    experiment: experiment::FEW_SHOT,
                    paradigm: p,
                    shots: n,
                    split_index: split,
                    k: p.uses_itm().then_some(cfg.k),
                };
                let recs = eval::records_for(&test, &eval::prediction_answers(&preds), &ws.vocab, &ctx)?;
                progress(&format!("few-shot n={n} split {split} {}: accuracy {:.4}", p.as_str(), eval::accuracy(&recs).exact));
                out.extend(recs);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"name": "x", "k": 4}"#).unwrap();
        assert_eq!(partial.k, 4);
        assert_eq!(partial.world, WorldConfig::default());
    }

    #[test]
    fn unsorted_shots_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.few_shot.as_mut().unwrap().shots = alloc::vec![4, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn workspace_declarations_follow_questions() {
        let ws = Workspace::build(&WorldConfig::default(), SplitSizes { train: 30, val: 5, test: 5 }).unwrap();
        for s in ws.samples(SplitName::Test) {
            assert!(declaration::is_valid_declaration(s.declaration));
            if s.record.is_yes_no() {
                assert_eq!(s.declaration, "[MASK]");
            } else {
                assert_eq!(declaration::substitute_answer(s.declaration, &s.record.answer).unwrap(), s.record.full_answer);
            }
        }
    }

    #[test]
    fn tiny_pipeline_produces_every_record_kind() {
        let mut cfg = ExperimentConfig {
            sizes: SplitSizes { train: 20, val: 4, test: 4 },
            encoder: EncoderConfig { d_model: 16, d_ff: 32, n_layers: 1, n_heads: 2, ..EncoderConfig::default() },
            pretrain: PretrainConfig { steps: 3, batch_size: 4, ..PretrainConfig::default() },
            health_pairs: 10,
            k_sweep: alloc::vec![0, 1, 2],
            k: 2,
            ..ExperimentConfig::default()
        };
        cfg.supervised = Some(SupervisedConfig {
            seeds: alloc::vec![0],
            finetune: FinetuneConfig { epochs: 1, batch_size: 16, ..FinetuneConfig::default() },
            ..SupervisedConfig::default()
        });
        cfg.few_shot = Some(FewShotConfig {
            shots: alloc::vec![0, 2],
            n_splits: 2,
            finetune: FinetuneConfig { epochs: 1, min_steps: 1, batch_size: 2, ..FinetuneConfig::default() },
            ..FewShotConfig::default()
        });
        let ws = Workspace::build(&cfg.world, cfg.sizes).unwrap();
        let (ckpt, _) = pretrain_checkpoint(&ws, &cfg, |_| {}).unwrap();
        let sup = run_supervised(&ws, &ckpt, &cfg, &mut |_| {}).unwrap();
        let fs = few_shot_protocol(&ws, &ckpt, &cfg, &mut |_| {}).unwrap();
        let n_test = ws.data.test.records.len();
        assert_eq!(sup.records.len(), n_test * (5 + 3));
        assert!(sup.dpt_full.is_some());
        assert!(fs.iter().all(|r| r.gold != "yes" && r.gold != "no"));
        let rep = eval::Report::from_records(&[sup.records, fs].concat());
        assert_eq!(rep.supervised.len(), 5);
        assert_eq!(rep.few_shot.len(), 4);
        assert_eq!(rep.k_sweep.len(), 3);
    }
}
