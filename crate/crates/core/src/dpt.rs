//! VQA as cloze filling and candidate verification, the competing
//! fine-tuning paradigms, and initialization from pre-trained heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::declaration::{self, substitute_answer};
use crate::encoder::{self, names, BatchInput, Encoded, EncoderConfig, EncoderParams, HeadMode};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Tracking, Var};
use crate::math::{self, Real};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, tag};
use crate::tensor::Matrix;
use crate::vocab::{self, Vocabulary};
use crate::world::QARecord;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    Baseline,
    #[serde(rename = "mask")]
    MaskPrompt,
    #[serde(rename = "dynamic")]
    DynamicPrompt,
    DptMlm,
    #[serde(rename = "dpt-full")]
    DptMlmItm,
}

impl Paradigm {
    pub const ALL: [Paradigm; 5] =
        [Paradigm::Baseline, Paradigm::MaskPrompt, Paradigm::DynamicPrompt, Paradigm::DptMlm, Paradigm::DptMlmItm];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Baseline => "baseline",
            Paradigm::MaskPrompt => "mask",
            Paradigm::DynamicPrompt => "dynamic",
            Paradigm::DptMlm => "dpt-mlm",
            Paradigm::DptMlmItm => "dpt-full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn uses_itm(self) -> bool {
        self == Paradigm::DptMlmItm
    }

    pub fn needs_declaration(self) -> bool {
        matches!(self, Paradigm::DptMlm | Paradigm::DptMlmItm)
    }

    /// Whether scoring reads `h_[MASK]` (every paradigm but the baseline).
    pub fn is_cloze(self) -> bool {
        self != Paradigm::Baseline
    }
}

/// A question with its declaration and image regions.
#[derive(Debug, Clone, Copy)]
pub struct VqaSample<'a> {
    pub record: &'a QARecord,
    pub declaration: &'a str,
    pub regions: &'a [Vec<f32>],
}

/// Where the scored hidden states sit in a packed input.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptMeta {
    /// Sequence position of `[MASK]`.
    pub mask: Option<usize>,
    /// Sequence positions of a substituted candidate answer.
    pub answer_span: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Formatted {
    pub input: BatchInput,
    pub meta: PromptMeta,
}

/// Textual part of the input for a paradigm.
pub fn prompt_text(question: &str, declaration: Option<&str>, paradigm: Paradigm) -> Result<String> {
    Ok(match paradigm {
        Paradigm::Baseline => String::from(question),
        Paradigm::MaskPrompt => format!("{question} answer : [MASK]"),
        Paradigm::DynamicPrompt => {
            let mut s = format!("{question} answer :");
            for k in 0..vocab::N_DYNAMIC {
                s.push(' ');
                s.push_str(&vocab::dynamic_token(k));
            }
            s.push_str(" [MASK]");
            s
        }
        Paradigm::DptMlm | Paradigm::DptMlmItm => {
            let d = declaration.ok_or_else(|| Error::Input("declaration required for DPT inputs".into()))?;
            if !declaration::is_valid_declaration(d) {
                return Err(Error::Contract(format!("declaration `{d}` must hold exactly one [MASK]")));
            }
            format!("{question} answer : {d}")
        }
    })
}

pub fn format_prompt(sample: &VqaSample<'_>, paradigm: Paradigm, vocab: &Vocabulary, cfg: &EncoderConfig) -> Result<Formatted> {
    let text = prompt_text(&sample.record.question, Some(sample.declaration), paradigm)?;
    let ids = vocab.tokenize(&text);
    let input = encoder::pack_input(&ids, sample.regions, cfg)?;
    let mask = if paradigm.is_cloze() {
        match input.mask_positions().as_slice() {
            [p] => Some(*p),
            _ => return Err(Error::Contract(format!("expected one [MASK] in `{text}`"))),
        }
    } else {
        None
    };
    Ok(Formatted { input, meta: PromptMeta { mask, answer_span: None } })
}

/// `Q answer : D` with the answer substituted for `[MASK]`; records the
/// answer's token span.
pub fn format_candidate(
    sample: &VqaSample<'_>,
    answer: &str,
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<Formatted> {
    let d = sample.declaration;
    let at = d.find(crate::text::MASK).filter(|_| declaration::is_valid_declaration(d));
    let Some(at) = at else {
        return Err(Error::Contract(format!("declaration `{d}` must hold exactly one [MASK]")));
    };
    let head = format!("{} answer : {}", sample.record.question, &d[..at]);
    let tail = &d[at + crate::text::MASK.len()..];
    let mut ids = vocab.tokenize(&head);
    let start = ids.len();
    ids.extend(vocab.tokenize(answer));
    let end = ids.len();
    if start == end {
        return Err(Error::Contract("empty answer span".into()));
    }
    ids.extend(vocab.tokenize(tail));
    let input = encoder::pack_input(&ids, sample.regions, cfg)?;
    // +1 for [CLS]
    Ok(Formatted { input, meta: PromptMeta { mask: None, answer_span: Some(start + 1..end + 1) } })
}

/// Answer logits `s_ans` (one row of |C| per input) on the tape.
pub fn answer_logits<S: Real>(
    g: &mut Graph<'_, S>,
    mode: HeadMode,
    paradigm: Paradigm,
    enc: &Encoded,
    metas: &[&PromptMeta],
) -> Result<Var> {
    let cls: Vec<usize> = (0..metas.len()).map(|b| enc.row(b, 0)).collect();
    if paradigm == Paradigm::Baseline {
        let h = g.select_rows(enc.hidden, &cls);
        return encoder::mlp_head(g, names::BASELINE, h);
    }
    let mask = metas
        .iter()
        .enumerate()
        .map(|(b, m)| m.mask.map(|p| enc.row(b, p)).ok_or_else(|| Error::Contract("input has no [MASK]".into())))
        .collect::<Result<Vec<_>>>()?;
    let h_mask = g.select_rows(enc.hidden, &mask);
    match mode {
        HeadMode::Pretrained => {
            let (w, b) = (g.param(names::ZS_MLM_W)?, g.param(names::ZS_MLM_B)?);
            Ok(g.linear(h_mask, w, Some(b)))
        }
        HeadMode::Task => {
            let h_cls = g.select_rows(enc.hidden, &cls);
            let h = g.concat(h_cls, h_mask);
            encoder::mlp_head(g, names::DPT_MLM, h)
        }
    }
}

/// Matching logits `s_mat` (an `n x 1` column) on the tape.
pub fn match_logits<S: Real>(g: &mut Graph<'_, S>, mode: HeadMode, enc: &Encoded, metas: &[&PromptMeta]) -> Result<Var> {
    let cls: Vec<usize> = (0..metas.len()).map(|b| enc.row(b, 0)).collect();
    let h_cls = g.select_rows(enc.hidden, &cls);
    match mode {
        HeadMode::Pretrained => encoder::pt_itm_logit(g, h_cls),
        HeadMode::Task => {
            let spans = metas
                .iter()
                .enumerate()
                .map(|(b, m)| match &m.answer_span {
                    Some(s) if !s.is_empty() => Ok(s.clone().map(|p| enc.row(b, p)).collect()),
                    _ => Err(Error::Contract("candidate input has an empty answer span".into())),
                })
                .collect::<Result<Vec<Vec<usize>>>>()?;
            let h_ans = g.pool(enc.hidden, spans);
            let h = g.concat(h_cls, h_ans);
            encoder::mlp_head(g, names::DPT_ITM, h)
        }
    }
}

fn constant_encoded<'p>(g: &mut Graph<'p, f32>, out: &encoder::EncoderOutput) -> Encoded {
    let hidden = g.constant(out.hidden.clone());
    Encoded { hidden, seq_len: out.hidden.rows, n_seq: 1 }
}

/// `(s_ans, p1)` for one encoded input.
pub fn answer_scores(
    out: &encoder::EncoderOutput,
    meta: &PromptMeta,
    params: &EncoderParams<f32>,
    paradigm: Paradigm,
) -> Result<(Vec<f32>, Vec<f64>)> {
    let mut g = Graph::inference(&params.tensors);
    let enc = constant_encoded(&mut g, out);
    let s = answer_logits(&mut g, params.head_mode, paradigm, &enc, &[meta])?;
    let s = g.value(s).data.clone();
    let p1 = softmax64(&s);
    Ok((s, p1))
}

/// `(s_mat, p2)` for one encoded candidate input.
pub fn match_score(out: &encoder::EncoderOutput, meta: &PromptMeta, params: &EncoderParams<f32>) -> Result<(f32, f64)> {
    let mut g = Graph::inference(&params.tensors);
    let enc = constant_encoded(&mut g, out);
    let s = match_logits(&mut g, params.head_mode, &enc, &[meta])?;
    let s = g.value(s).data[0];
    Ok((s, math::sigmoid(s as f64)))
}

pub fn softmax64(logits: &[f32]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    math::softmax(&l)
}

/// `-ln p1[gt]`, clamped at `PROB_CLAMP`; the flag reports clamping.
pub fn mlm_vqa_loss(p1: &[f64], gt: usize) -> Result<(f64, bool)> {
    let p = *p1.get(gt).ok_or_else(|| Error::Input(format!("answer index {gt} out of range")))?;
    let clamped = p < PROB_CLAMP;
    Ok((-libm::log(p.max(PROB_CLAMP)), clamped))
}

/// Mean binary cross-entropy of candidate matching with `y_k = [a_k == gt]`.
pub fn itm_vqa_loss(p2: &[f64], candidates: &[usize], gt: usize) -> Result<f64> {
    if p2.is_empty() || p2.len() != candidates.len() {
        return Err(Error::Input("itm loss needs one probability per candidate".into()));
    }
    let mut s = 0.0;
    for (&p, &c) in p2.iter().zip(candidates) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        s -= if c == gt { libm::log(p) } else { libm::log(1.0 - p) };
    }
    Ok(s / p2.len() as f64)
}

pub fn dpt_total_loss(mlm_loss: f64, itm_loss: Option<f64>) -> f64 {
    mlm_loss + itm_loss.unwrap_or(0.0)
}

/// Indices of the `k` largest values, descending; ties to the lower index.
pub fn top_k(p1: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p1.len() {
        return Err(Error::Input(format!("K must be in 1..={}, got {k}", p1.len())));
    }
    let mut idx: Vec<usize> = (0..p1.len()).collect();
    idx.sort_by(|&a, &b| p1[b].partial_cmp(&p1[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Answer-vocabulary indices, by descending `p1`.
    pub answers: Vec<usize>,
    pub declarations: Vec<String>,
    pub p1: Vec<f64>,
}

impl CandidateSet {
    pub fn new(p1: &[f64], k: usize, answers: &[String], declaration: &str) -> Result<Self> {
        let idx = top_k(p1, k)?;
        let declarations = idx.iter().map(|&i| substitute_answer(declaration, &answers[i])).collect::<Result<_>>()?;
        Ok(Self { p1: idx.iter().map(|&i| p1[i]).collect(), answers: idx, declarations })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Answer index maximizing `p1 + p2` over the candidates; ties to the lower
/// vocabulary index. With `renormalize`, `p1` is first renormalized over the
/// candidates.
pub fn fuse(answers: &[usize], p1: &[f64], p2: &[f64], renormalize: bool) -> Result<(usize, Vec<f64>)> {
    if answers.is_empty() || answers.len() != p1.len() || p2.len() != answers.len() {
        return Err(Error::Contract("fusion needs aligned, non-empty candidates".into()));
    }
    let z = if renormalize { p1.iter().sum::<f64>() } else { 1.0 };
    let fused: Vec<f64> = p1.iter().zip(p2).map(|(a, b)| a / z + b).collect();
    let mut best = 0;
    for i in 1..answers.len() {
        if fused[i] > fused[best] || (fused[i] == fused[best] && answers[i] < answers[best]) {
            best = i;
        }
    }
    Ok((answers[best], fused))
}

pub fn predict(cands: &CandidateSet, p2: &[f64]) -> Result<usize> {
    Ok(fuse(&cands.answers, &cands.p1, p2, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Answer-vocabulary index of the prediction.
    pub answer: usize,
    /// Over the whole answer set.
    pub p1: Vec<f64>,
    /// Candidates by descending `p1` (empty without matching).
    pub candidates: Vec<usize>,
    pub p2: Vec<f64>,
    pub fused: Vec<f64>,
}

impl Prediction {
    /// Re-decides with only the first `k` candidates; `k = 0` is argmax p1.
    pub fn with_k(&self, k: usize, renormalize: bool) -> Result<usize> {
        if k == 0 {
            return Ok(math::argmax(&self.p1));
        }
        if k > self.candidates.len() {
            return Err(Error::Input(format!("only {} candidates were scored", self.candidates.len())));
        }
        let p1: Vec<f64> = self.candidates[..k].iter().map(|&c| self.p1[c]).collect();
        Ok(fuse(&self.candidates[..k], &p1, &self.p2[..k], renormalize)?.0)
    }
}

/// Copies the answer rows of the pre-trained MLM head into the zero-shot
/// head and switches scoring to the pre-trained heads.
pub fn zero_shot_init(pretrained: &EncoderParams<f32>, vocab: &Vocabulary) -> Result<EncoderParams<f32>> {
    let missing: Vec<String> = vocab.answers().iter().filter(|a| vocab.id(a).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnswerTokens(missing));
    }
    if vocab.len() != pretrained.config.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "vocabulary has {} tokens, checkpoint {}",
            vocab.len(),
            pretrained.config.vocab_size
        )));
    }
    let rows: Vec<usize> = vocab.answers().iter().map(|a| vocab.id(a).unwrap_or(vocab::UNK) as usize).collect();
    let w = pretrained.tensors.require(names::PT_MLM_W)?.select_rows(&rows);
    let bias = pretrained.tensors.require(names::PT_MLM_B)?;
    let b = Matrix::from_vec(1, rows.len(), rows.iter().map(|&r| bias.data[r]).collect());
    pretrained.tensors.require(names::PT_ITM_W)?;
    let mut p = pretrained.clone();
    p.tensors.insert(names::ZS_MLM_W, w);
    p.tensors.insert(names::ZS_MLM_B, b);
    p.head_mode = HeadMode::Pretrained;
    Ok(p)
}

/// How a fine-tuning run starts from a pre-trained checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    /// Freshly initialized task heads.
    Fresh,
    /// Zero-shot initialization for the cloze paradigms; the baseline still
    /// gets a fresh head.
    Pretrained,
}

pub fn prepare(
    pretrained: &EncoderParams<f32>,
    paradigm: Paradigm,
    init: HeadInit,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<EncoderParams<f32>> {
    if init == HeadInit::Pretrained && paradigm.is_cloze() {
        let mut p = zero_shot_init(pretrained, vocab)?;
        p.reinit_task_heads(seed);
        return Ok(p);
    }
    let mut p = pretrained.clone();
    p.head_mode = HeadMode::Task;
    p.tensors = strip_zero_shot(&p.tensors);
    p.reinit_task_heads(seed);
    Ok(p)
}

fn strip_zero_shot(t: &graph::ParamSet<f32>) -> graph::ParamSet<f32> {
    let mut out = graph::ParamSet::new();
    for (n, m) in t.iter() {
        if !n.starts_with("head.zs_") {
            out.insert(n, m.clone());
        }
    }
    out
}

/// Tensors a paradigm reads, beyond the backbone.
pub fn paradigm_heads(paradigm: Paradigm, mode: HeadMode) -> Vec<&'static str> {
    let mut h = Vec::new();
    match (paradigm, mode) {
        (Paradigm::Baseline, _) => h.push(names::BASELINE),
        (_, HeadMode::Task) => h.push(names::DPT_MLM),
        (_, HeadMode::Pretrained) => h.push("head.zs_mlm"),
    }
    if paradigm == Paradigm::DynamicPrompt {
        h.push(names::DYNAMIC);
    }
    if paradigm.uses_itm() {
        h.push(if mode == HeadMode::Task { names::DPT_ITM } else { "head.pt_itm" });
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Lower bound on optimizer steps, so tiny few-shot sets still train.
    pub min_steps: usize,
    pub batch_size: usize,
    pub k: usize,
    pub optimizer: AdamWConfig,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            min_steps: 0,
            batch_size: 32,
            k: 8,
            optimizer: AdamWConfig::default(),
            freeze_backbone: false,
            seed: 0,
            log_every: 50,
        }
    }
}

impl FinetuneConfig {
    pub fn total_steps(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        (self.epochs * n.div_ceil(self.batch_size)).max(self.min_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogEntry {
    pub step: usize,
    pub mlm_loss: f64,
    pub itm_loss: Option<f64>,
    pub loss: f64,
}

fn gold_index(vocab: &Vocabulary, r: &QARecord) -> Result<usize> {
    vocab
        .answer_index(&r.answer)
        .ok_or_else(|| Error::VocabMismatch(format!("answer `{}` of {} is not in the answer set", r.answer, r.question_id)))
}

/// Trains `params` (prepared with [`prepare`]) on `samples`. Zero samples
/// returns the parameters untouched.
pub fn finetune(
    params: EncoderParams<f32>,
    samples: &[VqaSample<'_>],
    paradigm: Paradigm,
    cfg: &FinetuneConfig,
    vocab: &Vocabulary,
    mut on_log: impl FnMut(&FinetuneLogEntry),
) -> Result<(EncoderParams<f32>, Vec<FinetuneLogEntry>)> {
    let total = cfg.total_steps(samples.len());
    if total == 0 {
        return Ok((params, Vec::new()));
    }
    if cfg.batch_size == 0 || (paradigm.uses_itm() && (cfg.k == 0 || cfg.k > vocab.answers().len())) {
        return Err(Error::Config("batch_size must be positive and K within the answer set".into()));
    }
    let mut params = params;
    let ecfg = params.config.clone();
    let mode = params.head_mode;
    let heads = paradigm_heads(paradigm, mode);
    let freeze = cfg.freeze_backbone;
    let trainable = |n: &str| {
        if EncoderParams::<f32>::is_head(n) {
            heads.iter().any(|h| n.starts_with(h))
        } else {
            !freeze
        }
    };
    let mut opt = AdamW::new(&params.tensors, cfg.optimizer.clone(), total, trainable, |n| !encoder::no_decay(n));
    let gold: Vec<usize> = samples.iter().map(|s| gold_index(vocab, s.record)).collect::<Result<_>>()?;
    let prompts: Vec<Formatted> =
        samples.iter().map(|s| format_prompt(s, paradigm, vocab, &ecfg)).collect::<Result<_>>()?;
    let mut order_rng = rng::stream(cfg.seed, &[tag::FINETUNE, 0]);
    let mut drop_rng = rng::stream(cfg.seed, &[tag::FINETUNE, 1]);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::new();
    let (mut w_mlm, mut w_itm, mut w_n) = (0.0, 0.0, 0usize);
    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut parts = (0.0f64, None);
        let result = graph::grad(&params.tensors, Tracking::Only(opt.trainable_mask()), |g| {
            let inputs: Vec<&BatchInput> = batch.iter().map(|&i| &prompts[i].input).collect();
            let metas: Vec<&PromptMeta> = batch.iter().map(|&i| &prompts[i].meta).collect();
            let enc = encoder::encode(g, &ecfg, &inputs, None, Some(&mut drop_rng))?;
            let logits = answer_logits(g, mode, paradigm, &enc, &metas)?;
            let targets: Vec<Option<usize>> = batch.iter().map(|&i| Some(gold[i])).collect();
            let mlm = g.cross_entropy(logits, &targets);
            parts.0 = g.value(mlm).data[0] as f64;
            if !paradigm.uses_itm() {
                return Ok(mlm);
            }
            // candidates from the current model's p1
            let lv = g.value(logits).clone();
            let mut cand_inputs = Vec::with_capacity(batch.len() * cfg.k);
            let mut labels = Vec::with_capacity(batch.len() * cfg.k);
            for (b, &i) in batch.iter().enumerate() {
                let p1 = softmax64(lv.row(b));
                for c in top_k(&p1, cfg.k)? {
                    cand_inputs.push(format_candidate(&samples[i], &vocab.answers()[c], vocab, &ecfg)?);
                    labels.push(if c == gold[i] { 1.0f32 } else { 0.0 });
                }
            }
            let ci: Vec<&BatchInput> = cand_inputs.iter().map(|f| &f.input).collect();
            let cm: Vec<&PromptMeta> = cand_inputs.iter().map(|f| &f.meta).collect();
            let cenc = encoder::encode(g, &ecfg, &ci, None, Some(&mut drop_rng))?;
            let s = match_logits(g, mode, &cenc, &cm)?;
            let itm = g.bce_with_logits(s, &labels, PROB_CLAMP);
            parts.1 = Some(g.value(itm).data[0] as f64);
            Ok(g.add(mlm, itm))
        });
        let (_, grads) = match result {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !grads.all_finite() {
            return Err(Error::Diverged { step });
        }
        opt.update(&mut params.tensors, &grads);
        w_mlm += parts.0;
        w_itm += parts.1.unwrap_or(0.0);
        w_n += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == total {
            let n = w_n as f64;
            let itm_loss = paradigm.uses_itm().then_some(w_itm / n);
            let e = FinetuneLogEntry { step: step + 1, mlm_loss: w_mlm / n, itm_loss, loss: dpt_total_loss(w_mlm / n, itm_loss) };
            on_log(&e);
            log.push(e);
            (w_mlm, w_itm, w_n) = (0.0, 0.0, 0);
        }
    }
    Ok((params, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    /// Candidates verified by matching; 0 decides by `p1` alone.
    pub k: usize,
    pub renormalize_p1: bool,
    pub batch_size: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { k: 8, renormalize_p1: false, batch_size: 64 }
    }
}

/// Predictions for `samples`. Matching runs only for the full DPT paradigm
/// with `k > 0`; everything else decides by argmax `p1` over the answer set.
pub fn infer(
    params: &EncoderParams<f32>,
    samples: &[VqaSample<'_>],
    paradigm: Paradigm,
    opts: &InferOptions,
    vocab: &Vocabulary,
) -> Result<Vec<Prediction>> {
    if vocab.len() != params.config.vocab_size || vocab.answers().len() != params.config.answer_set_size {
        return Err(Error::VocabMismatch("vocabulary does not match the checkpoint".into()));
    }
    let ecfg = &params.config;
    let n_ans = vocab.answers().len();
    if opts.k > n_ans {
        return Err(Error::Input(format!("K = {} exceeds the answer set ({n_ans})", opts.k)));
    }
    let bs = opts.batch_size.max(1);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(bs) {
        let prompts: Vec<Formatted> =
            chunk.iter().map(|s| format_prompt(s, paradigm, vocab, ecfg)).collect::<Result<_>>()?;
        let mut g = Graph::inference(&params.tensors);
        let inputs: Vec<&BatchInput> = prompts.iter().map(|f| &f.input).collect();
        let metas: Vec<&PromptMeta> = prompts.iter().map(|f| &f.meta).collect();
        let enc = encoder::encode(&mut g, ecfg, &inputs, None, None)?;
        let logits = answer_logits(&mut g, params.head_mode, paradigm, &enc, &metas)?;
        let lv = g.value(logits).clone();
        let p1s: Vec<Vec<f64>> = (0..chunk.len()).map(|b| softmax64(lv.row(b))).collect();
        if !(paradigm.uses_itm() && opts.k > 0) {
            for p1 in p1s {
                out.push(Prediction { answer: math::argmax(&p1), p1, candidates: vec![], p2: vec![], fused: vec![] });
            }
            continue;
        }
        let cands: Vec<Vec<usize>> = p1s.iter().map(|p| top_k(p, opts.k)).collect::<Result<_>>()?;
        let mut cand_inputs = Vec::new();
        for (s, cs) in chunk.iter().zip(&cands) {
            for &c in cs {
                cand_inputs.push(format_candidate(s, &vocab.answers()[c], vocab, ecfg)?);
            }
        }
        let mut p2_all = Vec::with_capacity(cand_inputs.len());
        for sub in cand_inputs.chunks(bs) {
            let mut g = Graph::inference(&params.tensors);
            let ci: Vec<&BatchInput> = sub.iter().map(|f| &f.input).collect();
            let cm: Vec<&PromptMeta> = sub.iter().map(|f| &f.meta).collect();
            let cenc = encoder::encode(&mut g, ecfg, &ci, None, None)?;
            let s = match_logits(&mut g, params.head_mode, &cenc, &cm)?;
            p2_all.extend(g.value(s).data.iter().map(|&x| math::sigmoid(x as f64)));
        }
        for (b, (p1, cs)) in p1s.into_iter().zip(cands).enumerate() {
            let p2 = p2_all[b * opts.k..(b + 1) * opts.k].to_vec();
            let cp1: Vec<f64> = cs.iter().map(|&c| p1[c]).collect();
            let (answer, fused) = fuse(&cs, &cp1, &p2, opts.renormalize_p1)?;
            out.push(Prediction { answer, p1, candidates: cs, p2, fused });
        }
    }
    Ok(out)
}

/// Brute-force decision: every answer of the set verified one input at a
/// time, fused with `p1`, ties to the lowest index.
pub fn exhaustive_oracle(
    params: &EncoderParams<f32>,
    sample: &VqaSample<'_>,
    vocab: &Vocabulary,
) -> Result<usize> {
    let ecfg = &params.config;
    let f = format_prompt(sample, Paradigm::DptMlmItm, vocab, ecfg)?;
    let mut g = Graph::inference(&params.tensors);
    let enc = encoder::encode(&mut g, ecfg, &[&f.input], None, None)?;
    let l = answer_logits(&mut g, params.head_mode, Paradigm::DptMlmItm, &enc, &[&f.meta])?;
    let p1 = softmax64(&g.value(l).data);
    let mut best = (f64::NEG_INFINITY, 0);
    for (a, ans) in vocab.answers().iter().enumerate() {
        let c = format_candidate(sample, ans, vocab, ecfg)?;
        let mut g = Graph::inference(&params.tensors);
        let enc = encoder::encode(&mut g, ecfg, &[&c.input], None, None)?;
        let s = match_logits(&mut g, params.head_mode, &enc, &[&c.meta])?;
        let score = p1[a] + math::sigmoid(g.value(s).data[0] as f64);
        if score > best.0 {
            best = (score, a);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::pack_input;
    use crate::world::{QType, WorldConfig};
    use alloc::collections::BTreeMap;

    fn vocab() -> Vocabulary {
        let w = WorldConfig::default();
        let mut words = w.lexicon();
        words.extend(vocab::PROMPT_WORDS.iter().map(|s| String::from(*s)));
        Vocabulary::new(&words, &w.answer_vocabulary()).unwrap()
    }

    fn record(q: &str, a: &str) -> QARecord {
        QARecord {
            question_id: "q0".into(),
            scene_id: "s0".into(),
            question: q.into(),
            answer: a.into(),
            full_answer: String::new(),
            qtype: QType::QueryColor,
            human_counts: BTreeMap::new(),
        }
    }

    #[test]
    fn prompt_texts_per_paradigm() {
        let q = "what is the red object left of the girl?";
        let d = "a red [MASK] is left of the girl.";
        assert_eq!(
            prompt_text(q, Some(d), Paradigm::DptMlm).unwrap(),
            "what is the red object left of the girl? answer : a red [MASK] is left of the girl."
        );
        assert_eq!(prompt_text(q, None, Paradigm::Baseline).unwrap(), q);
        assert!(matches!(prompt_text(q, None, Paradigm::DptMlmItm), Err(Error::Input(_))));
        let v = vocab();
        let ids = v.tokenize(&prompt_text(q, None, Paradigm::DynamicPrompt).unwrap());
        let tail = &ids[ids.len() - 17..];
        assert!(tail[..16].iter().enumerate().all(|(k, &id)| id == vocab::FIRST_DYNAMIC + k as u32));
        assert_eq!(tail[16], vocab::MASK);
    }

    #[test]
    fn candidate_span_points_at_answer() {
        let v = vocab();
        let cfg = EncoderConfig::for_vocab(&v, 20, 4);
        let r = record("what color is the ball?", "red");
        let s = VqaSample { record: &r, declaration: "the ball is [MASK].", regions: &[] };
        let f = format_candidate(&s, "red", &v, &cfg).unwrap();
        let span = f.meta.answer_span.unwrap();
        assert_eq!(span.len(), 1);
        assert_eq!(f.input.token_ids[span.start], v.id("red").unwrap());
        let m = format_prompt(&s, Paradigm::DptMlm, &v, &cfg).unwrap();
        assert_eq!(m.input.token_ids[m.meta.mask.unwrap()], vocab::MASK);
        assert_eq!(m.input.token_ids.len(), f.input.token_ids.len());
    }

    #[test]
    fn softmax_identities() {
        let p = softmax64(&[0.7; 18]);
        assert!(p.iter().all(|&x| (x - 1.0 / 18.0).abs() < 1e-15));
        let a = softmax64(&[0.5, 2.0, -1.0]);
        let b = softmax64(&[5.5, 7.0, 4.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mlm_loss_values() {
        assert_eq!(mlm_vqa_loss(&[0.0, 1.0], 1).unwrap(), (0.0, false));
        let u = [1.0 / 18.0; 18];
        assert!((mlm_vqa_loss(&u, 3).unwrap().0 - libm::log(18.0)).abs() < 1e-12);
        let (l, flagged) = mlm_vqa_loss(&[1.0, 0.0], 1).unwrap();
        assert!(flagged && (l - 27.631_021_115_928_547).abs() < 1e-9);
    }

    #[test]
    fn itm_loss_values() {
        assert!((itm_vqa_loss(&[0.5], &[4], 4).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
        let eps = 1e-9;
        assert!(itm_vqa_loss(&[1.0 - eps, eps], &[1, 2], 1).unwrap() < 1e-8);
        // gt absent: every label is zero
        let l = itm_vqa_loss(&[0.5, 0.5], &[1, 2], 7).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(dpt_total_loss(0.7, Some(0.3)), 1.0);
        assert_eq!(dpt_total_loss(0.7, None), 0.7);
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        assert_eq!(top_k(&[0.5, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k(&[0.2, 0.4, 0.4], 3).unwrap(), vec![1, 2, 0]);
        assert!(top_k(&[0.5, 0.5], 0).is_err());
        assert!(top_k(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn fusion_arithmetic() {
        assert_eq!(fuse(&[0, 1], &[0.6, 0.4], &[0.3, 0.9], false).unwrap().0, 1);
        assert_eq!(fuse(&[3, 1], &[0.6, 0.4], &[0.5, 0.5], false).unwrap().0, 3);
        // exact tie goes to the lower vocabulary index
        assert_eq!(fuse(&[3, 1], &[0.5, 0.5], &[0.5, 0.5], false).unwrap().0, 1);
        assert!(fuse(&[], &[], &[], false).is_err());
    }

    #[test]
    fn zero_shot_rows_are_copies() {
        let v = vocab();
        let cfg = EncoderConfig::for_vocab(&v, 20, 4);
        let p = EncoderParams::init(&cfg, 11).unwrap();
        let zs = zero_shot_init(&p, &v).unwrap();
        let r = record("what color is the ball?", "red");
        let s = VqaSample { record: &r, declaration: "the ball is [MASK].", regions: &[] };
        let f = format_prompt(&s, Paradigm::DptMlm, &v, &cfg).unwrap();
        let out = encoder::forward(&zs, &[f.input.clone()], false, &mut rng::stream(0, &[])).unwrap().remove(0);
        let (s_ans, _) = answer_scores(&out, &f.meta, &zs, Paradigm::DptMlm).unwrap();
        let mut g = Graph::inference(&zs.tensors);
        let h = g.constant(out.hidden.select_rows(&[f.meta.mask.unwrap()]));
        let full = encoder::pt_mlm_logits(&mut g, h).unwrap();
        for (a, ans) in v.answers().iter().enumerate() {
            assert_eq!(s_ans[a], g.value(full).data[v.id(ans).unwrap() as usize]);
        }
        let c = format_candidate(&s, "red", &v, &cfg).unwrap();
        let out = encoder::forward(&zs, &[c.input], false, &mut rng::stream(0, &[])).unwrap().remove(0);
        let (s_mat, _) = match_score(&out, &c.meta, &zs).unwrap();
        let h = g.constant(out.hidden.select_rows(&[0]));
        let itm = encoder::pt_itm_logit(&mut g, h).unwrap();
        assert_eq!(s_mat, g.value(itm).data[0]);
    }

    #[test]
    fn zero_shots_leave_params_untouched() {
        let v = vocab();
        let cfg = EncoderConfig::for_vocab(&v, 20, 4);
        let p = EncoderParams::init(&cfg, 12).unwrap();
        let zs = prepare(&p, Paradigm::DptMlmItm, HeadInit::Pretrained, 1, &v).unwrap();
        let (out, log) = finetune(zs.clone(), &[], Paradigm::DptMlmItm, &FinetuneConfig::default(), &v, |_| {}).unwrap();
        assert_eq!(out, zs);
        assert!(log.is_empty());
    }

    #[test]
    fn missing_mask_is_a_contract_violation() {
        let v = vocab();
        let cfg = EncoderConfig::for_vocab(&v, 20, 4);
        let p = EncoderParams::init(&cfg, 13).unwrap();
        let b = pack_input(&v.tokenize("the ball is red."), &[], &cfg).unwrap();
        let out = encoder::forward(&p, &[b], false, &mut rng::stream(0, &[])).unwrap().remove(0);
        let err = answer_scores(&out, &PromptMeta::default(), &p, Paradigm::DptMlm).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = match_score(&out, &PromptMeta::default(), &p).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
