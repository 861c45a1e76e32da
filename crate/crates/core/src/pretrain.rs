//! Self-supervised pre-training: masked-token recovery over declarative
//! scene captions in multimodal context, and image-text matching.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, BatchInput, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Tracking};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, tag, StreamRng};
use crate::text;
use crate::vocab::{self, Vocabulary};
use crate::world::{Split, NO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    /// Share of selected positions replaced by `[MASK]`, a random word, or kept.
    pub mask_split: [f64; 3],
    pub itm_negative_prob: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mlm_weight: f64,
    pub itm_weight: f64,
    pub seed: u64,
    pub log_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_split: [0.8, 0.1, 0.1],
            itm_negative_prob: 0.5,
            steps: 5000,
            batch_size: 64,
            mlm_weight: 1.0,
            itm_weight: 1.0,
            seed: 0,
            log_every: 50,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.mask_prob, self.itm_negative_prob, self.mask_split[0], self.mask_split[1], self.mask_split[2]];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if (self.mask_split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mask_split must sum to 1".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: String,
    pub caption: String,
}

/// One caption per scene: the scene's full answers joined in record order,
/// skipping negative verifications (they name objects that are absent) and
/// stopping before `max_tokens` would be exceeded. A scene whose records are
/// all negative verifications gets an empty caption.
pub fn build_captions(split: &Split, max_tokens: usize) -> Vec<CaptionRecord> {
    let mut out: Vec<CaptionRecord> = split
        .scenes
        .iter()
        .map(|s| CaptionRecord { scene_id: s.scene_id.clone(), caption: String::new() })
        .collect();
    let mut lens = vec![0usize; out.len()];
    for r in &split.records {
        if r.answer == NO {
            continue;
        }
        let Some(i) = split.scene_index(&r.scene_id) else { continue };
        let n = text::tokenize(&r.full_answer).len();
        if lens[i] + n > max_tokens {
            continue;
        }
        if !out[i].caption.is_empty() {
            out[i].caption.push(' ');
        }
        out[i].caption.push_str(&r.full_answer);
        lens[i] += n;
    }
    out
}

/// Captions paired with the regions of their own scene, aligned by index.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub captions: Vec<CaptionRecord>,
    pub caption_ids: Vec<Vec<u32>>,
    pub regions: Vec<Vec<Vec<f32>>>,
}

impl PretrainData {
    /// Scenes whose caption came out empty are left out.
    pub fn from_split(split: &Split, vocab: &Vocabulary, max_text_len: usize) -> Self {
        let mut data = Self { captions: Vec::new(), caption_ids: Vec::new(), regions: Vec::new() };
        for (c, r) in build_captions(split, max_text_len).into_iter().zip(&split.regions) {
            if c.caption.is_empty() {
                continue;
            }
            data.caption_ids.push(vocab.tokenize(&c.caption));
            data.captions.push(c);
            data.regions.push(r.clone());
        }
        data
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Corrupts maskable positions for MLM. Returns the corrupted ids and, per
/// position, the original id where a position was selected.
pub fn mask_tokens(
    ids: &[u32],
    vocab_size: usize,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<Option<u32>>) {
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if !Vocabulary::is_maskable(id) || rng.random::<f64>() >= cfg.mask_prob {
            continue;
        }
        labels[i] = Some(id);
        let u = rng.random::<f64>();
        if u < cfg.mask_split[0] {
            out[i] = vocab::MASK;
        } else if u < cfg.mask_split[0] + cfg.mask_split[1] {
            out[i] = rng.random_range(vocab::FIRST_WORD..vocab_size as u32);
        }
    }
    (out, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItmSample {
    pub caption: usize,
    pub regions: usize,
    pub label: u8,
}

/// Draws a caption uniformly; with probability `itm_negative_prob` pairs it
/// with a uniformly drawn different scene.
pub fn itm_sample(n_scenes: usize, rng: &mut impl Rng, cfg: &PretrainConfig) -> Result<ItmSample> {
    if n_scenes < 2 {
        return Err(Error::Sampling(format!("image-text matching needs at least 2 scenes, got {n_scenes}")));
    }
    let caption = rng.random_range(0..n_scenes);
    if rng.random::<f64>() < cfg.itm_negative_prob {
        let mut other = rng.random_range(0..n_scenes - 1);
        if other >= caption {
            other += 1;
        }
        Ok(ItmSample { caption, regions: other, label: 0 })
    } else {
        Ok(ItmSample { caption, regions: caption, label: 1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub mlm_loss: f64,
    pub itm_loss: f64,
    pub itm_acc: f64,
}

/// Tensors pre-training updates: the backbone plus the pre-training heads.
pub fn pretrain_trainable(name: &str) -> bool {
    !EncoderParams::<f32>::is_task_head(name) && !name.starts_with("head.zs_")
}

struct Window {
    mlm: f64,
    itm: f64,
    correct: usize,
    seen: usize,
    steps: usize,
}

/// Optimizes `w_mlm * CE + w_itm * BCE` for `cfg.steps` steps, calling
/// `on_log` every `cfg.log_every` steps with window averages.
pub fn pretrain(
    data: &PretrainData,
    mut params: EncoderParams<f32>,
    cfg: &PretrainConfig,
    mut on_log: impl FnMut(&PretrainLogEntry),
) -> Result<(EncoderParams<f32>, Vec<PretrainLogEntry>)> {
    cfg.validate()?;
    let ecfg = params.config.clone();
    let mut opt = AdamW::new(&params.tensors, cfg.optimizer.clone(), cfg.steps, pretrain_trainable, |n| {
        !encoder::no_decay(n)
    });
    let mut sample_rng = rng::stream(cfg.seed, &[tag::PRETRAIN, 0]);
    let mut drop_rng = rng::stream(cfg.seed, &[tag::PRETRAIN, 1]);
    let mut log = Vec::new();
    let mut w = Window { mlm: 0.0, itm: 0.0, correct: 0, seen: 0, steps: 0 };
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        let mut itm_targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = itm_sample(data.len(), &mut sample_rng, cfg)?;
            let ids = &data.caption_ids[s.caption];
            // every caption is corrupted so masks carry no matching signal;
            // only matched pairs contribute to the MLM loss
            let (ids, mut lab) = mask_tokens(ids, ecfg.vocab_size, cfg, &mut sample_rng);
            if s.label == 0 {
                lab.iter_mut().for_each(|l| *l = None);
            }
            inputs.push(encoder::pack_input(&ids, &data.regions[s.regions], &ecfg)?);
            labels.push(lab);
            itm_targets.push(s.label as f32);
        }
        let refs: Vec<&BatchInput> = inputs.iter().collect();
        let mut parts = (0.0f64, 0.0f64, 0usize);
        let result = graph::grad(&params.tensors, Tracking::Only(opt.trainable_mask()), |g| {
            let enc = encoder::encode(g, &ecfg, &refs, None, Some(&mut drop_rng))?;
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (b, lab) in labels.iter().enumerate() {
                for (i, l) in lab.iter().enumerate() {
                    if let Some(t) = l {
                        rows.push(enc.row(b, i + 1));
                        targets.push(Some(*t as usize));
                    }
                }
            }
            let cls: Vec<usize> = (0..refs.len()).map(|b| enc.row(b, 0)).collect();
            let h_cls = g.select_rows(enc.hidden, &cls);
            let itm = encoder::pt_itm_logit(g, h_cls)?;
            parts.2 = g.value(itm).data.iter().zip(&itm_targets).filter(|(s, &y)| (**s > 0.0) == (y > 0.5)).count();
            let itm_loss = g.bce_with_logits(itm, &itm_targets, 1e-12);
            parts.1 = g.value(itm_loss).data[0] as f64;
            let itm_loss = g.scale(itm_loss, cfg.itm_weight as f32);
            if rows.is_empty() {
                return Ok(itm_loss);
            }
            let h = g.select_rows(enc.hidden, &rows);
            let logits = encoder::pt_mlm_logits(g, h)?;
            let mlm_loss = g.cross_entropy(logits, &targets);
            parts.0 = g.value(mlm_loss).data[0] as f64;
            let mlm_loss = g.scale(mlm_loss, cfg.mlm_weight as f32);
            Ok(g.add(mlm_loss, itm_loss))
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
        w.mlm += parts.0;
        w.itm += parts.1;
        w.correct += parts.2;
        w.seen += cfg.batch_size;
        w.steps += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let e = PretrainLogEntry {
                step: step + 1,
                mlm_loss: w.mlm / w.steps as f64,
                itm_loss: w.itm / w.steps as f64,
                itm_acc: w.correct as f64 / w.seen as f64,
            };
            on_log(&e);
            log.push(e);
            w = Window { mlm: 0.0, itm: 0.0, correct: 0, seen: 0, steps: 0 };
        }
    }
    Ok((params, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainHealth {
    /// Matched/mismatched pair classification accuracy.
    pub itm_acc: f64,
    /// Top-1 recovery of individually masked attribute words.
    pub attribute_recovery: f64,
    pub itm_pairs: usize,
    pub attribute_positions: usize,
}

/// Held-out health of a pre-trained checkpoint. `n_pairs` ITM pairs are
/// drawn at a 0.5 negative rate; every attribute word (an answer word other
/// than yes/no) in every caption is masked alone and must be recovered.
pub fn pretrain_health(
    params: &EncoderParams<f32>,
    data: &PretrainData,
    vocab: &Vocabulary,
    n_pairs: usize,
    seed: u64,
) -> Result<PretrainHealth> {
    let ecfg = &params.config;
    let cfg = PretrainConfig { itm_negative_prob: 0.5, ..PretrainConfig::default() };
    let mut r: StreamRng = rng::stream(seed, &[tag::HEALTH]);
    let attribute: Vec<u32> = vocab
        .answers()
        .iter()
        .zip(vocab.answer_token_ids())
        .filter(|(a, _)| a.as_str() != crate::world::YES && a.as_str() != NO)
        .map(|(_, &t)| t)
        .collect();

    let mut itm_correct = 0usize;
    let pairs: Vec<ItmSample> = (0..n_pairs).map(|_| itm_sample(data.len(), &mut r, &cfg)).collect::<Result<_>>()?;
    for chunk in pairs.chunks(64) {
        let inputs: Vec<BatchInput> = chunk
            .iter()
            .map(|s| encoder::pack_input(&data.caption_ids[s.caption], &data.regions[s.regions], ecfg))
            .collect::<Result<_>>()?;
        let refs: Vec<&BatchInput> = inputs.iter().collect();
        let mut g = Graph::inference(&params.tensors);
        let enc = encoder::encode(&mut g, ecfg, &refs, None, None)?;
        let cls: Vec<usize> = (0..refs.len()).map(|b| enc.row(b, 0)).collect();
        let h = g.select_rows(enc.hidden, &cls);
        let s = encoder::pt_itm_logit(&mut g, h)?;
        itm_correct += g.value(s).data.iter().zip(chunk).filter(|(s, p)| (**s > 0.0) == (p.label == 1)).count();
    }

    let mut queries = Vec::new();
    for (i, ids) in data.caption_ids.iter().enumerate() {
        for (p, id) in ids.iter().enumerate() {
            if attribute.contains(id) {
                queries.push((i, p));
            }
        }
    }
    let mut recovered = 0usize;
    for chunk in queries.chunks(64) {
        let inputs: Vec<BatchInput> = chunk
            .iter()
            .map(|&(i, p)| {
                let mut ids = data.caption_ids[i].clone();
                ids[p] = vocab::MASK;
                encoder::pack_input(&ids, &data.regions[i], ecfg)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&BatchInput> = inputs.iter().collect();
        let mut g = Graph::inference(&params.tensors);
        let enc = encoder::encode(&mut g, ecfg, &refs, None, None)?;
        let rows: Vec<usize> = chunk.iter().enumerate().map(|(b, &(_, p))| enc.row(b, p + 1)).collect();
        let h = g.select_rows(enc.hidden, &rows);
        let logits = encoder::pt_mlm_logits(&mut g, h)?;
        let lm = g.value(logits);
        for (b, &(i, p)) in chunk.iter().enumerate() {
            if crate::math::argmax(lm.row(b)) == data.caption_ids[i][p] as usize {
                recovered += 1;
            }
        }
    }
    Ok(PretrainHealth {
        itm_acc: itm_correct as f64 / n_pairs.max(1) as f64,
        attribute_recovery: recovered as f64 / queries.len().max(1) as f64,
        itm_pairs: n_pairs,
        attribute_positions: queries.len(),
    })
}
