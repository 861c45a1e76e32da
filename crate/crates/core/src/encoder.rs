//! Small pre-norm transformer over `[CLS] text [SEP] regions`, plus every
//! prediction head used by pre-training and fine-tuning.
//!
//! Tensor names are stable; checkpoints and the zero-shot initialization
//! address heads by these names.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamSet, Var};
use crate::math::Real;
use crate::rng::{self, tag, StreamRng};
use crate::tensor::Matrix;
use crate::vocab::{self, Vocabulary};

pub mod names {
    pub const TOKEN_EMB: &str = "emb.token";
    pub const POS_EMB: &str = "emb.position";
    pub const SEG_EMB: &str = "emb.segment";
    pub const REGION_W: &str = "emb.region.weight";
    pub const REGION_B: &str = "emb.region.bias";
    pub const DYNAMIC: &str = "prompt.dynamic";
    pub const FINAL_G: &str = "final_ln.gamma";
    pub const FINAL_B: &str = "final_ln.beta";
    pub const PT_MLM_W: &str = "head.pt_mlm.weight";
    pub const PT_MLM_B: &str = "head.pt_mlm.bias";
    pub const PT_ITM_W: &str = "head.pt_itm.weight";
    pub const PT_ITM_B: &str = "head.pt_itm.bias";
    pub const ZS_MLM_W: &str = "head.zs_mlm.weight";
    pub const ZS_MLM_B: &str = "head.zs_mlm.bias";
    pub const BASELINE: &str = "head.baseline";
    pub const DPT_MLM: &str = "head.dpt_mlm";
    pub const DPT_ITM: &str = "head.dpt_itm";

    /// Heads that fine-tuning creates fresh; pre-training never updates them.
    pub const TASK_HEADS: [&str; 3] = [BASELINE, DPT_MLM, DPT_ITM];

    pub fn layer(i: usize, part: &str) -> alloc::string::String {
        alloc::format!("layer{i}.{part}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_text_len: usize,
    pub max_regions: usize,
    pub region_feat_dim: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub answer_set_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_text_len: 32,
            max_regions: 4,
            region_feat_dim: 20,
            dropout: 0.1,
            vocab_size: 0,
            answer_set_size: 18,
        }
    }
}

impl EncoderConfig {
    pub fn for_vocab(vocab: &Vocabulary, region_feat_dim: usize, max_regions: usize) -> Self {
        Self {
            vocab_size: vocab.len(),
            answer_set_size: vocab.answers().len(),
            region_feat_dim,
            max_regions,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.vocab_size < vocab::FIRST_WORD as usize || self.answer_set_size == 0 {
            return Err(Error::Config("vocab_size and answer_set_size must be set".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// `[CLS] + max_text_len + [SEP] + max_regions`
    pub fn total_positions(&self) -> usize {
        self.max_text_len + 2 + self.max_regions
    }
}

/// How the DPT answer and matching scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Concatenation heads on `[h_CLS; h_MASK]` and `[h_CLS; h_answer]`.
    Task,
    /// Pre-trained heads: answer rows of the MLM head on `h_MASK`, the ITM
    /// head on `h_CLS`.
    Pretrained,
}

/// All weights of the encoder and its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S = f32> {
    pub config: EncoderConfig,
    pub head_mode: HeadMode,
    pub tensors: ParamSet<S>,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f32> {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit) as f32).collect())
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    let d = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(rng) as f32).collect())
}

fn insert_mlp(p: &mut ParamSet<f32>, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize, out: usize) {
    p.insert(&format!("{prefix}.hidden.weight"), xavier(rng, hidden, input));
    p.insert(&format!("{prefix}.hidden.bias"), Matrix::zeros(1, hidden));
    p.insert(&format!("{prefix}.out.weight"), xavier(rng, out, hidden));
    p.insert(&format!("{prefix}.out.bias"), Matrix::zeros(1, out));
}

fn insert_task_heads(p: &mut ParamSet<f32>, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let (d, c) = (cfg.d_model, cfg.answer_set_size);
    insert_mlp(p, rng, names::BASELINE, d, d, c);
    insert_mlp(p, rng, names::DPT_MLM, 2 * d, d, c);
    insert_mlp(p, rng, names::DPT_ITM, 2 * d, d, 1);
    p.insert(names::DYNAMIC, normal(rng, vocab::N_DYNAMIC, d, 0.02));
}

impl EncoderParams<f32> {
    /// Xavier-uniform matrices, zero biases, N(0, 0.02) embeddings, unit
    /// layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let (d, f) = (config.d_model, config.d_ff);
        let mut p = ParamSet::new();
        p.insert(names::TOKEN_EMB, normal(&mut rng, config.vocab_size, d, 0.02));
        p.insert(names::POS_EMB, normal(&mut rng, config.max_text_len + 2, d, 0.02));
        p.insert(names::SEG_EMB, normal(&mut rng, 2, d, 0.02));
        p.insert(names::REGION_W, xavier(&mut rng, d, config.region_feat_dim));
        p.insert(names::REGION_B, Matrix::zeros(1, d));
        for i in 0..config.n_layers {
            let l = |s: &str| names::layer(i, s);
            p.insert(&l("ln1.gamma"), Matrix::filled(1, d, 1.0));
            p.insert(&l("ln1.beta"), Matrix::zeros(1, d));
            p.insert(&l("attn.qkv.weight"), xavier(&mut rng, 3 * d, d));
            p.insert(&l("attn.qkv.bias"), Matrix::zeros(1, 3 * d));
            p.insert(&l("attn.out.weight"), xavier(&mut rng, d, d));
            p.insert(&l("attn.out.bias"), Matrix::zeros(1, d));
            p.insert(&l("ln2.gamma"), Matrix::filled(1, d, 1.0));
            p.insert(&l("ln2.beta"), Matrix::zeros(1, d));
            p.insert(&l("ff.in.weight"), xavier(&mut rng, f, d));
            p.insert(&l("ff.in.bias"), Matrix::zeros(1, f));
            p.insert(&l("ff.out.weight"), xavier(&mut rng, d, f));
            p.insert(&l("ff.out.bias"), Matrix::zeros(1, d));
        }
        p.insert(names::FINAL_G, Matrix::filled(1, d, 1.0));
        p.insert(names::FINAL_B, Matrix::zeros(1, d));
        p.insert(names::PT_MLM_W, xavier(&mut rng, config.vocab_size, d));
        p.insert(names::PT_MLM_B, Matrix::zeros(1, config.vocab_size));
        p.insert(names::PT_ITM_W, xavier(&mut rng, 1, d));
        p.insert(names::PT_ITM_B, Matrix::zeros(1, 1));
        insert_task_heads(&mut p, config, &mut rng);
        Ok(Self { config: config.clone(), head_mode: HeadMode::Task, tensors: p })
    }

    /// Fresh values for the fine-tuning heads and dynamic prompt tokens.
    pub fn reinit_task_heads(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, &[tag::HEADS]);
        insert_task_heads(&mut self.tensors, &self.config, &mut rng);
    }
}

impl<S: Real> EncoderParams<S> {
    pub fn cast<T: Real>(&self) -> EncoderParams<T> {
        EncoderParams { config: self.config.clone(), head_mode: self.head_mode, tensors: self.tensors.cast() }
    }

    pub fn is_task_head(name: &str) -> bool {
        names::TASK_HEADS.iter().any(|h| name.starts_with(h)) || name == names::DYNAMIC
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.") || name == names::DYNAMIC
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, m)| m.all_finite())
    }
}

/// One packed example: `[CLS] text [SEP]`, then regions, then padding up to
/// [`EncoderConfig::total_positions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchInput {
    /// One id per position; region and padding positions hold `[PAD]`.
    pub token_ids: Vec<u32>,
    /// 0 for text (and padding), 1 for regions.
    pub segment_ids: Vec<u8>,
    /// `max_regions` rows; rows past `n_regions` are zero padding.
    pub region_features: Vec<Vec<f32>>,
    /// 1 on real positions, 0 on padding.
    pub attention_mask: Vec<u8>,
    pub text_len: usize,
    pub n_regions: usize,
}

impl BatchInput {
    /// `text_len + 2`: positions holding `[CLS] text [SEP]`.
    pub fn text_positions(&self) -> usize {
        self.text_len + 2
    }

    pub fn real_len(&self) -> usize {
        self.text_positions() + self.n_regions
    }

    /// Sequence positions holding `[MASK]`.
    pub fn mask_positions(&self) -> Vec<usize> {
        (0..self.text_positions()).filter(|&p| self.token_ids[p] == vocab::MASK).collect()
    }

    pub fn region_position(&self, k: usize) -> usize {
        self.text_positions() + k
    }
}

/// Packs text ids (without `[CLS]`/`[SEP]`) and region rows.
pub fn pack_input(text_ids: &[u32], regions: &[Vec<f32>], cfg: &EncoderConfig) -> Result<BatchInput> {
    if text_ids.len() > cfg.max_text_len {
        return Err(Error::TooLong { len: text_ids.len(), max: cfg.max_text_len });
    }
    if regions.len() > cfg.max_regions {
        return Err(Error::Input(format!("{} regions exceed max_regions {}", regions.len(), cfg.max_regions)));
    }
    if let Some(r) = regions.iter().find(|r| r.len() != cfg.region_feat_dim) {
        return Err(Error::Input(format!("region feature of length {} (expected {})", r.len(), cfg.region_feat_dim)));
    }
    let total = cfg.total_positions();
    let mut token_ids = vec![vocab::PAD; total];
    token_ids[0] = vocab::CLS;
    token_ids[1..=text_ids.len()].copy_from_slice(text_ids);
    token_ids[text_ids.len() + 1] = vocab::SEP;
    let tp = text_ids.len() + 2;
    let mut segment_ids = vec![0u8; total];
    let mut attention_mask = vec![0u8; total];
    for p in 0..tp + regions.len() {
        attention_mask[p] = 1;
        if p >= tp {
            segment_ids[p] = 1;
        }
    }
    let mut region_features = vec![vec![0.0f32; cfg.region_feat_dim]; cfg.max_regions];
    region_features[..regions.len()].clone_from_slice(regions);
    Ok(BatchInput { token_ids, segment_ids, region_features, attention_mask, text_len: text_ids.len(), n_regions: regions.len() })
}

/// Hidden states of a batch on the tape. Row `seq * seq_len + pos`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub hidden: Var,
    pub seq_len: usize,
    pub n_seq: usize,
}

impl Encoded {
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        seq * self.seq_len + pos
    }
}

fn dropout_mask<S: Real>(rng: &mut StreamRng, len: usize, p: f64) -> Vec<S> {
    let scale = S::from_f64(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.random::<f64>() < p { S::ZERO } else { scale }).collect()
}

fn maybe_dropout<S: Real>(g: &mut Graph<'_, S>, x: Var, p: f64, rng: &mut Option<&mut StreamRng>) -> Var {
    match rng {
        Some(r) if p > 0.0 => {
            let len = g.value(x).len();
            let mask = dropout_mask(r, len, p);
            g.dropout(x, mask)
        }
        _ => x,
    }
}

/// Records the encoder on `g`. Sequences are padded to `seq_len` (at least
/// the longest real length); padded positions never act as attention keys.
/// Dropout is applied only when `dropout_rng` is given.
pub fn encode<S: Real>(
    g: &mut Graph<'_, S>,
    cfg: &EncoderConfig,
    inputs: &[&BatchInput],
    seq_len: Option<usize>,
    mut dropout_rng: Option<&mut StreamRng>,
) -> Result<Encoded> {
    let longest = inputs.iter().map(|b| b.real_len()).max().unwrap_or(1);
    let t = seq_len.unwrap_or(longest).max(longest);
    if t > cfg.total_positions() {
        return Err(Error::Input(format!("sequence length {t} exceeds {}", cfg.total_positions())));
    }
    let n = inputs.len() * t;
    let mut tok = vec![None; n];
    let mut dynamic = vec![None; n];
    let mut pos = vec![None; n];
    let mut seg = vec![None; n];
    let mut valid = vec![false; n];
    let mut region_rows = Vec::new();
    let mut region_data: Vec<S> = Vec::new();
    for (b, inp) in inputs.iter().enumerate() {
        let tp = inp.text_positions();
        for p in 0..t {
            let r = b * t + p;
            if p < tp {
                let id = inp.token_ids[p];
                if Vocabulary::is_dynamic(id) {
                    dynamic[r] = Some((id - vocab::FIRST_DYNAMIC) as usize);
                } else {
                    tok[r] = Some(id as usize);
                }
                pos[r] = Some(p);
                seg[r] = Some(0);
                valid[r] = true;
            } else if p < inp.real_len() {
                region_rows.push(r);
                region_data.extend(inp.region_features[p - tp].iter().map(|&v| S::from_f64(v as f64)));
                seg[r] = Some(1);
                valid[r] = true;
            } else if let Some(&id) = inp.token_ids.get(p) {
                // padding content only ever reaches padding rows
                if !Vocabulary::is_dynamic(id) && (id as usize) < cfg.vocab_size {
                    tok[r] = Some(id as usize);
                }
            }
        }
    }
    let tok_emb = g.param(names::TOKEN_EMB)?;
    let mut x = g.gather(tok_emb, tok);
    if dynamic.iter().any(Option::is_some) {
        let dyn_emb = g.param(names::DYNAMIC)?;
        let e = g.gather(dyn_emb, dynamic);
        x = g.add(x, e);
    }
    let pos_emb = g.param(names::POS_EMB)?;
    let e = g.gather(pos_emb, pos);
    x = g.add(x, e);
    let seg_emb = g.param(names::SEG_EMB)?;
    let e = g.gather(seg_emb, seg);
    x = g.add(x, e);
    if !region_rows.is_empty() {
        let feats = g.constant(Matrix::from_vec(region_rows.len(), cfg.region_feat_dim, region_data));
        let (w, bias) = (g.param(names::REGION_W)?, g.param(names::REGION_B)?);
        let proj = g.linear(feats, w, Some(bias));
        let placed = g.place(proj, region_rows, n);
        x = g.add(x, placed);
    }
    x = maybe_dropout(g, x, cfg.dropout, &mut dropout_rng);

    for i in 0..cfg.n_layers {
        let l = |s: &str| names::layer(i, s);
        let (g1, b1) = (g.param(&l("ln1.gamma"))?, g.param(&l("ln1.beta"))?);
        let a = g.layer_norm(x, g1, b1);
        let (wq, bq) = (g.param(&l("attn.qkv.weight"))?, g.param(&l("attn.qkv.bias"))?);
        let qkv = g.linear(a, wq, Some(bq));
        let att = g.attention(qkv, t, cfg.n_heads, valid.clone());
        let (wo, bo) = (g.param(&l("attn.out.weight"))?, g.param(&l("attn.out.bias"))?);
        let o = g.linear(att, wo, Some(bo));
        let o = maybe_dropout(g, o, cfg.dropout, &mut dropout_rng);
        x = g.add(x, o);
        let (g2, b2) = (g.param(&l("ln2.gamma"))?, g.param(&l("ln2.beta"))?);
        let f = g.layer_norm(x, g2, b2);
        let (w1, bi) = (g.param(&l("ff.in.weight"))?, g.param(&l("ff.in.bias"))?);
        let f = g.linear(f, w1, Some(bi));
        let f = g.gelu(f);
        let (w2, bo2) = (g.param(&l("ff.out.weight"))?, g.param(&l("ff.out.bias"))?);
        let f = g.linear(f, w2, Some(bo2));
        let f = maybe_dropout(g, f, cfg.dropout, &mut dropout_rng);
        x = g.add(x, f);
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite { layer: i });
        }
    }
    let (fg, fb) = (g.param(names::FINAL_G)?, g.param(names::FINAL_B)?);
    let hidden = g.layer_norm(x, fg, fb);
    if !g.value(hidden).all_finite() {
        return Err(Error::NonFinite { layer: cfg.n_layers });
    }
    Ok(Encoded { hidden, seq_len: t, n_seq: inputs.len() })
}

/// `hidden -> GELU(W1 hidden + b1) -> W2 . + b2` for a head named `prefix`.
pub fn mlp_head<S: Real>(g: &mut Graph<'_, S>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.hidden.weight"))?;
    let b1 = g.param(&format!("{prefix}.hidden.bias"))?;
    let h = g.linear(x, w1, Some(b1));
    let h = g.gelu(h);
    let w2 = g.param(&format!("{prefix}.out.weight"))?;
    let b2 = g.param(&format!("{prefix}.out.bias"))?;
    Ok(g.linear(h, w2, Some(b2)))
}

/// Pre-training MLM logits over the whole vocabulary.
pub fn pt_mlm_logits<S: Real>(g: &mut Graph<'_, S>, h: Var) -> Result<Var> {
    let (w, b) = (g.param(names::PT_MLM_W)?, g.param(names::PT_MLM_B)?);
    Ok(g.linear(h, w, Some(b)))
}

/// Pre-training ITM logit (one column).
pub fn pt_itm_logit<S: Real>(g: &mut Graph<'_, S>, h_cls: Var) -> Result<Var> {
    let (w, b) = (g.param(names::PT_ITM_W)?, g.param(names::PT_ITM_B)?);
    Ok(g.linear(h_cls, w, Some(b)))
}

/// Hidden states of one example, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Matrix<f32>,
}

/// Encodes each input over all [`EncoderConfig::total_positions`].
pub fn forward(
    params: &EncoderParams<f32>,
    batch: &[BatchInput],
    train_mode: bool,
    rng: &mut StreamRng,
) -> Result<Vec<EncoderOutput>> {
    let mut g = Graph::inference(&params.tensors);
    let refs: Vec<&BatchInput> = batch.iter().collect();
    let total = params.config.total_positions();
    let enc = encode(&mut g, &params.config, &refs, Some(total), if train_mode { Some(rng) } else { None })?;
    let h = g.value(enc.hidden);
    Ok((0..batch.len())
        .map(|b| {
            let rows: Vec<usize> = (0..total).map(|p| enc.row(b, p)).collect();
            EncoderOutput { hidden: h.select_rows(&rows) }
        })
        .collect())
}

/// Parameter names excluded from weight decay.
pub fn no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("ln") || name.starts_with("emb.") || name == names::DYNAMIC
}

pub fn param_names<S: Real>(p: &EncoderParams<S>) -> Vec<String> {
    p.tensors.iter().map(|(n, _)| String::from(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{grad, Tracking};
    use crate::world::WorldConfig;

    fn setup() -> (Vocabulary, EncoderConfig) {
        let w = WorldConfig::default();
        let mut words = w.lexicon();
        words.extend(vocab::PROMPT_WORDS.iter().map(|s| String::from(*s)));
        let v = Vocabulary::new(&words, &w.answer_vocabulary()).unwrap();
        let cfg = EncoderConfig::for_vocab(&v, w.region_feat_dim(), 4);
        (v, cfg)
    }

    fn regions(n: usize, dim: usize, salt: u64) -> Vec<Vec<f32>> {
        let mut r = rng::stream(salt, &[]);
        (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn layout_of_packed_input() {
        let (v, cfg) = setup();
        let ids = v.tokenize("what color is the ball?");
        assert_eq!(ids.len(), 6);
        let b = pack_input(&ids[..5], &regions(3, 20, 0), &cfg).unwrap();
        assert_eq!(b.token_ids.len(), cfg.total_positions());
        assert_eq!(b.attention_mask.iter().filter(|&&m| m == 1).count(), 10);
        assert_eq!(b.token_ids[0], vocab::CLS);
        assert_eq!(b.token_ids[6], vocab::SEP);
        assert_eq!(&b.segment_ids[7..10], &[1, 1, 1]);
        let text_only = pack_input(&ids, &[], &cfg).unwrap();
        assert_eq!(text_only.real_len(), 8);
    }

    #[test]
    fn mask_position_is_recoverable() {
        let (v, cfg) = setup();
        let b = pack_input(&v.tokenize("the ball is [MASK]."), &[], &cfg).unwrap();
        assert_eq!(b.mask_positions(), vec![4]);
    }

    #[test]
    fn overlong_text_fails_loudly() {
        let (_, cfg) = setup();
        let ids = vec![30u32; cfg.max_text_len + 1];
        assert!(matches!(pack_input(&ids, &[], &cfg), Err(Error::TooLong { .. })));
    }

    #[test]
    fn output_shape_and_determinism_without_dropout() {
        let (v, cfg) = setup();
        let p = EncoderParams::init(&cfg, 1).unwrap();
        let b = pack_input(&v.tokenize("the ball is red."), &regions(2, 20, 1), &cfg).unwrap();
        let mut r = rng::stream(0, &[]);
        let o1 = forward(&p, &[b.clone()], false, &mut r).unwrap();
        let o2 = forward(&p, &[b], false, &mut r).unwrap();
        assert_eq!(o1[0].hidden.shape(), (cfg.total_positions(), cfg.d_model));
        assert_eq!(o1, o2);
    }

    #[test]
    fn padding_content_never_reaches_real_positions() {
        let (v, cfg) = setup();
        let p = EncoderParams::init(&cfg, 2).unwrap();
        let b = pack_input(&v.tokenize("the cup is on the left."), &regions(2, 20, 2), &cfg).unwrap();
        let mut perturbed = b.clone();
        for pos in b.real_len()..cfg.total_positions() {
            perturbed.token_ids[pos] = 30 + (pos as u32 % 7);
        }
        for k in b.n_regions..cfg.max_regions {
            perturbed.region_features[k] = regions(1, 20, 9 + k as u64).remove(0);
        }
        let mut r = rng::stream(0, &[]);
        let a = forward(&p, &[b.clone()], false, &mut r).unwrap();
        let c = forward(&p, &[perturbed], false, &mut r).unwrap();
        for pos in 0..b.real_len() {
            assert_eq!(a[0].hidden.row(pos), c[0].hidden.row(pos));
        }
    }

    #[test]
    fn batching_does_not_change_hidden_states() {
        let (v, cfg) = setup();
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let a = pack_input(&v.tokenize("the cup is on the left."), &regions(2, 20, 3), &cfg).unwrap();
        let b = pack_input(&v.tokenize("is there a red ball?"), &regions(4, 20, 4), &cfg).unwrap();
        let mut g = Graph::inference(&p.tensors);
        let single = encode(&mut g, &cfg, &[&a], None, None).unwrap();
        let batched = encode(&mut g, &cfg, &[&b, &a], None, None).unwrap();
        for pos in 0..a.real_len() {
            assert_eq!(g.value(single.hidden).row(single.row(0, pos)), g.value(batched.hidden).row(batched.row(1, pos)));
        }
    }

    #[test]
    fn dropout_changes_outputs_only_in_train_mode() {
        let (v, cfg) = setup();
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let b = pack_input(&v.tokenize("the ball is red."), &regions(2, 20, 5), &cfg).unwrap();
        let mut r = rng::stream(0, &[]);
        let eval = forward(&p, &[b.clone()], false, &mut r).unwrap();
        let train = forward(&p, &[b], true, &mut r).unwrap();
        assert_ne!(eval, train);
    }

    #[test]
    fn non_finite_weights_are_reported_with_layer() {
        let (v, cfg) = setup();
        let mut p = EncoderParams::init(&cfg, 5).unwrap();
        p.tensors.get_mut(&names::layer(1, "ff.out.bias")).unwrap().data[0] = f32::NAN;
        let b = pack_input(&v.tokenize("the ball is red."), &[], &cfg).unwrap();
        let err = forward(&p, &[b], false, &mut rng::stream(0, &[])).unwrap_err();
        assert_eq!(err, Error::NonFinite { layer: 1 });
    }

    #[test]
    fn cross_entropy_vanishes_with_growing_margin() {
        let p: ParamSet<f64> = ParamSet::new();
        let mut last = f64::INFINITY;
        for margin in [0.0, 2.0, 5.0, 10.0, 30.0] {
            let mut g = Graph::inference(&p);
            let l = g.constant(Matrix::from_vec(1, 3, vec![margin, 0.0, 0.0]));
            let loss = g.cross_entropy(l, &[Some(0)]);
            let v = g.value(loss).data[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn frozen_backbone_gets_zero_gradient() {
        let (v, cfg) = setup();
        let p = EncoderParams::init(&cfg, 6).unwrap().cast::<f64>();
        let b = pack_input(&v.tokenize("the ball is [MASK]."), &regions(2, 20, 6), &cfg).unwrap();
        let mask: Vec<bool> = p.tensors.iter().map(|(n, _)| n.starts_with("head.")).collect();
        let (_, gr) = grad(&p.tensors, Tracking::Only(&mask), |g| {
            let e = encode(g, &cfg, &[&b], None, None)?;
            let h = g.select_rows(e.hidden, &[4]);
            let l = pt_mlm_logits(g, h)?;
            Ok(g.cross_entropy(l, &[Some(30)]))
        })
        .unwrap();
        for (i, (name, _)) in p.tensors.iter().enumerate() {
            if !name.starts_with("head.") {
                assert!(gr.values[i].data.iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }
}
