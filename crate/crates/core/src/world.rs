//! Synthetic scenes of attributed objects on a grid, their noisy region
//! features, and templated QA annotations in the question / answer /
//! fullAnswer layout.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const COLOR_NAMES: [&str; 12] =
    ["red", "blue", "green", "yellow", "purple", "pink", "brown", "gray", "black", "white", "teal", "gold"];
pub const TYPE_NAMES: [&str; 12] =
    ["ball", "cube", "cup", "box", "hat", "book", "chair", "lamp", "bowl", "vase", "shoe", "kite"];
pub const SIZE_NAMES: [&str; 4] = ["small", "large", "medium", "tiny"];
pub const SIDES: [&str; 2] = ["left", "right"];
pub const YES: &str = "yes";
pub const NO: &str = "no";

/// Every word the question and answer templates can produce.
pub const TEMPLATE_WORDS: &[&str] = &[
    "what", "color", "is", "the", "object", "a", "left", "of", "on", "which", "side", "there", "no", "yes",
    "right", "?", ".", ",",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum QType {
    QueryColor,
    QueryType,
    QueryRel,
    QuerySide,
    Verify,
}

impl QType {
    pub const ALL: [QType; 5] = [QType::QueryColor, QType::QueryType, QType::QueryRel, QType::QuerySide, QType::Verify];

    pub fn as_str(self) -> &'static str {
        match self {
            QType::QueryColor => "queryColor",
            QType::QueryType => "queryType",
            QType::QueryRel => "queryRel",
            QType::QuerySide => "querySide",
            QType::Verify => "verify",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_colors: usize,
    pub n_object_types: usize,
    pub n_sizes: usize,
    /// (width cells, height cells)
    pub grid: (usize, usize),
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
    /// Sampling weights of the question types, in [`QType::ALL`] order.
    pub qtype_mixture: [f64; 5],
    pub questions_per_scene: usize,
    /// Probability that a record's synthetic annotators disagree.
    pub disagreement_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_colors: 6,
            n_object_types: 8,
            n_sizes: 2,
            grid: (4, 4),
            objects_per_scene: (2, 4),
            noise_sigma: 0.05,
            seed: 0,
            qtype_mixture: [0.25, 0.25, 0.2, 0.1, 0.2],
            questions_per_scene: 3,
            disagreement_rate: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn region_feat_dim(&self) -> usize {
        self.n_colors + self.n_object_types + self.n_sizes + 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (w, h) = self.grid;
        let (lo, hi) = self.objects_per_scene;
        if !(2..=COLOR_NAMES.len()).contains(&self.n_colors) {
            return bad(format!("n_colors must be in 2..={}", COLOR_NAMES.len()));
        }
        if !(2..=TYPE_NAMES.len()).contains(&self.n_object_types) {
            return bad(format!("n_object_types must be in 2..={}", TYPE_NAMES.len()));
        }
        if !(1..=SIZE_NAMES.len()).contains(&self.n_sizes) {
            return bad(format!("n_sizes must be in 1..={}", SIZE_NAMES.len()));
        }
        if w < 2 || h < 1 {
            return bad("grid must be at least 2 cells wide and 1 tall".into());
        }
        if lo < 2 || lo > hi {
            return bad(format!("objects_per_scene ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        let cap = self.n_colors.min(self.n_object_types).min(w * h);
        if hi > cap {
            return bad(format!("objects_per_scene.max {hi} exceeds min(n_colors, n_object_types, grid cells) = {cap}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        if self.qtype_mixture.iter().any(|w| !(*w >= 0.0)) || self.qtype_mixture.iter().sum::<f64>() <= 0.0 {
            return bad("qtype_mixture weights must be >= 0 with a positive sum".into());
        }
        if self.questions_per_scene == 0 {
            return bad("questions_per_scene must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.disagreement_rate) {
            return bad("disagreement_rate must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn color_name(&self, id: usize) -> &'static str {
        COLOR_NAMES[id]
    }

    pub fn type_name(&self, id: usize) -> &'static str {
        TYPE_NAMES[id]
    }

    /// The closed answer set C: colors, types, sides, yes, no.
    pub fn answer_vocabulary(&self) -> Vec<String> {
        let mut c: Vec<String> = Vec::new();
        c.extend(COLOR_NAMES[..self.n_colors].iter().map(|s| s.to_string()));
        c.extend(TYPE_NAMES[..self.n_object_types].iter().map(|s| s.to_string()));
        c.extend(SIDES.iter().map(|s| s.to_string()));
        c.push(YES.to_string());
        c.push(NO.to_string());
        c
    }

    /// Every word a generated question, answer or full answer can contain.
    pub fn lexicon(&self) -> Vec<String> {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        for a in self.answer_vocabulary() {
            if !words.contains(&a) {
                words.push(a);
            }
        }
        words
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub type_id: usize,
    pub color_id: usize,
    pub size_id: usize,
    pub cell: (usize, usize),
    /// (cx, cy, w, h), all in [0, 1]
    pub bbox: [f64; 4],
}

impl ObjectSpec {
    pub fn new(type_id: usize, color_id: usize, size_id: usize, cell: (usize, usize), grid: (usize, usize)) -> Self {
        Self { type_id, color_id, size_id, cell, bbox: bbox_for(cell, grid) }
    }

    pub fn side(&self) -> &'static str {
        if self.bbox[0] < 0.5 {
            "left"
        } else {
            "right"
        }
    }
}

pub fn bbox_for(cell: (usize, usize), grid: (usize, usize)) -> [f64; 4] {
    let (w, h) = (grid.0 as f64, grid.1 as f64);
    [(cell.0 as f64 + 0.5) / w, (cell.1 as f64 + 0.5) / h, 1.0 / w, 1.0 / h]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub objects: Vec<ObjectSpec>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&self.objects[i], &self.objects[j]);
                if a.type_id == b.type_id || a.color_id == b.color_id || a.cell == b.cell {
                    return Err(Error::Input(format!(
                        "scene {}: objects {i} and {j} share a type, color or cell",
                        self.scene_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Objects strictly left of `obj` within its row.
    pub fn left_neighbours(&self, obj: usize) -> impl Iterator<Item = usize> + '_ {
        let o = &self.objects[obj];
        self.objects
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.cell.1 == o.cell.1 && p.cell.0 < o.cell.0)
            .map(|(i, _)| i)
    }
}

/// Draws a scene satisfying every scene invariant. The first two placements
/// share a row, so a relational question is always constructible; object
/// order is shuffled afterwards.
pub fn generate_scene(cfg: &WorldConfig, scene_id: &str, rng: &mut impl Rng) -> Result<Scene> {
    cfg.validate()?;
    let (w, h) = cfg.grid;
    let (lo, hi) = cfg.objects_per_scene;
    let n = rng.random_range(lo..=hi);
    let mut types: Vec<usize> = (0..cfg.n_object_types).collect();
    let mut colors: Vec<usize> = (0..cfg.n_colors).collect();
    types.partial_shuffle(rng, n);
    colors.partial_shuffle(rng, n);

    let row = rng.random_range(0..h);
    let mut xs: Vec<usize> = (0..w).collect();
    xs.partial_shuffle(rng, 2);
    let mut cells = vec![(xs[0], row), (xs[1], row)];
    let mut free: Vec<(usize, usize)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|c| !cells.contains(c)).collect();
    free.partial_shuffle(rng, n - 2);
    cells.extend_from_slice(&free[..n - 2]);

    let mut objects: Vec<ObjectSpec> = (0..n)
        .map(|i| {
            let size = rng.random_range(0..cfg.n_sizes);
            ObjectSpec::new(types[i], colors[i], size, cells[i], cfg.grid)
        })
        .collect();
    objects.shuffle(rng);
    let scene = Scene { scene_id: scene_id.to_string(), objects };
    scene.validate()?;
    Ok(scene)
}

/// One feature row per object: onehot(color) ++ onehot(type) ++ onehot(size)
/// ++ bbox, plus i.i.d. Gaussian noise on every slot.
pub fn encode_regions(scene: &Scene, cfg: &WorldConfig, rng: &mut impl Rng) -> Result<Vec<Vec<f32>>> {
    let dim = cfg.region_feat_dim();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut out = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        if o.color_id >= cfg.n_colors || o.type_id >= cfg.n_object_types || o.size_id >= cfg.n_sizes {
            return Err(Error::Input(format!("scene {}: attribute out of range", scene.scene_id)));
        }
        let mut v = vec![0.0f64; dim];
        v[o.color_id] = 1.0;
        v[cfg.n_colors + o.type_id] = 1.0;
        v[cfg.n_colors + cfg.n_object_types + o.size_id] = 1.0;
        v[dim - 4..].copy_from_slice(&o.bbox);
        if cfg.noise_sigma > 0.0 {
            for x in &mut v {
                *x += noise.sample(rng);
            }
        }
        out.push(v.into_iter().map(|x| x as f32).collect());
    }
    Ok(out)
}

/// Recovers (color, type, size) from a feature row by block argmax.
pub fn decode_region(feat: &[f32], cfg: &WorldConfig) -> (usize, usize, usize) {
    fn argmax(s: &[f32]) -> usize {
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }
    let (c, t) = (cfg.n_colors, cfg.n_object_types);
    (argmax(&feat[..c]), argmax(&feat[c..c + t]), argmax(&feat[c + t..c + t + cfg.n_sizes]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub question_id: String,
    pub scene_id: String,
    pub question: String,
    pub answer: String,
    pub full_answer: String,
    pub qtype: QType,
    pub human_counts: BTreeMap<String, u32>,
}

impl QARecord {
    pub fn is_yes_no(&self) -> bool {
        self.answer == YES || self.answer == NO
    }
}

fn sample_qtype(cfg: &WorldConfig, rng: &mut impl Rng) -> QType {
    let total: f64 = cfg.qtype_mixture.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (q, &w) in QType::ALL.iter().zip(&cfg.qtype_mixture) {
        if u < w {
            return *q;
        }
        u -= w;
    }
    *QType::ALL.iter().zip(&cfg.qtype_mixture).filter(|(_, w)| **w > 0.0).last().expect("positive mixture").0
}

/// Objects that have exactly one object strictly to their left in their row.
fn relational_anchors(scene: &Scene) -> Vec<usize> {
    (0..scene.objects.len()).filter(|&i| scene.left_neighbours(i).count() == 1).collect()
}

/// Draws one QA record from the fixed templates. With `qtype == None` the
/// type is sampled from the configured mixture.
pub fn generate_qa(
    scene: &Scene,
    cfg: &WorldConfig,
    question_id: &str,
    rng: &mut impl Rng,
    qtype: Option<QType>,
) -> Result<QARecord> {
    let qtype = qtype.unwrap_or_else(|| sample_qtype(cfg, rng));
    let infeasible = || Error::Infeasible { qtype: qtype.as_str().into(), scene_id: scene.scene_id.clone() };
    if scene.objects.is_empty() {
        return Err(infeasible());
    }
    let objs = &scene.objects;
    let pick = rng.random_range(0..objs.len());
    let o = &objs[pick];
    let (color, ty) = (cfg.color_name(o.color_id), cfg.type_name(o.type_id));
    let (question, full_answer, answer) = match qtype {
        QType::QueryColor => (format!("what color is the {ty}?"), format!("the {ty} is {color}."), color.to_string()),
        QType::QueryType => {
            (format!("what is the {color} object?"), format!("the {color} object is a {ty}."), ty.to_string())
        }
        QType::QueryRel => {
            let anchors = relational_anchors(scene);
            if anchors.is_empty() {
                return Err(infeasible());
            }
            let a = anchors[rng.random_range(0..anchors.len())];
            let left = scene.left_neighbours(a).next().expect("one neighbour");
            let (anchor, other) = (cfg.type_name(objs[a].type_id), cfg.type_name(objs[left].type_id));
            (format!("what is left of the {anchor}?"), format!("the {other} is left of the {anchor}."), other.to_string())
        }
        QType::QuerySide => {
            let side = o.side();
            (format!("on which side is the {ty}?"), format!("the {ty} is on the {side}."), side.to_string())
        }
        QType::Verify => {
            if rng.random::<bool>() {
                (format!("is there a {color} {ty}?"), format!("yes, there is a {color} {ty}."), YES.to_string())
            } else {
                let absent: Vec<(usize, usize)> = (0..cfg.n_colors)
                    .flat_map(|c| (0..cfg.n_object_types).map(move |t| (c, t)))
                    .filter(|&(c, t)| !objs.iter().any(|o| o.color_id == c && o.type_id == t))
                    .collect();
                if absent.is_empty() {
                    return Err(infeasible());
                }
                let (c, t) = absent[rng.random_range(0..absent.len())];
                let (color, ty) = (cfg.color_name(c), cfg.type_name(t));
                (format!("is there a {color} {ty}?"), format!("no, there is no {color} {ty}."), NO.to_string())
            }
        }
    };
    let mut human_counts = BTreeMap::new();
    if cfg.disagreement_rate > 0.0 && rng.random::<f64>() < cfg.disagreement_rate {
        let answers = cfg.answer_vocabulary();
        let others: Vec<&String> = answers.iter().filter(|a| **a != answer).collect();
        let alt = others[rng.random_range(0..others.len())].clone();
        human_counts.insert(answer.clone(), 8);
        human_counts.insert(alt, 2);
    } else {
        human_counts.insert(answer.clone(), 10);
    }
    Ok(QARecord {
        question_id: question_id.to_string(),
        scene_id: scene.scene_id.clone(),
        question,
        answer,
        full_answer,
        qtype,
        human_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

/// Scenes, their region features and QA records of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub scenes: Vec<Scene>,
    /// `regions[i]` belongs to `scenes[i]`.
    pub regions: Vec<Vec<Vec<f32>>>,
    pub records: Vec<QARecord>,
    index: BTreeMap<String, usize>,
}

impl Split {
    pub fn new(name: SplitName, scenes: Vec<Scene>, regions: Vec<Vec<Vec<f32>>>, records: Vec<QARecord>) -> Self {
        let index = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.clone(), i)).collect();
        Self { name, scenes, regions, records, index }
    }

    pub fn scene_index(&self, scene_id: &str) -> Option<usize> {
        self.index.get(scene_id).copied()
    }

    pub fn regions_of(&self, scene_id: &str) -> Option<&[Vec<f32>]> {
        self.scene_index(scene_id).map(|i| self.regions[i].as_slice())
    }

    pub fn scene(&self, scene_id: &str) -> Option<&Scene> {
        self.scene_index(scene_id).map(|i| &self.scenes[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub world: WorldConfig,
    pub answers: Vec<String>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl DatasetSplits {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

pub fn scene_id(global_index: usize) -> String {
    format!("s{global_index:06}")
}

/// Generates one scene with its regions and QA records from the global
/// scene index alone.
pub fn generate_indexed(cfg: &WorldConfig, global_index: usize) -> Result<(Scene, Vec<Vec<f32>>, Vec<QARecord>)> {
    let gi = global_index as u64;
    let id = scene_id(global_index);
    let scene = generate_scene(cfg, &id, &mut rng::stream(cfg.seed, &[tag::SCENE, gi]))?;
    let regions = encode_regions(&scene, cfg, &mut rng::stream(cfg.seed, &[tag::REGIONS, gi]))?;
    let mut qa_rng = rng::stream(cfg.seed, &[tag::QA, gi]);
    let mut records = Vec::with_capacity(cfg.questions_per_scene);
    for q in 0..cfg.questions_per_scene {
        records.push(generate_qa(&scene, cfg, &format!("{id}-q{q}"), &mut qa_rng, None)?);
    }
    Ok((scene, regions, records))
}

/// Builds train / val / test with disjoint scene ids. `sizes` count scenes.
pub fn build_dataset(cfg: &WorldConfig, sizes: SplitSizes) -> Result<DatasetSplits> {
    cfg.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let mut next = 0usize;
    let mut make = |name: SplitName, n: usize| -> Result<Split> {
        let (mut scenes, mut regions, mut records) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let (s, r, q) = generate_indexed(cfg, next)?;
            next += 1;
            scenes.push(s);
            regions.push(r);
            records.extend(q);
        }
        Ok(Split::new(name, scenes, regions, records))
    };
    let train = make(SplitName::Train, sizes.train)?;
    let val = make(SplitName::Val, sizes.val)?;
    let test = make(SplitName::Test, sizes.test)?;
    Ok(DatasetSplits { world: cfg.clone(), answers: cfg.answer_vocabulary(), train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with(objs: (usize, usize), seed: u64) -> WorldConfig {
        WorldConfig { objects_per_scene: objs, seed, ..WorldConfig::default() }
    }

    #[test]
    fn feature_dim_is_block_sum() {
        assert_eq!(WorldConfig::default().region_feat_dim(), 6 + 8 + 2 + 4);
    }

    #[test]
    fn two_object_scene_has_distinct_attributes() {
        let cfg = cfg_with((2, 2), 7);
        let s = generate_scene(&cfg, "x", &mut rng::stream(7, &[0])).unwrap();
        assert_eq!(s.objects.len(), 2);
        assert_ne!(s.objects[0].type_id, s.objects[1].type_id);
        assert_ne!(s.objects[0].color_id, s.objects[1].color_id);
        assert_ne!(s.objects[0].cell, s.objects[1].cell);
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = cfg_with((2, 4), 7);
        let a = generate_indexed(&cfg, 0).unwrap();
        let b = generate_indexed(&cfg, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = WorldConfig { n_colors: 3, objects_per_scene: (2, 4), ..WorldConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = WorldConfig { objects_per_scene: (1, 3), ..WorldConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_noise_features_are_exact() {
        let cfg = WorldConfig { noise_sigma: 0.0, ..WorldConfig::default() };
        let s = generate_scene(&cfg, "x", &mut rng::stream(1, &[])).unwrap();
        let r = encode_regions(&s, &cfg, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(r.len(), s.objects.len());
        for (o, v) in s.objects.iter().zip(&r) {
            let mut want = vec![0.0f32; cfg.region_feat_dim()];
            want[o.color_id] = 1.0;
            want[6 + o.type_id] = 1.0;
            want[14 + o.size_id] = 1.0;
            for k in 0..4 {
                want[16 + k] = o.bbox[k] as f32;
            }
            assert_eq!(v, &want);
        }
    }

    #[test]
    fn three_object_scene_gives_three_regions() {
        let cfg = cfg_with((3, 3), 1);
        let s = generate_scene(&cfg, "x", &mut rng::stream(1, &[])).unwrap();
        assert_eq!(encode_regions(&s, &cfg, &mut rng::stream(1, &[])).unwrap().len(), 3);
    }

    #[test]
    fn side_follows_center_x() {
        let cfg = WorldConfig::default();
        let scene = Scene {
            scene_id: "s".into(),
            objects: vec![ObjectSpec::new(0, 0, 0, (0, 1), cfg.grid), ObjectSpec::new(1, 1, 0, (3, 1), cfg.grid)],
        };
        // the red ball sits in x-cell 0
        let mut rng = rng::stream(0, &[]);
        for _ in 0..20 {
            let q = generate_qa(&scene, &cfg, "q", &mut rng, Some(QType::QuerySide)).unwrap();
            let want = if q.question.contains("ball") { "left" } else { "right" };
            assert_eq!(q.answer, want);
        }
    }

    #[test]
    fn verify_for_present_pair_says_yes() {
        let cfg = WorldConfig::default();
        let scene = Scene {
            scene_id: "s".into(),
            objects: vec![ObjectSpec::new(0, 0, 0, (0, 1), cfg.grid), ObjectSpec::new(1, 1, 0, (3, 1), cfg.grid)],
        };
        let mut rng = rng::stream(3, &[]);
        for _ in 0..50 {
            let q = generate_qa(&scene, &cfg, "q", &mut rng, Some(QType::Verify)).unwrap();
            let present = q.question == "is there a red ball?" || q.question == "is there a blue cube?";
            assert_eq!(q.answer == "yes", present, "{}", q.question);
        }
    }

    #[test]
    fn relational_question_needs_a_row_pair() {
        let cfg = WorldConfig::default();
        let scene = Scene {
            scene_id: "s".into(),
            objects: vec![ObjectSpec::new(0, 0, 0, (0, 0), cfg.grid), ObjectSpec::new(1, 1, 0, (3, 1), cfg.grid)],
        };
        let err = generate_qa(&scene, &cfg, "q", &mut rng::stream(0, &[]), Some(QType::QueryRel)).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
    }

    #[test]
    fn answer_vocabulary_has_eighteen_entries() {
        let c = WorldConfig::default().answer_vocabulary();
        assert_eq!(c.len(), 18);
        let mut d = c.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 18);
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = WorldConfig::default();
        let ds = build_dataset(&cfg, SplitSizes { train: 100, val: 20, test: 20 }).unwrap();
        let mut ids: Vec<&str> = SplitName::ALL
            .iter()
            .flat_map(|&s| ds.split(s).scenes.iter().map(|x| x.scene_id.as_str()))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 140);
    }

    #[test]
    fn disagreement_votes_exercise_soft_accuracy() {
        let cfg = WorldConfig { disagreement_rate: 1.0, ..WorldConfig::default() };
        let (_, _, qa) = generate_indexed(&cfg, 3).unwrap();
        for q in qa {
            assert_eq!(q.human_counts.values().sum::<u32>(), 10);
            assert_eq!(q.human_counts[&q.answer], 8);
        }
    }
}
