use dpt_core::rng;
use dpt_core::world::*;

/// Answers a templated question from the scene alone.
fn interpret(scene: &Scene, cfg: &WorldConfig, question: &str) -> (String, String) {
    let find_type = |name: &str| scene.objects.iter().find(|o| cfg.type_name(o.type_id) == name);
    let words: Vec<&str> = question.trim_end_matches('?').split(' ').collect();
    match words.as_slice() {
        ["what", "color", "is", "the", ty] => {
            let c = cfg.color_name(find_type(ty).expect("object exists").color_id);
            (c.to_string(), format!("the {ty} is {c}."))
        }
        ["what", "is", "the", color, "object"] => {
            let o = scene.objects.iter().find(|o| cfg.color_name(o.color_id) == *color).expect("object exists");
            let t = cfg.type_name(o.type_id);
            (t.to_string(), format!("the {color} object is a {t}."))
        }
        ["what", "is", "left", "of", "the", anchor] => {
            let a = find_type(anchor).expect("anchor exists");
            let left: Vec<_> = scene.objects.iter().filter(|o| o.cell.1 == a.cell.1 && o.cell.0 < a.cell.0).collect();
            assert_eq!(left.len(), 1, "{question} must have exactly one answer");
            let t = cfg.type_name(left[0].type_id);
            (t.to_string(), format!("the {t} is left of the {anchor}."))
        }
        ["on", "which", "side", "is", "the", ty] => {
            let o = find_type(ty).expect("object exists");
            let side = if 2 * o.cell.0 + 1 < cfg.grid.0 { "left" } else { "right" };
            (side.to_string(), format!("the {ty} is on the {side}."))
        }
        ["is", "there", "a", color, ty] => {
            if scene.objects.iter().any(|o| cfg.color_name(o.color_id) == *color && cfg.type_name(o.type_id) == *ty) {
                ("yes".into(), format!("yes, there is a {color} {ty}."))
            } else {
                ("no".into(), format!("no, there is no {color} {ty}."))
            }
        }
        _ => panic!("unknown template: {question}"),
    }
}

#[test]
fn every_answer_matches_a_brute_force_interpreter() {
    let cfg = WorldConfig::default();
    let data = build_dataset(&cfg, SplitSizes { train: 400, val: 50, test: 50 }).unwrap();
    for split in [&data.train, &data.val, &data.test] {
        for r in &split.records {
            let scene = &split.scenes[split.scene_index(&r.scene_id).unwrap()];
            let (answer, full) = interpret(scene, &cfg, &r.question);
            assert_eq!(r.answer, answer, "{}", r.question);
            assert_eq!(r.full_answer, full);
        }
    }
}

#[test]
fn qtype_frequencies_follow_the_mixture() {
    let cfg = WorldConfig::default();
    let mut r = rng::stream(11, &[]);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for i in 0..n {
        let scene = generate_scene(&cfg, &format!("s{i}"), &mut r).unwrap();
        let q = generate_qa(&scene, &cfg, "q", &mut r, None).unwrap();
        counts[q.qtype.index()] += 1;
    }
    let total: f64 = cfg.qtype_mixture.iter().sum();
    for (c, w) in counts.iter().zip(cfg.qtype_mixture) {
        let f = *c as f64 / n as f64;
        assert!((f - w / total).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn noisy_region_features_decode_to_their_objects() {
    let cfg = WorldConfig::default();
    let mut r = rng::stream(5, &[]);
    for i in 0..1000 {
        let scene = generate_scene(&cfg, &format!("s{i}"), &mut r).unwrap();
        let feats = encode_regions(&scene, &cfg, &mut r).unwrap();
        assert_eq!(feats.len(), scene.objects.len());
        for (o, f) in scene.objects.iter().zip(&feats) {
            assert_eq!(f.len(), cfg.region_feat_dim());
            assert_eq!(decode_region(f, &cfg), (o.color_id, o.type_id, o.size_id));
        }
    }
}

#[test]
fn every_scene_admits_a_relational_question() {
    let cfg = WorldConfig::default();
    let mut r = rng::stream(9, &[]);
    for i in 0..2000 {
        let scene = generate_scene(&cfg, &format!("s{i}"), &mut r).unwrap();
        let q = generate_qa(&scene, &cfg, "q", &mut r, Some(QType::QueryRel)).unwrap();
        assert_eq!(q.qtype, QType::QueryRel);
    }
}

#[test]
fn other_seeds_give_other_worlds() {
    let sizes = SplitSizes { train: 20, val: 2, test: 2 };
    let a = build_dataset(&WorldConfig::default(), sizes).unwrap();
    let b = build_dataset(&WorldConfig { seed: 1, ..WorldConfig::default() }, sizes).unwrap();
    assert_ne!(a.train.records, b.train.records);
    assert_eq!(a, build_dataset(&WorldConfig::default(), sizes).unwrap());
}
