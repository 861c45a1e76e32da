use dpt_core::dpt::{self, fuse, top_k, InferOptions, Paradigm, Prediction};
use dpt_core::encoder::{EncoderConfig, EncoderParams};
use dpt_core::eval::{self, RecordContext};
use dpt_core::harness::Workspace;
use dpt_core::world::{SplitName, SplitSizes, WorldConfig};
use proptest::prelude::*;
use rand::Rng;

fn distribution(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

proptest! {
    #[test]
    fn fused_decision_ignores_candidate_order(
        raw in prop::collection::vec(0.01f64..1.0, 18),
        p2 in prop::collection::vec(0.0f64..1.0, 8),
        perm_seed in any::<u64>(),
    ) {
        let p1 = distribution(&raw);
        let cands = top_k(&p1, 8).unwrap();
        let cp1: Vec<f64> = cands.iter().map(|&c| p1[c]).collect();
        let (a, _) = fuse(&cands, &cp1, &p2, false).unwrap();

        let mut order: Vec<usize> = (0..8).collect();
        let mut r = dpt_core::rng::stream(perm_seed, &[]);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let pc: Vec<usize> = order.iter().map(|&i| cands[i]).collect();
        let pp1: Vec<f64> = order.iter().map(|&i| cp1[i]).collect();
        let pp2: Vec<f64> = order.iter().map(|&i| p2[i]).collect();
        prop_assert_eq!(fuse(&pc, &pp1, &pp2, false).unwrap().0, a);
    }

    #[test]
    fn one_candidate_agrees_with_p1(raw in prop::collection::vec(0.01f64..1.0, 18), p2 in 0.0f64..1.0) {
        let p1 = distribution(&raw);
        let pred = Prediction {
            answer: 0,
            p1: p1.clone(),
            candidates: top_k(&p1, 1).unwrap(),
            p2: vec![p2],
            fused: vec![],
        };
        prop_assert_eq!(pred.with_k(1, false).unwrap(), pred.with_k(0, false).unwrap());
    }

    #[test]
    fn top_k_is_a_sorted_prefix(raw in prop::collection::vec(0.0f64..1.0, 18), k in 1usize..=18) {
        let c = top_k(&raw, k).unwrap();
        prop_assert_eq!(c.len(), k);
        prop_assert!(c.windows(2).all(|w| raw[w[0]] >= raw[w[1]]));
        let full = top_k(&raw, 18).unwrap();
        prop_assert_eq!(&full[..k], &c[..]);
    }
}

#[test]
fn uniform_random_predictor_sits_at_chance() {
    let ws = Workspace::build(&WorldConfig::default(), SplitSizes { train: 2, val: 1, test: 1500 }).unwrap();
    let samples: Vec<_> = ws.samples(SplitName::Test).into_iter().filter(|s| !s.record.is_yes_no()).collect();
    let n_ans = ws.vocab.answers().len();
    let mut r = dpt_core::rng::stream(21, &[]);
    // uniform over the non-yes/no answers
    let open: Vec<usize> = (0..n_ans).filter(|&i| !["yes", "no"].contains(&ws.vocab.answers()[i].as_str())).collect();
    let answers: Vec<usize> = samples.iter().map(|_| open[r.random_range(0..open.len())]).collect();
    let ctx = RecordContext { experiment: "chance", paradigm: Paradigm::Baseline, shots: 0, split_index: 0, k: None };
    let recs = eval::records_for(&samples, &answers, &ws.vocab, &ctx).unwrap();
    let acc = eval::accuracy(&recs).exact;
    let p = 1.0 / open.len() as f64;
    let sigma = (p * (1.0 - p) / recs.len() as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc} vs chance {p} (n = {})", recs.len());
}

#[test]
fn gold_predictions_score_perfectly() {
    let ws = Workspace::build(&WorldConfig::default(), SplitSizes { train: 2, val: 1, test: 50 }).unwrap();
    let samples = ws.samples(SplitName::Test);
    let answers: Vec<usize> = samples.iter().map(|s| ws.vocab.answer_index(&s.record.answer).unwrap()).collect();
    let ctx = RecordContext { experiment: "oracle", paradigm: Paradigm::DptMlm, shots: 0, split_index: 0, k: None };
    let recs = eval::records_for(&samples, &answers, &ws.vocab, &ctx).unwrap();
    let a = eval::accuracy(&recs);
    assert_eq!((a.exact, a.soft), (1.0, 1.0));
}

#[test]
fn full_candidate_set_matches_the_exhaustive_oracle() {
    let ws = Workspace::build(&WorldConfig::default(), SplitSizes { train: 2, val: 1, test: 30 }).unwrap();
    let cfg = EncoderConfig {
        d_model: 16,
        d_ff: 32,
        n_layers: 1,
        n_heads: 2,
        ..EncoderConfig::for_vocab(&ws.vocab, ws.data.world.region_feat_dim(), ws.data.world.objects_per_scene.1)
    };
    let params = EncoderParams::init(&cfg, 2).unwrap();
    let samples = ws.samples(SplitName::Test);
    let n_ans = ws.vocab.answers().len();
    let opts = InferOptions { k: n_ans, batch_size: 7, ..InferOptions::default() };
    let preds = dpt::infer(&params, &samples, Paradigm::DptMlmItm, &opts, &ws.vocab).unwrap();
    for (p, s) in preds.iter().zip(&samples) {
        assert_eq!(p.answer, dpt::exhaustive_oracle(&params, s, &ws.vocab).unwrap());
    }
    let zs = dpt::zero_shot_init(&params, &ws.vocab).unwrap();
    let preds = dpt::infer(&zs, &samples, Paradigm::DptMlmItm, &opts, &ws.vocab).unwrap();
    for (p, s) in preds.iter().zip(&samples) {
        assert_eq!(p.answer, dpt::exhaustive_oracle(&zs, s, &ws.vocab).unwrap());
    }
}

#[test]
fn inference_does_not_depend_on_batch_size() {
    let ws = Workspace::build(&WorldConfig::default(), SplitSizes { train: 2, val: 1, test: 12 }).unwrap();
    let cfg = EncoderConfig {
        d_model: 16,
        d_ff: 32,
        n_layers: 1,
        n_heads: 2,
        ..EncoderConfig::for_vocab(&ws.vocab, ws.data.world.region_feat_dim(), ws.data.world.objects_per_scene.1)
    };
    let params = EncoderParams::init(&cfg, 4).unwrap();
    let samples = ws.samples(SplitName::Test);
    for p in Paradigm::ALL {
        let a = dpt::infer(&params, &samples, p, &InferOptions { k: 4, batch_size: 1, ..Default::default() }, &ws.vocab).unwrap();
        let b = dpt::infer(&params, &samples, p, &InferOptions { k: 4, batch_size: 64, ..Default::default() }, &ws.vocab).unwrap();
        assert_eq!(a, b, "{}", p.as_str());
    }
}
