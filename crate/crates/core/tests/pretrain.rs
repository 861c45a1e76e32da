use dpt_core::harness::build_vocabulary;
use dpt_core::pretrain::{itm_sample, mask_tokens, PretrainConfig};
use dpt_core::rng;
use dpt_core::vocab::{self, Vocabulary};
use dpt_core::world::WorldConfig;

#[test]
fn masking_rates_match_the_configuration() {
    let v = build_vocabulary(&WorldConfig::default()).unwrap();
    let cfg = PretrainConfig::default();
    let ids = v.tokenize("the red cube is left of the blue ball .");
    let mut r = rng::stream(3, &[]);
    let (mut picked, mut masked, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..20_000 {
        let (out, labels) = mask_tokens(&ids, v.len(), &cfg, &mut r);
        for ((o, l), id) in out.iter().zip(&labels).zip(&ids) {
            total += 1;
            if let Some(l) = l {
                assert_eq!(l, id);
                picked += 1;
                if *o == vocab::MASK {
                    masked += 1;
                } else if o == id {
                    kept += 1;
                }
            } else {
                assert_eq!(o, id);
            }
        }
    }
    let rate = picked as f64 / total as f64;
    assert!((rate - 0.15).abs() < 0.01, "{rate}");
    let m = masked as f64 / picked as f64;
    assert!((m - 0.8).abs() < 0.01, "{m}");
    // random replacements that happen to draw the original token count as kept
    let k = kept as f64 / picked as f64;
    assert!((k - 0.1).abs() < 0.015, "{k}");
}

#[test]
fn specials_are_never_masked() {
    let v = build_vocabulary(&WorldConfig::default()).unwrap();
    let cfg = PretrainConfig { mask_prob: 1.0, ..PretrainConfig::default() };
    let ids = [vocab::CLS, vocab::SEP, vocab::PAD, vocab::MASK];
    let mut r = rng::stream(3, &[]);
    for _ in 0..100 {
        let (out, labels) = mask_tokens(&ids, v.len(), &cfg, &mut r);
        assert_eq!(out, ids);
        assert!(labels.iter().all(Option::is_none));
    }
    assert!(ids.iter().all(|&i| !Vocabulary::is_maskable(i)));
}

#[test]
fn itm_labels_are_balanced_and_negatives_mismatch() {
    let cfg = PretrainConfig::default();
    let mut r = rng::stream(4, &[]);
    let n = 20_000;
    let mut pos = 0usize;
    for _ in 0..n {
        let s = itm_sample(50, &mut r, &cfg).unwrap();
        if s.label == 1 {
            pos += 1;
            assert_eq!(s.caption, s.regions);
        } else {
            assert_ne!(s.caption, s.regions);
        }
    }
    let mean = pos as f64 / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
    assert!(itm_sample(1, &mut r, &cfg).is_err());
}
