use std::fs;
use std::path::Path;

use dpt::checkpoint::{load_checkpoint, save_checkpoint};
use dpt::commands;
use dpt::core::encoder::{self, EncoderConfig, EncoderParams};
use dpt::core::eval::{Report, ResultRecord};
use dpt::core::harness::{self, ExperimentConfig, FewShotConfig, SupervisedConfig};
use dpt::core::dpt::FinetuneConfig;
use dpt::core::pretrain::PretrainConfig;
use dpt::core::rng;
use dpt::core::world::{build_dataset, SplitSizes, WorldConfig};
use dpt::io;
use dpt::runner::{run_experiment, RunOptions};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        sizes: SplitSizes { train: 30, val: 6, test: 6 },
        encoder: EncoderConfig { d_model: 16, d_ff: 32, n_layers: 1, n_heads: 2, ..EncoderConfig::default() },
        pretrain: PretrainConfig { steps: 4, batch_size: 4, ..PretrainConfig::default() },
        health_pairs: 20,
        k: 2,
        k_sweep: vec![0, 1, 2],
        supervised: Some(SupervisedConfig {
            seeds: vec![0],
            finetune: FinetuneConfig { epochs: 1, batch_size: 16, ..FinetuneConfig::default() },
            ..SupervisedConfig::default()
        }),
        few_shot: Some(FewShotConfig {
            shots: vec![0, 2],
            n_splits: 2,
            finetune: FinetuneConfig { epochs: 1, min_steps: 1, batch_size: 2, ..FinetuneConfig::default() },
            ..FewShotConfig::default()
        }),
        ..ExperimentConfig::default()
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn checkpoint_reload_gives_bit_identical_forward() {
    let dir = tempfile::tempdir().unwrap();
    let ws = harness::Workspace::build(&WorldConfig::default(), SplitSizes { train: 10, val: 2, test: 2 }).unwrap();
    let cfg = tiny_config().encoder_config(&ws.vocab);
    let params = EncoderParams::init(&cfg, 7).unwrap();
    let stem = dir.path().join("ck");
    save_checkpoint(&stem, &params, &ws.vocab).unwrap();
    let (back, vocab) = load_checkpoint(&stem).unwrap();
    assert_eq!(vocab, ws.vocab);
    assert_eq!(back.config, params.config);

    let s = &ws.samples(dpt::core::world::SplitName::Test)[0];
    let ids = ws.vocab.tokenize(&s.record.question);
    let batch = vec![encoder::pack_input(&ids, s.regions, &cfg).unwrap()];
    let a = encoder::forward(&params, &batch, false, &mut rng::stream(0, &[])).unwrap();
    let b = encoder::forward(&back, &batch, false, &mut rng::stream(0, &[])).unwrap();
    let bits = |m: &dpt::core::tensor::Matrix<f32>| m.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a[0].hidden), bits(&b[0].hidden));
}

#[test]
fn dataset_round_trips_and_rebuilds_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = build_dataset(&WorldConfig::default(), SplitSizes { train: 12, val: 3, test: 3 }).unwrap();
    io::write_dataset(&dir.path().join("a"), &data).unwrap();
    let back = io::read_dataset(&dir.path().join("a")).unwrap();
    assert_eq!(back, data);
    let again = build_dataset(&WorldConfig::default(), SplitSizes { train: 12, val: 3, test: 3 }).unwrap();
    io::write_dataset(&dir.path().join("b"), &again).unwrap();
    assert_eq!(read_dir_sorted(&dir.path().join("a")), read_dir_sorted(&dir.path().join("b")));
}

#[test]
fn qa_records_use_the_documented_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = build_dataset(&WorldConfig::default(), SplitSizes { train: 3, val: 1, test: 1 }).unwrap();
    io::write_dataset(dir.path(), &data).unwrap();
    let first = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["answer", "full_answer", "human_counts", "qtype", "question", "question_id", "scene_id"]);
    let answers: Vec<String> = io::read_json(&dir.path().join("answers.json")).unwrap();
    assert_eq!(answers, WorldConfig::default().answer_vocabulary());
}

#[test]
fn declaration_commands_reach_high_bleu_on_held_out_questions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = ExperimentConfig { sizes: SplitSizes { train: 200, val: 10, test: 60 }, ..ExperimentConfig::default() };
    commands::build_dataset_dir(&cfg, &d.join("data")).unwrap();
    commands::build_declarations(&d.join("data/train.jsonl"), &d.join("train_decl.jsonl")).unwrap();
    commands::fit_converter(&d.join("train_decl.jsonl"), &d.join("converter.json")).unwrap();
    commands::build_declarations(&d.join("data/test.jsonl"), &d.join("test_decl.jsonl")).unwrap();
    commands::convert_file(&d.join("converter.json"), &d.join("data/test.jsonl"), &d.join("test_conv.jsonl")).unwrap();
    let bleu = commands::bleu_files(&d.join("test_conv.jsonl"), &d.join("test_decl.jsonl")).unwrap();
    assert!(bleu >= 0.95, "{bleu}");
}

#[test]
fn run_directory_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let a = run_experiment(&cfg, &dir.path().join("a"), &RunOptions::default(), &mut |_| {}).unwrap();
    for f in ["config.json", "records.jsonl", "report.md", "report.json", "summary.json", "health.json", "pretrain_log.jsonl"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f} missing");
    }
    for f in ["accuracy_vs_shots.png", "breakdown_qtype.png", "breakdown_length.png", "k_sweep.png"] {
        let img = image::open(dir.path().join("a/plots").join(f)).unwrap();
        assert_eq!((img.width(), img.height()), (640, 360));
    }

    let stored: ExperimentConfig = io::read_json(&dir.path().join("a/config.json")).unwrap();
    assert_eq!(stored, cfg);
    run_experiment(&stored, &dir.path().join("b"), &RunOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(read_dir_sorted(&dir.path().join("a")), read_dir_sorted(&dir.path().join("b")));

    let recs: Vec<ResultRecord> = io::read_jsonl(&dir.path().join("a/records.jsonl")).unwrap();
    assert_eq!(recs, a.records);
    let rep: Report = io::read_json(&dir.path().join("a/report.json")).unwrap();
    assert_eq!(rep, a.report);
    assert_eq!(Report::from_records(&recs), rep);
}

#[test]
fn reusing_a_pretrained_checkpoint_matches_the_original_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.few_shot = None;
    let a = run_experiment(&cfg, &dir.path().join("a"), &RunOptions::default(), &mut |_| {}).unwrap();
    let opts = RunOptions { pretrained: Some(dir.path().join("a/checkpoint/pretrained")) };
    let b = run_experiment(&cfg, &dir.path().join("b"), &opts, &mut |_| {}).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn finetune_command_writes_one_prediction_per_question() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config();
    commands::build_dataset_dir(&cfg, &d.join("data")).unwrap();
    commands::pretrain(&d.join("data"), &cfg, &d.join("pre"), |_| {}).unwrap();
    assert!(d.join("pre.log.jsonl").is_file());
    let args = commands::FinetuneArgs {
        paradigm: dpt::core::dpt::Paradigm::DptMlmItm,
        shots: Some(2),
        split_index: 0,
        out: Some(&d.join("ft")),
        predictions: Some(&d.join("preds.jsonl")),
    };
    let acc = commands::finetune(&d.join("data"), &d.join("pre"), &cfg, &args).unwrap();
    let preds: Vec<commands::PredictionRecord> = io::read_jsonl(&d.join("preds.jsonl")).unwrap();
    assert_eq!(preds.len(), acc.n);
    for p in &preds {
        assert_eq!(p.p1.len(), 18);
        assert_eq!(p.p2.len(), cfg.k);
        assert!(p.fused.contains_key(&p.answer));
        assert!((p.p1.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let again = commands::eval_checkpoint(
        &d.join("data"),
        &d.join("ft"),
        dpt::core::world::SplitName::Test,
        dpt::core::dpt::Paradigm::DptMlmItm,
        &cfg,
        None,
    )
    .unwrap();
    assert!(again.n >= acc.n);
}

#[test]
fn report_command_rebuilds_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.supervised = None;
    let run = run_experiment(&cfg, &dir.path().join("run"), &RunOptions::default(), &mut |_| {}).unwrap();
    let rep = commands::report_from_records(&dir.path().join("run/records.jsonl"), &dir.path().join("rep"), "tiny").unwrap();
    assert_eq!(rep, run.report);
    assert_eq!(
        fs::read(dir.path().join("run/report.md")).unwrap(),
        fs::read(dir.path().join("rep/report.md")).unwrap()
    );
    assert!(dir.path().join("rep/plots/accuracy_vs_shots.png").is_file());
    assert!(!dir.path().join("rep/plots/k_sweep.png").exists());
}
