//! Schedule, balancing, checkpoints and the training loop.

use std::collections::BTreeMap;
use std::path::Path;

use mdt_core::data::{scan_dataset, synthesize_corpus, DomainDataset, DomainStyle};
use mdt_core::fen::FenConfig;
use mdt_core::model::ModelConfig;
use mdt_core::train::*;
use mdt_core::Error;

fn corpus(root: &Path) -> Vec<DomainDataset> {
    synthesize_corpus(root, &DomainStyle::default_set(), 6, (32, 32), 3).unwrap();
    scan_dataset(root).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig { base_channels: 4, scales: 2, transfer_depth: 1, transfer_growth: 4, ..Default::default() }
}

fn cfg(total_iters: usize) -> TrainConfig {
    TrainConfig { target_domains: vec![1, 2], total_iters, batch: 2, checkpoint_every: 0, seed: 5, ..Default::default() }
}

fn run(out: Option<&Path>, resume: Option<&Path>) -> TrainRun {
    TrainRun { image_size: (32, 32), out_dir: out.map(Path::to_path_buf), resume: resume.map(Path::to_path_buf), ..Default::default() }
}

#[test]
fn learning_rate_steps_down_in_the_middle() {
    let c = TrainConfig { total_iters: 3000, ..Default::default() };
    assert_eq!(lr_at(0, &c), 1e-3);
    assert_eq!(lr_at(1499, &c), 1e-3);
    assert!((lr_at(1500, &c) - 1e-4).abs() < 1e-18);
    assert!((lr_at(2999, &c) - 1e-4).abs() < 1e-18);
}

#[test]
fn epoch_balancing() {
    let sizes: BTreeMap<String, usize> = [("C", 2500), ("S", 1000), ("T", 2000)].map(|(k, v)| (k.to_string(), v)).into();
    let epochs = epochs_for_budget(&sizes, 80000).unwrap();
    assert_eq!(epochs.values().copied().collect::<Vec<_>>(), [32, 80, 40]);
    let iters = balance_iterations(&sizes, &epochs, 4).unwrap();
    assert_eq!(iters.values().copied().collect::<Vec<_>>(), [20000, 20000, 20000]);
    let equal: BTreeMap<String, usize> = [("a", 500), ("b", 500)].map(|(k, v)| (k.to_string(), v)).into();
    let e = epochs_for_budget(&equal, 1234).unwrap();
    assert_eq!(e["a"], e["b"]);
    let one: BTreeMap<String, usize> = [("x".to_string(), 300)].into();
    assert_eq!(epochs_for_budget(&one, 1000).unwrap()["x"], 3);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { total_iters: 0, ..cfg(1) },
        TrainConfig { decay_at: 1.0, ..cfg(1) },
        TrainConfig { target_domains: vec![], ..cfg(1) },
        TrainConfig { target_domains: vec![1, 1], ..cfg(1) },
        TrainConfig { target_domains: vec![0, 1], ..cfg(1) },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn single_iteration_writes_one_report_and_a_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ds = corpus(data.path());
    let (state, log) = train(&cfg(1), &ds, &tiny(), &FenConfig::default(), &run(Some(out.path()), None)).unwrap();
    assert_eq!(log.reports.len(), 1);
    assert_eq!(state.iteration, 1);
    let ck = log.final_checkpoint.unwrap();
    assert_eq!(ck, out.path().join("final.ckpt"));
    let lines = std::fs::read_to_string(out.path().join("train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(lines.trim()).unwrap();
    for key in ["iter", "content", "domain", "total", "lr"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ds = corpus(data.path());
    let (state, log) = train(&cfg(3), &ds, &tiny(), &FenConfig::default(), &run(Some(out.path()), None)).unwrap();
    let ck = load_checkpoint(&log.final_checkpoint.unwrap(), false).unwrap();
    assert_eq!(ck.state, state);
    assert_eq!(ck.meta.param_hash, param_hash(&state.model));
    assert_eq!((ck.meta.source.as_str(), ck.meta.targets.clone()), ("domain_00", vec!["domain_01".to_string(), "domain_02".into()]));
}

#[test]
fn tampered_config_hash_is_refused_without_override() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ds = corpus(data.path());
    let (state, log) = train(&cfg(1), &ds, &tiny(), &FenConfig::default(), &run(Some(out.path()), None)).unwrap();
    let mut meta = load_checkpoint(&log.final_checkpoint.unwrap(), false).unwrap().meta;
    meta.config_hash = "0".repeat(64);
    let p = out.path().join("tampered.ckpt");
    save_checkpoint(&p, &state, &meta).unwrap();
    assert!(matches!(load_checkpoint(&p, false), Err(Error::ConfigHashMismatch { .. })));
    assert_eq!(load_checkpoint(&p, true).unwrap().state, state);
}

#[test]
fn training_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let ds = corpus(data.path());
    let (a, la) = train(&cfg(4), &ds, &tiny(), &FenConfig::default(), &run(None, None)).unwrap();
    let (b, lb) = train(&cfg(4), &ds, &tiny(), &FenConfig::default(), &run(None, None)).unwrap();
    assert_eq!(param_hash(&a.model), param_hash(&b.model));
    assert_eq!(la.totals(), lb.totals());
    assert!(la.reports.windows(2).all(|w| w[0].0 < w[1].0));
    let (c, _) = train(&TrainConfig { seed: 6, ..cfg(4) }, &ds, &tiny(), &FenConfig::default(), &run(None, None)).unwrap();
    assert_ne!(param_hash(&a.model), param_hash(&c.model));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ds = corpus(data.path());
    let c = TrainConfig { checkpoint_every: 3, ..cfg(6) };
    let (full, _) = train(&c, &ds, &tiny(), &FenConfig::default(), &run(Some(out.path()), None)).unwrap();
    let mid = out.path().join("iter_000003.ckpt");
    let resumed_dir = tempfile::tempdir().unwrap();
    let (resumed, log) = train(&c, &ds, &tiny(), &FenConfig::default(), &run(Some(resumed_dir.path()), Some(&mid))).unwrap();
    assert_eq!(log.reports.first().map(|r| r.0), Some(3));
    for (name, t) in full.model.params() {
        let r = resumed.model.param(name).unwrap();
        for (a, b) in t.as_slice().iter().zip(r.as_slice()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-12), "{name}: {a} vs {b}");
        }
    }
    let other = TrainConfig { base_lr: 2e-3, ..c };
    let err = train(&other, &ds, &tiny(), &FenConfig::default(), &run(None, Some(&mid))).unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }));
}

#[test]
fn model_and_target_counts_must_agree() {
    let data = tempfile::tempdir().unwrap();
    let ds = corpus(data.path());
    let m = ModelConfig { n_domains: 3, ..tiny() };
    assert!(matches!(train(&cfg(1), &ds, &m, &FenConfig::default(), &run(None, None)), Err(Error::Config(_))));
}
