//! Content, domain and combined losses.

mod common;

use std::collections::BTreeMap;

use mdt_core::data::ImageBatch;
use mdt_core::fen::{load_fen, FeatureExtractor, FenConfig, FenLayerId};
use mdt_core::loss::*;
use mdt_core::model::{build_model, ModelConfig};
use mdt_core::train::{training_step, LossLayers, TrainConfig, TrainState};
use mdt_tensor::{Graph, Var};

/// Returns the image itself at every requested site.
struct Passthrough;

impl FeatureExtractor<f64> for Passthrough {
    fn features(&self, _: &Graph<f64>, images: Var, layers: &[FenLayerId]) -> mdt_core::Result<Vec<Var>> {
        Ok(vec![images; layers.len()])
    }
}

const ONE: [FenLayerId; 1] = [FenLayerId::RELU1_2];

fn batch(seed: u64, n: usize, side: usize) -> ImageBatch {
    common::random_batch(&mut common::rng(seed), n, side)
}

fn outputs(seed: u64) -> ModelOutputs {
    ModelOutputs {
        source: batch(seed, 2, 32),
        reconstruction: batch(seed + 1, 2, 32),
        transfers: vec![
            TransferPair { domain: 1, target: batch(seed + 2, 2, 32), translated: batch(seed + 3, 2, 32) },
            TransferPair { domain: 2, target: batch(seed + 4, 2, 32), translated: batch(seed + 5, 2, 32) },
        ],
    }
}

#[test]
fn content_loss_examples() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let (i, j) = (batch(1, 2, 32), batch(2, 2, 32));
    let l = [FenLayerId::RELU4_1];
    assert_eq!(content_loss(&fen, &i, &i, &l).unwrap(), 0.0);
    assert_eq!(content_loss(&fen, &i, &j, &l).unwrap(), content_loss(&fen, &j, &i, &l).unwrap());
    let two = ImageBatch::from_gray(4, 4, vec![0.25; 16]).unwrap();
    let five = ImageBatch::from_gray(4, 4, vec![0.5; 16]).unwrap();
    let got = content_loss(&Passthrough, &two, &five, &ONE).unwrap();
    assert_eq!(got, 0.0625);
    assert!(content_loss(&fen, &i, &batch(3, 1, 32), &l).is_err());
}

#[test]
fn domain_loss_examples() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let x = batch(4, 2, 32);
    assert_eq!(domain_loss(&fen, &x, &x, &FenConfig::default().domain_layers).unwrap(), 0.0);
    let c1 = ImageBatch::from_gray(4, 4, vec![0.25; 16]).unwrap();
    let c3 = ImageBatch::from_gray(4, 4, vec![0.75; 16]).unwrap();
    let got = domain_loss(&Passthrough, &c1, &c3, &ONE).unwrap();
    let want = (0.5625f64 - 0.0625).powi(2);
    assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn domain_loss_ignores_spatial_permutations() {
    let a = batch(5, 1, 32);
    let b = batch(6, 1, 32);
    let mut shuffled = a.tensor().as_slice().to_vec();
    shuffled.reverse();
    shuffled.rotate_left(37);
    let p = ImageBatch::from_gray(32, 32, shuffled).unwrap();
    let base = domain_loss(&Passthrough, &a, &b, &ONE).unwrap();
    let perm = domain_loss(&Passthrough, &p, &b, &ONE).unwrap();
    assert!((base - perm).abs() <= 1e-6 * base.max(1e-12), "{base} vs {perm}");
    let other = domain_loss(&Passthrough, &a, &ImageBatch::from_gray(32, 32, b.tensor().as_slice().iter().rev().copied().collect()).unwrap(), &ONE).unwrap();
    assert!((base - other).abs() <= 1e-6 * base.max(1e-12));
}

#[test]
fn total_is_affine_in_each_alpha() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let cfg = FenConfig::default();
    let out = outputs(10);
    let at = |a1: f64, a2: f64| {
        let w = LossWeights { alpha: BTreeMap::from([(1, a1), (2, a2)]), ..Default::default() };
        total_loss(&fen, &out, &w, &cfg.content_layers, &cfg.domain_layers).unwrap()
    };
    let base = at(1.0, 1.0);
    let slope1 = at(2.0, 1.0).total - base.total;
    let slope2 = at(1.0, 2.0).total - base.total;
    let d = &base.domain_per_target;
    assert!((slope1 - d[&1]).abs() <= 1e-6 * base.total, "{slope1} vs {}", d[&1]);
    assert!((slope2 - d[&2]).abs() <= 1e-6 * base.total, "{slope2} vs {}", d[&2]);
    let sum = base.content + d[&1] + d[&2];
    assert!((base.total - sum).abs() <= 1e-6 * sum);
}

#[test]
fn zero_targets_leave_only_content() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let cfg = FenConfig::default();
    let out = ModelOutputs { transfers: vec![], ..outputs(20) };
    let r = total_loss(&fen, &out, &LossWeights::default(), &cfg.content_layers, &cfg.domain_layers).unwrap();
    assert!(r.domain_per_target.is_empty());
    assert_eq!(r.total, r.content);
    assert!(r.content > 0.0);
}

#[test]
fn optional_transfer_content_term() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let cfg = FenConfig::default();
    let out = outputs(30);
    let w = LossWeights { lambda_content_on_transfer: 0.5, ..Default::default() };
    let r = total_loss(&fen, &out, &w, &cfg.content_layers, &cfg.domain_layers).unwrap();
    let direct: f64 = out.transfers.iter().map(|p| content_loss(&fen, &out.source, &p.translated, &cfg.content_layers).unwrap()).sum();
    assert!((r.transfer_content - direct).abs() <= 1e-5 * direct);
    let want = r.content + r.weighted_domain(&w) + 0.5 * direct;
    assert!((r.total - want).abs() <= 1e-5 * want);
}

#[test]
fn nonnegative_and_zero_at_identity() {
    common::loss_nonnegativity_and_identity(3, 40).unwrap();
}

#[test]
fn first_step_reports_the_untrained_objective() {
    let fen_cfg = FenConfig::default();
    let fen = load_fen::<f32>(&fen_cfg).unwrap();
    let model = build_model::<f32>(&ModelConfig { base_channels: 8, ..Default::default() }, 1).unwrap();
    let source = batch(50, 2, 32);
    let targets = BTreeMap::from([(1, batch(51, 2, 32)), (2, batch(52, 2, 32))]);
    let cfg = TrainConfig { target_domains: vec![1, 2], ..Default::default() };
    let direct = total_loss(
        &fen,
        &ModelOutputs {
            source: source.clone(),
            reconstruction: model.reconstruct(&source).unwrap(),
            transfers: (0..2)
                .map(|s| TransferPair { domain: s + 1, target: targets[&(s + 1)].clone(), translated: model.translate(&source, s).unwrap() })
                .collect(),
        },
        &cfg.weights,
        &fen_cfg.content_layers,
        &fen_cfg.domain_layers,
    )
    .unwrap();
    let mut a = TrainState::new(model.clone());
    let mut b = TrainState::new(model);
    let ra = training_step(&mut a, &fen, LossLayers::of(&fen_cfg), &source, &targets, &cfg).unwrap();
    let rb = training_step(&mut b, &fen, LossLayers::of(&fen_cfg), &source, &targets, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert!((ra.total - direct.total).abs() <= 1e-5 * direct.total, "{} vs {}", ra.total, direct.total);
    let missing = BTreeMap::from([(1, batch(51, 2, 32))]);
    assert!(matches!(
        training_step(&mut a, &fen, LossLayers::of(&fen_cfg), &source, &missing, &cfg),
        Err(mdt_core::Error::Config(_))
    ));
}
