//! Generator construction and its encode/transfer/decode compositions.

mod common;

use mdt_core::data::ImageBatch;
use mdt_core::model::*;
use mdt_core::Error;

fn images(seed: u64, n: usize, side: usize) -> ImageBatch {
    common::random_batch(&mut common::rng(seed), n, side)
}

fn small() -> ModelConfig {
    ModelConfig { base_channels: 8, ..Default::default() }
}

#[test]
fn zero_domains_is_a_config_error() {
    let cfg = ModelConfig { n_domains: 0, ..Default::default() };
    assert!(matches!(build_model::<f32>(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn build_is_deterministic_and_plans_channels() {
    let cfg = ModelConfig::default();
    assert_eq!(build_model::<f32>(&cfg, 3).unwrap(), build_model::<f32>(&cfg, 3).unwrap());
    assert_ne!(build_model::<f32>(&cfg, 3).unwrap(), build_model::<f32>(&cfg, 4).unwrap());
    assert_eq!(cfg.channel_plan(), [32, 64, 128]);
}

#[test]
fn encode_shapes_purity_and_batch_independence() {
    let m = build_model::<f32>(&small(), 1).unwrap();
    let one = images(1, 1, 64);
    let feats = m.encode(&one).unwrap();
    let dims: Vec<_> = feats.scales.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(dims, [vec![1, 8, 64, 64], vec![1, 16, 32, 32], vec![1, 32, 16, 16]]);
    assert_eq!(m.encode(&one).unwrap(), feats);
    let two = m.encode(&ImageBatch::stack(&[one.clone(), one]).unwrap()).unwrap();
    for (t, s) in two.scales.iter().zip(&feats.scales) {
        let half = t.numel() / 2;
        assert_eq!(&t.as_slice()[..half], s.as_slice());
        assert_eq!(&t.as_slice()[half..], s.as_slice());
    }
}

#[test]
fn transfer_preserves_shapes_and_rejects_unknown_domains() {
    let m = build_model::<f32>(&small(), 2).unwrap();
    let feats = m.encode(&images(2, 2, 32)).unwrap();
    let out = m.apply_transfer(&feats, 1).unwrap();
    for (a, b) in out.scales.iter().zip(&feats.scales) {
        assert_eq!(a.shape(), b.shape());
    }
    let err = m.apply_transfer(&feats, 2).unwrap_err();
    assert!(matches!(err, Error::UnknownDomain { domain: 2, available: 2 }));
    assert!(err.to_string().contains("unknown domain"));
}

#[test]
fn residual_output_is_clamped() {
    let mut m = build_model::<f32>(&small(), 3).unwrap();
    m.params_mut().get_mut("decoder.head.weight").unwrap().make_mut().fill(0.0);
    m.params_mut().get_mut("decoder.head.bias").unwrap().make_mut().fill(0.5);
    let ones = ImageBatch::from_gray(32, 32, vec![1.0; 1024]).unwrap();
    let out = m.reconstruct(&ones).unwrap();
    assert!(out.tensor().as_slice().iter().all(|&v| v == 1.0));
    let low = ImageBatch::from_gray(32, 32, vec![0.25; 1024]).unwrap();
    assert!(m.reconstruct(&low).unwrap().tensor().as_slice().iter().all(|&v| v == 0.75));
}

#[test]
fn residual_identity_with_zeroed_head() {
    common::residual_identity(6).unwrap();
}

#[test]
fn no_residual_output_depends_on_source_only_through_features() {
    let cfg = ModelConfig { residual_output: false, ..small() };
    let m = build_model::<f32>(&cfg, 4).unwrap();
    let feats = m.encode(&images(4, 2, 32)).unwrap();
    let a = m.decode(&feats, &images(5, 2, 32)).unwrap();
    let b = m.decode(&feats, &images(6, 2, 32)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn compositions_are_definitional() {
    let m = build_model::<f32>(&small(), 5).unwrap();
    let x = images(7, 2, 32);
    let feats = m.encode(&x).unwrap();
    let rec = m.reconstruct(&x).unwrap();
    assert_eq!(rec, m.decode(&feats, &x).unwrap());
    assert_eq!(rec.tensor().shape(), x.tensor().shape());
    for d in 0..2 {
        let t = m.translate(&x, d).unwrap();
        assert_eq!(t, m.decode(&m.apply_transfer(&feats, d).unwrap(), &x).unwrap());
    }
    let all = m.translate_all(&x).unwrap();
    assert_eq!(all.len(), 2);
    for (d, t) in all.iter().enumerate() {
        assert_eq!(t, &m.translate(&x, d).unwrap());
    }
}

#[test]
fn untrained_reconstruction_is_near_identity() {
    let m = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
    let x = images(8, 2, 64);
    let rec = m.reconstruct(&x).unwrap();
    let n = x.tensor().numel() as f32;
    let mean: f32 = rec.tensor().as_slice().iter().zip(x.tensor().as_slice()).map(|(a, b)| (a - b).abs()).sum::<f32>() / n;
    assert!(mean < 0.5, "{mean}");
}

#[test]
fn parameter_count_linearity() {
    common::parameter_count_linearity().unwrap();
    let cfg = ModelConfig::default();
    let c = parameter_count(&cfg);
    assert_eq!(c.total, build_model::<f32>(&cfg, 0).unwrap().num_parameters());
    let one = parameter_count(&ModelConfig { n_domains: 1, ..cfg });
    assert_eq!(c.total - one.total, c.per_domain);
}

#[test]
fn one_step_on_one_domain_changes_only_that_path() {
    common::domain_isolation(9).unwrap();
}
