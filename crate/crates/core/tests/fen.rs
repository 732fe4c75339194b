//! Feature extraction and Gram statistics.

use mdt_core::data::ImageBatch;
use mdt_core::fen::*;
use mdt_core::Error;
use mdt_tensor::Tensor;

fn image(side: usize, f: impl Fn(usize) -> f32) -> ImageBatch {
    ImageBatch::from_gray(side, side, (0..side * side).map(f).collect()).unwrap()
}

/// Explicit per-entry sum over positions.
fn gram_oracle(c: usize, p: usize, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for q in 0..p {
                s += f[i * p + q] * f[j * p + q];
            }
            out[i * c + j] = s / (c * p) as f64;
        }
    }
    out
}

#[test]
fn random_seeded_fen_is_deterministic() {
    let cfg = FenConfig::default();
    let x = image(64, |i| (i % 17) as f32 / 16.0);
    let layers = [FenLayerId::RELU1_2, FenLayerId::RELU4_1];
    let a = load_fen::<f32>(&cfg).unwrap().extract(&x, &layers).unwrap();
    let b = load_fen::<f32>(&cfg).unwrap().extract(&x, &layers).unwrap();
    assert_eq!(a, b);
    let zero = image(32, |_| 0.0);
    let fen = load_fen::<f32>(&cfg).unwrap();
    assert_eq!(fen.extract(&zero, &layers).unwrap(), fen.extract(&zero, &layers).unwrap());
}

#[test]
fn empty_layer_list_is_a_config_error() {
    let cfg = FenConfig { content_layers: vec![], ..Default::default() };
    assert!(matches!(load_fen::<f32>(&cfg), Err(Error::Config(_))));
}

#[test]
fn vgg19_weights_do_not_load_as_vgg16() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg19.mdt");
    let v19 = FenConfig { variant: FenVariant::Vgg19, ..Default::default() };
    save_fen_weights(&load_fen::<f32>(&v19).unwrap(), &path).unwrap();
    let cfg = FenConfig { weights: WeightsSource::PretrainedFile { path: path.clone() }, ..Default::default() };
    let err = load_fen::<f32>(&cfg).map(|_| ()).unwrap_err();
    assert!(err.to_string().contains("FEN manifest mismatch"), "{err}");
    let back = load_fen::<f32>(&FenConfig { weights: WeightsSource::PretrainedFile { path }, ..v19.clone() }).unwrap();
    let x = image(32, |i| (i % 5) as f32 / 4.0);
    let l = [FenLayerId::RELU3_2];
    assert_eq!(back.extract(&x, &l).unwrap(), load_fen::<f32>(&v19).unwrap().extract(&x, &l).unwrap());
}

#[test]
fn spatial_sizes_follow_the_pooling_schedule() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let x = image(64, |i| (i % 3) as f32 / 2.0);
    let maps = fen.extract(&x, &[FenLayerId::RELU4_1, FenLayerId::RELU1_2]).unwrap();
    assert_eq!(maps[0].layer, FenLayerId::RELU4_1);
    assert_eq!(maps[0].values.shape(), &[1, 512, 8, 8]);
    assert_eq!(maps[1].values.shape(), &[1, 64, 64, 64]);
}

#[test]
fn too_small_input_names_the_layer() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let x = ImageBatch::new(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
    let err = fen.extract(&x, &[FenLayerId::RELU4_1]).unwrap_err();
    assert!(err.to_string().contains("input too small for layer relu4_1"), "{err}");
}

#[test]
fn duplicated_batch_rows_give_identical_features() {
    let fen = load_fen::<f32>(&FenConfig::default()).unwrap();
    let one = image(32, |i| ((i * 7) % 11) as f32 / 10.0);
    let two = ImageBatch::stack(&[one.clone(), one]).unwrap();
    let m = &fen.extract(&two, &[FenLayerId::RELU2_2]).unwrap()[0].values;
    let half = m.numel() / 2;
    assert_eq!(m.as_slice()[..half], m.as_slice()[half..]);
}

#[test]
fn gram_examples() {
    let zero = FeatureMap { values: Tensor::<f64>::zeros(&[1, 3, 2, 2]), layer: FenLayerId::RELU1_2 };
    assert!(gram(&zero).unwrap().values.as_slice().iter().all(|&v| v == 0.0));

    let c = 1.7f64;
    let constant = FeatureMap { values: Tensor::full(&[1, 1, 2, 2], c), layer: FenLayerId::RELU1_2 };
    assert!((gram(&constant).unwrap().values.item() - c * c).abs() < 1e-12);

    let f = vec![1.0, 2.0, 3.0, 4.0];
    let map = FeatureMap { values: Tensor::from_vec(&[1, 2, 1, 2], f.clone()).unwrap(), layer: FenLayerId::RELU1_2 };
    let got = gram(&map).unwrap();
    assert_eq!(got.values.shape(), &[1, 2, 2]);
    assert_eq!(gram_oracle(2, 2, &f), [1.25, 2.75, 2.75, 6.25]);
    assert_eq!(got.values.as_slice(), gram_oracle(2, 2, &f).as_slice());
}

#[test]
fn gram_matches_the_loop_oracle_per_batch_element() {
    let (n, c, p) = (3, 5, 12);
    let data: Vec<f64> = (0..n * c * p).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
    let map = FeatureMap { values: Tensor::from_vec(&[n, c, 3, 4], data.clone()).unwrap(), layer: FenLayerId::RELU1_2 };
    let got = gram(&map).unwrap().values;
    for b in 0..n {
        let want = gram_oracle(c, p, &data[b * c * p..(b + 1) * c * p]);
        for (x, y) in got.as_slice()[b * c * c..(b + 1) * c * c].iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
