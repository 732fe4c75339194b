//! Checks shared by the property tests and the acceptance suite. Each
//! returns `Ok(summary)` or `Err(first violation)`.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mdt_core::data::ImageBatch;
use mdt_core::fen::{load_fen, FenConfig, FenLayerId};
use mdt_core::loss::LossWeights;
use mdt_core::metrics::{frechet_distance, EmbeddingSet};
use mdt_core::model::{build_model, parameter_count, Generator, ModelConfig};
use mdt_core::train::{objective, Adam, LossLayers, Reference, StepInputs, StepTarget};
use mdt_tensor::{Graph, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

pub fn uniform_images(r: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor<f64> {
    Tensor::from_vec(&[n, 1, side, side], (0..n * side * side).map(|_| r.random_range(0.2..0.8)).collect()).unwrap()
}

pub fn random_batch(r: &mut ChaCha8Rng, n: usize, side: usize) -> ImageBatch {
    let data = (0..n * side * side).map(|_| r.random_range(0.0f32..1.0)).collect();
    ImageBatch::new(Tensor::from_vec(&[n, 1, side, side], data).unwrap()).unwrap()
}

fn gram_of(t: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let x = g.constant(t.clone());
    let m = g.gram(x).unwrap();
    g.value(m)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Symmetry, PSD, scale and spatial-permutation laws of the Gram matrix on
/// `trials` random feature maps each.
pub fn gram_laws(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for trial in 0..trials {
        let (c, h, w) = (r.random_range(1..7), r.random_range(1..6), r.random_range(1..6));
        let f = normal_tensor(&mut r, &[1, c, h, w]);
        let gm = gram_of(&f);
        let m = DMatrix::from_row_slice(c, c, gm.as_slice());
        let scale = max_abs(gm.as_slice());
        let asym = max_abs((&m - m.transpose()).as_slice());
        if asym > 1e-6 * scale {
            return Err(format!("trial {trial}: asymmetry {asym:e} vs scale {scale:e}"));
        }
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        if lo < -1e-6 * hi.max(0.0) {
            return Err(format!("trial {trial}: eigenvalue {lo:e} with largest {hi:e}"));
        }
        let alpha: f64 = r.random_range(-3.0..3.0);
        let scaled = gram_of(&f.map(|v| v * alpha));
        for (a, b) in scaled.as_slice().iter().zip(gm.as_slice()) {
            let want = alpha * alpha * b;
            if (a - want).abs() > 1e-5 * want.abs().max(scale * alpha * alpha).max(f64::MIN_POSITIVE) {
                return Err(format!("trial {trial}: scale law {a} vs {want}"));
            }
        }
        let p = h * w;
        let mut perm: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let src = f.as_slice();
        let shuffled: Vec<f64> = (0..c).flat_map(|ch| perm.iter().map(move |&q| src[ch * p + q])).collect();
        let pg = gram_of(&Tensor::from_vec(&[1, c, h, w], shuffled).unwrap());
        let diff = max_abs(&pg.as_slice().iter().zip(gm.as_slice()).map(|(a, b)| a - b).collect::<Vec<_>>());
        if diff > 1e-12 * scale.max(1.0) {
            return Err(format!("trial {trial}: permutation changed the Gram by {diff:e}"));
        }
    }
    Ok(format!("{trials} trials of each law"))
}

/// Every loss component is non-negative and the total vanishes when each
/// output equals its reference.
pub fn loss_nonnegativity_and_identity(trials: usize, seed: u64) -> Check {
    let fen_cfg = FenConfig::default();
    let fen = load_fen::<f64>(&fen_cfg).unwrap();
    let layers = LossLayers::of(&fen_cfg);
    let cfg = ModelConfig { base_channels: 4, scales: 2, ..Default::default() };
    let mut r = rng(seed);
    for trial in 0..trials {
        let model = build_model::<f64>(&cfg, trial as u64).unwrap();
        let targets = (0..2)
            .map(|slot| StepTarget { domain: slot + 1, slot, reference: Reference::Images(uniform_images(&mut r, 2, 16)) })
            .collect();
        let inputs = StepInputs { source: uniform_images(&mut r, 2, 16), source_features: None, targets };
        let (rep, _) = objective(&model, &fen, &inputs, &LossWeights::default(), layers, false).map_err(|e| e.to_string())?;
        let parts: Vec<f64> = std::iter::once(rep.content).chain(rep.domain_per_target.values().copied()).collect();
        if parts.iter().any(|&v| v < 0.0) || rep.total < 0.0 {
            return Err(format!("trial {trial}: negative component in {rep:?}"));
        }
    }
    let fen32 = load_fen::<f32>(&fen_cfg).unwrap();
    for trial in 0..trials {
        let i = random_batch(&mut r, 2, 32);
        let x = random_batch(&mut r, 2, 32);
        let outputs = mdt_core::loss::ModelOutputs {
            source: i.clone(),
            reconstruction: i.clone(),
            transfers: vec![mdt_core::loss::TransferPair { domain: 1, target: x.clone(), translated: x.clone() }],
        };
        let rep = mdt_core::loss::total_loss(&fen32, &outputs, &LossWeights::default(), &fen_cfg.content_layers, &fen_cfg.domain_layers)
            .map_err(|e| e.to_string())?;
        if rep.total != 0.0 {
            return Err(format!("trial {trial}: total at identity is {}", rep.total));
        }
    }
    Ok(format!("{trials} random objectives non-negative, {trials} identities exactly zero"))
}

fn embedding_set(r: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, id: &str) -> EmbeddingSet {
    let scale: f64 = r.random_range(0.5..2.0);
    let data: Vec<f64> = (0..n * d).map(|_| shift + scale * Distribution::<f64>::sample(&StandardNormal, r)).collect();
    EmbeddingSet { vectors: DMatrix::from_row_slice(n, d, &data), embedder_id: id.into() }
}

/// Non-negativity, symmetry and identity of the Fréchet distance.
pub fn frechet_pseudometric(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for trial in 0..trials {
        let d = r.random_range(1..6);
        let (na, nb) = (r.random_range(d + 1..40), r.random_range(d + 1..40));
        let a = embedding_set(&mut r, na, d, 0.0, "e");
        let shift = r.random_range(-2.0..2.0);
        let b = embedding_set(&mut r, nb, d, shift, "e");
        let ab = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        let ba = frechet_distance(&b, &a).map_err(|e| e.to_string())?;
        let aa = frechet_distance(&a, &a).map_err(|e| e.to_string())?;
        if ab < 0.0 || (ab - ba).abs() > 1e-8 * ab.abs().max(1.0) || aa.abs() >= 1e-6 {
            return Err(format!("trial {trial}: fd(a,b) {ab}, fd(b,a) {ba}, fd(a,a) {aa}"));
        }
    }
    Ok(format!("{trials} trials"))
}

/// Zeroing the decoder head turns reconstruction into the exact identity.
pub fn residual_identity(seed: u64) -> Check {
    let mut model = build_model::<f32>(&ModelConfig::default(), seed).unwrap();
    for name in ["decoder.head.weight", "decoder.head.bias"] {
        let t = model.params_mut().get_mut(name).unwrap();
        t.make_mut().fill(0.0);
    }
    let images = random_batch(&mut rng(seed), 3, 32);
    let out = model.reconstruct(&images).map_err(|e| e.to_string())?;
    if out.tensor().as_slice().iter().zip(images.tensor().as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("reconstruction differs from the input".into());
    }
    Ok("3 images reproduced bit for bit".into())
}

fn transfer_params(model: &Generator<f32>, d: usize) -> BTreeMap<String, Vec<u32>> {
    model
        .transfer_param_names(d)
        .into_iter()
        .map(|n| {
            let bits = model.param(&n).unwrap().as_slice().iter().map(|v| v.to_bits()).collect();
            (n, bits)
        })
        .collect()
}

/// An Adam step on a loss touching only one domain leaves every other
/// domain's transfer module bitwise unchanged.
pub fn domain_isolation(seed: u64) -> Check {
    let fen_cfg = FenConfig::default();
    let fen = load_fen::<f32>(&fen_cfg).unwrap();
    let layers = LossLayers::of(&fen_cfg);
    let cfg = ModelConfig { n_domains: 3, ..Default::default() };
    let mut r = rng(seed);
    for active in 0..cfg.n_domains {
        let mut model = build_model::<f32>(&cfg, seed).unwrap();
        let before: Vec<_> = (0..cfg.n_domains).map(|d| transfer_params(&model, d)).collect();
        let target = random_batch(&mut r, 2, 32).tensor().clone();
        let inputs = StepInputs {
            source: random_batch(&mut r, 2, 32).tensor().clone(),
            source_features: None,
            targets: vec![StepTarget { domain: active, slot: active, reference: Reference::Images(target) }],
        };
        let (_, grads) = objective(&model, &fen, &inputs, &LossWeights::default(), layers, true).map_err(|e| e.to_string())?;
        let mut adam = Adam::default();
        adam.update(model.params_mut(), grads, 1e-3).map_err(|e| e.to_string())?;
        for d in 0..cfg.n_domains {
            let after = transfer_params(&model, d);
            if d == active && after == before[d] {
                return Err(format!("the step on domain {active} left its own module unchanged"));
            }
            if d != active && after != before[d] {
                return Err(format!("the step on domain {active} changed module {d}"));
            }
        }
    }
    Ok("3 single-domain steps, other modules bitwise unchanged".into())
}

/// `total(n) − total(1) == (n − 1) · per_domain` for n in 1..=5.
pub fn parameter_count_linearity() -> Check {
    for variant in [mdt_core::model::TransferVariant::Dense, mdt_core::model::TransferVariant::SingleConv] {
        let base = ModelConfig { n_domains: 1, transfer_variant: variant, ..Default::default() };
        let one = parameter_count(&base);
        if one.per_domain == 0 {
            return Err(format!("{variant:?}: per_domain is 0"));
        }
        for n in 1..=5 {
            let c = parameter_count(&ModelConfig { n_domains: n, ..base.clone() });
            if c.per_domain != one.per_domain || c.total - one.total != (n - 1) * one.per_domain || c.total != c.shared + n * c.per_domain {
                return Err(format!("{variant:?} n={n}: {c:?} vs n=1 {one:?}"));
            }
        }
    }
    Ok("dense and single-conv, n = 1..5".into())
}

/// Parameters grouped by module: the encoder, the decoder and each
/// domain's transfer module.
fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        Some("transfer") => format!("transfer.{}", parts.next().unwrap_or("")),
        Some(head) => head.to_string(),
        None => String::new(),
    }
}

pub struct GradCheck {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

/// Analytic gradient of the full objective against central differences
/// with step `h` on `per_group` sampled coordinates of each module group.
pub fn gradient_check(model_cfg: &ModelConfig, side: usize, h: f64, per_group: usize, seed: u64) -> GradCheck {
    let fen_cfg = FenConfig::default();
    let fen = load_fen::<f64>(&fen_cfg).unwrap();
    let layers = LossLayers::of(&fen_cfg);
    let weights = LossWeights::default();
    let mut r = rng(seed);
    let source = uniform_images(&mut r, 1, side);
    let targets = (0..model_cfg.n_domains)
        .map(|slot| StepTarget { domain: slot + 1, slot, reference: Reference::Images(uniform_images(&mut r, 1, side)) })
        .collect();
    let inputs = StepInputs { source, source_features: None, targets };
    let mut model = build_model::<f64>(model_cfg, seed).unwrap();
    let (_, grads) = objective(&model, &fen, &inputs, &weights, layers, true).unwrap();
    let mut groups: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for (name, t) in model.params() {
        groups.entry(group_of(name)).or_default().extend((0..t.numel()).map(|i| (name.clone(), i)));
    }
    let mut out = GradCheck { worst: 0.0, at: String::new(), checked: 0 };
    for coords in groups.values() {
        for _ in 0..per_group.min(coords.len()) {
            let (name, i) = &coords[r.random_range(0..coords.len())];
            let analytic = grads.get(name).map_or(0.0, |g| g.as_slice()[*i]);
            let orig = model.param(name).unwrap().as_slice()[*i];
            let mut eval = |v: f64| {
                model.params_mut().get_mut(name).unwrap().make_mut()[*i] = v;
                objective(&model, &fen, &inputs, &weights, layers, false).unwrap().0.total
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > out.worst {
                out.worst = rel;
                out.at = format!("{name}[{i}] analytic {analytic:.6e} numeric {numeric:.6e}");
            }
            out.checked += 1;
        }
    }
    out
}

/// 1-D Gaussian samples against the closed-form Fréchet distance.
pub fn fid_oracle(n: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let (m1, s1, m2, s2) = (0.0, 1.0, 3.0, 2.0);
    let a: Vec<f64> = Normal::new(m1, s1).unwrap().sample_iter(&mut r).take(n).collect();
    let b: Vec<f64> = Normal::new(m2, s2).unwrap().sample_iter(&mut r).take(n).collect();
    let set = |v: Vec<f64>| EmbeddingSet { vectors: DMatrix::from_column_slice(n, 1, &v), embedder_id: "1d".into() };
    let (sa, sb) = (set(a), set(b));
    let closed = (m1 - m2).powi(2) + s1 * s1 + s2 * s2 - 2.0 * s1 * s2;
    let measured = frechet_distance(&sa, &sb).unwrap();
    let self_distance = frechet_distance(&sa, &sa).unwrap();
    (measured, closed, self_distance)
}

pub const SIMILARITY_LAYERS: [FenLayerId; 4] = [FenLayerId::RELU1_2, FenLayerId::RELU2_2, FenLayerId::RELU3_2, FenLayerId::RELU4_2];
