//! Perceptual losses on FEN activations: content (feature MSE), domain
//! (Gram MSE) and their weighted combination.

use std::collections::BTreeMap;

use mdt_tensor::{Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::fen::{FeatureExtractor, FenLayerId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// α for every target domain without an explicit entry in `alpha`.
    pub default_alpha: f64,
    /// Per-domain α overrides keyed by domain id.
    pub alpha: BTreeMap<usize, f64>,
    /// Weight of an extra content term between the source and each
    /// translation. Zero disables it.
    pub lambda_content_on_transfer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { default_alpha: 100.0, alpha: BTreeMap::new(), lambda_content_on_transfer: 0.0 }
    }
}

impl LossWeights {
    pub fn alpha_for(&self, domain: usize) -> f64 {
        self.alpha.get(&domain).copied().unwrap_or(self.default_alpha)
    }

    pub fn validate(&self) -> Result<()> {
        for (&d, &a) in std::iter::once((&usize::MAX, &self.default_alpha)).chain(&self.alpha) {
            if !(a.is_finite() && a > 0.0) {
                let which = if d == usize::MAX { "default_alpha".to_string() } else { format!("alpha[{d}]") };
                return Err(Error::Config(format!("{which} must be finite and > 0, got {a}")));
            }
        }
        let l = self.lambda_content_on_transfer;
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::Config(format!("lambda_content_on_transfer must be finite and >= 0, got {l}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub domain_per_target: BTreeMap<usize, f64>,
    /// Summed source-vs-translation content; zero unless enabled.
    pub transfer_content: f64,
    pub total: f64,
}

impl LossReport {
    /// Σ α_X · domain_X.
    pub fn weighted_domain(&self, weights: &LossWeights) -> f64 {
        self.domain_per_target.iter().map(|(&d, &v)| weights.alpha_for(d) * v).sum()
    }

    /// The JSON-lines training log record.
    pub fn log_line(&self, iter: usize, lr: f64) -> String {
        let domain: BTreeMap<String, f64> = self.domain_per_target.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        serde_json::json!({
            "iter": iter,
            "content": self.content,
            "domain": domain,
            "total": self.total,
            "lr": lr,
        })
        .to_string()
    }
}

/// Mean over layers of the feature MSE.
pub fn content_term<T: Scalar>(g: &Graph<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("content term needs matching non-empty layer lists ({} vs {})", a.len(), b.len())));
    }
    let w = T::from_f64_lossy(1.0 / a.len() as f64);
    let terms = a.iter().zip(b).map(|(&x, &y)| Ok((g.mse(x, y)?, w))).collect::<Result<Vec<_>>>()?;
    Ok(g.combine(&terms)?)
}

/// Mean over layers of the Gram MSE. `grams_b` are Gram nodes already.
pub fn domain_term<T: Scalar>(g: &Graph<T>, feats_a: &[Var], grams_b: &[Var]) -> Result<Var> {
    if feats_a.len() != grams_b.len() || feats_a.is_empty() {
        return Err(Error::Shape(format!(
            "domain term needs matching non-empty layer lists ({} vs {})",
            feats_a.len(),
            grams_b.len()
        )));
    }
    let w = T::from_f64_lossy(1.0 / feats_a.len() as f64);
    let mut terms = Vec::with_capacity(feats_a.len());
    for (&f, &gb) in feats_a.iter().zip(grams_b) {
        let ga = g.gram(f)?;
        terms.push((g.mse(ga, gb)?, w));
    }
    Ok(g.combine(&terms)?)
}

/// Gram nodes of each feature node.
pub fn grams<T: Scalar>(g: &Graph<T>, feats: &[Var]) -> Result<Vec<Var>> {
    feats.iter().map(|&f| Ok(g.gram(f)?)).collect()
}

/// Loss nodes of one step, prior to reading values back.
pub struct LossTerms {
    pub content: Var,
    pub domain: Vec<(usize, Var)>,
    pub transfer_content: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn assemble<T: Scalar>(
        g: &Graph<T>,
        content: Var,
        domain: Vec<(usize, Var)>,
        transfer_content: Option<Var>,
        weights: &LossWeights,
    ) -> Result<Self> {
        let mut terms = vec![(content, T::one())];
        for &(d, v) in &domain {
            terms.push((v, T::from_f64_lossy(weights.alpha_for(d))));
        }
        if let Some(tc) = transfer_content {
            terms.push((tc, T::from_f64_lossy(weights.lambda_content_on_transfer)));
        }
        let total = g.combine(&terms)?;
        Ok(Self { content, domain, transfer_content, total })
    }

    /// Reads the values, failing on the first non-finite component.
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> Result<LossReport> {
        let read = |v: Var, name: String| -> Result<f64> {
            let x = g.value(v).item().as_f64();
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::NonFiniteLoss(name))
            }
        };
        let content = read(self.content, "content".into())?;
        let mut domain_per_target = BTreeMap::new();
        for &(d, v) in &self.domain {
            domain_per_target.insert(d, read(v, format!("domain[{d}]"))?);
        }
        let transfer_content = match self.transfer_content {
            Some(v) => read(v, "transfer_content".into())?,
            None => 0.0,
        };
        let total = read(self.total, "total".into())?;
        Ok(LossReport { content, domain_per_target, transfer_content, total })
    }
}

fn input<T: Scalar>(g: &Graph<T>, images: &ImageBatch) -> Var {
    g.constant(images.tensor().cast())
}

/// Content loss between `i` and its reconstruction `i_prime`.
pub fn content_loss<T: Scalar>(
    fen: &dyn FeatureExtractor<T>,
    i: &ImageBatch,
    i_prime: &ImageBatch,
    layers: &[FenLayerId],
) -> Result<f64> {
    if i.tensor().shape() != i_prime.tensor().shape() {
        return Err(Error::Shape(format!(
            "content loss inputs differ: {:?} vs {:?}",
            i.tensor().shape(),
            i_prime.tensor().shape()
        )));
    }
    let g = Graph::new();
    let fa = fen.features(&g, input(&g, i), layers)?;
    let fb = fen.features(&g, input(&g, i_prime), layers)?;
    let v = content_term(&g, &fb, &fa)?;
    Ok(g.value(v).item().as_f64())
}

/// Domain loss between translations and target-domain samples. The two
/// batches may differ spatially but must hold the same number of images.
pub fn domain_loss<T: Scalar>(
    fen: &dyn FeatureExtractor<T>,
    ix_prime: &ImageBatch,
    ix: &ImageBatch,
    layers: &[FenLayerId],
) -> Result<f64> {
    if ix_prime.batch() != ix.batch() {
        return Err(Error::Shape(format!("domain loss batches differ: {} vs {}", ix_prime.batch(), ix.batch())));
    }
    let g = Graph::new();
    let fa = fen.features(&g, input(&g, ix_prime), layers)?;
    let fb = fen.features(&g, input(&g, ix), layers)?;
    let gb = grams(&g, &fb)?;
    let v = domain_term(&g, &fa, &gb)?;
    Ok(g.value(v).item().as_f64())
}

/// One target's images: samples of the domain and the source's translation.
#[derive(Clone, Debug)]
pub struct TransferPair {
    pub domain: usize,
    pub target: ImageBatch,
    pub translated: ImageBatch,
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub source: ImageBatch,
    pub reconstruction: ImageBatch,
    pub transfers: Vec<TransferPair>,
}

/// Combined objective over precomputed model outputs.
pub fn total_loss<T: Scalar>(
    fen: &dyn FeatureExtractor<T>,
    outputs: &ModelOutputs,
    weights: &LossWeights,
    content_layers: &[FenLayerId],
    domain_layers: &[FenLayerId],
) -> Result<LossReport> {
    weights.validate()?;
    let g = Graph::new();
    let src = input(&g, &outputs.source);
    let src_feats = fen.features(&g, src, content_layers)?;
    let rec = fen.features(&g, input(&g, &outputs.reconstruction), content_layers)?;
    let content = content_term(&g, &rec, &src_feats)?;
    let mut domain = Vec::new();
    let mut tc = Vec::new();
    for pair in &outputs.transfers {
        if pair.translated.tensor().shape() != outputs.source.tensor().shape() {
            return Err(Error::Shape(format!("translation for domain {} has the wrong shape", pair.domain)));
        }
        if pair.target.batch() != pair.translated.batch() {
            return Err(Error::Shape(format!("target batch for domain {} has the wrong size", pair.domain)));
        }
        let tr = input(&g, &pair.translated);
        let fa = fen.features(&g, tr, domain_layers)?;
        let fb = fen.features(&g, input(&g, &pair.target), domain_layers)?;
        let gb = grams(&g, &fb)?;
        domain.push((pair.domain, domain_term(&g, &fa, &gb)?));
        if weights.lambda_content_on_transfer > 0.0 {
            let ft = fen.features(&g, tr, content_layers)?;
            tc.push((content_term(&g, &ft, &src_feats)?, T::one()));
        }
    }
    let transfer_content = if tc.is_empty() { None } else { Some(g.combine(&tc)?) };
    LossTerms::assemble(&g, content, domain, transfer_content, weights)?.report(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdt_tensor::Tensor;

    /// Returns the image itself at every requested site.
    struct Passthrough;

    impl FeatureExtractor<f64> for Passthrough {
        fn features(&self, _g: &Graph<f64>, images: Var, layers: &[FenLayerId]) -> Result<Vec<Var>> {
            Ok(layers.iter().map(|_| images).collect())
        }
    }

    /// One 1×1 feature per image: the mean pixel times 8.
    struct MeanTimesEight;

    impl FeatureExtractor<f64> for MeanTimesEight {
        fn features(&self, g: &Graph<f64>, images: Var, layers: &[FenLayerId]) -> Result<Vec<Var>> {
            let v = g.value(images);
            let (n, _, h, w) = v.dims4().unwrap();
            let data: Vec<f64> = v.as_slice().chunks(h * w).map(|p| 8.0 * p.iter().sum::<f64>() / (h * w) as f64).collect();
            let t = g.constant(Tensor::from_vec(&[n, 1, 1, 1], data).unwrap());
            Ok(layers.iter().map(|_| t).collect())
        }
    }

    fn flat(v: f32) -> ImageBatch {
        ImageBatch::from_gray(4, 4, vec![v; 16]).unwrap()
    }

    const L: &[FenLayerId] = &[FenLayerId::RELU1_2];

    #[test]
    fn content_loss_of_scalar_features() {
        let c = content_loss(&MeanTimesEight, &flat(0.25), &flat(0.625), L).unwrap();
        assert_eq!(c, 9.0);
    }

    #[test]
    fn domain_loss_of_constant_features() {
        let d = domain_loss(&MeanTimesEight, &flat(0.125), &flat(0.375), L).unwrap();
        assert_eq!(d, 64.0);
    }

    #[test]
    fn total_is_content_plus_weighted_domain() {
        let out = ModelOutputs {
            source: flat(0.25),
            reconstruction: flat(0.625),
            transfers: vec![TransferPair { domain: 3, target: flat(0.125), translated: flat(0.375) }],
        };
        let w = LossWeights { default_alpha: 1.0, ..Default::default() };
        let r = total_loss(&MeanTimesEight, &out, &w, L, L).unwrap();
        assert_eq!(r.total, 9.0 + 64.0);
        let none = ModelOutputs { transfers: vec![], ..out };
        let r = total_loss(&MeanTimesEight, &none, &w, L, L).unwrap();
        assert_eq!(r.total, r.content);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let big = ImageBatch::from_gray(8, 8, vec![0.5; 64]).unwrap();
        assert!(content_loss(&Passthrough, &flat(0.5), &big, L).is_err());
        assert!(domain_loss(&Passthrough, &flat(0.5), &big, L).is_ok());
    }

    #[test]
    fn non_finite_component_is_named() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(1.0));
        let d = g.constant(Tensor::scalar(f64::NAN));
        let t = LossTerms::assemble(&g, c, vec![(2, d)], None, &LossWeights::default()).unwrap();
        match t.report(&g) {
            Err(Error::NonFiniteLoss(name)) => assert_eq!(name, "domain[2]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { default_alpha: 0.0, ..Default::default() }.validate().is_err());
        let mut w = LossWeights::default();
        w.alpha.insert(1, f64::NAN);
        assert!(w.validate().is_err());
        assert!(LossWeights { lambda_content_on_transfer: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn log_line_has_expected_keys() {
        let r = LossReport {
            content: 1.0,
            domain_per_target: [(1, 2.0)].into_iter().collect(),
            transfer_content: 0.0,
            total: 201.0,
        };
        let v: serde_json::Value = serde_json::from_str(&r.log_line(7, 1e-3)).unwrap();
        assert_eq!(v["iter"], 7);
        assert_eq!(v["domain"]["1"], 2.0);
        assert_eq!(v["lr"], 1e-3);
    }
}
