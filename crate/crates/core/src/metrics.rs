//! Transfer-quality metrics: Fréchet distance between embedding sets, a
//! perceptual content-similarity percentage, their DPD combination and an
//! edge-based anatomy consistency score for synthetic data.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use mdt_tensor::{Graph, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, LabelMap};
use crate::error::{Error, Result};
use crate::fen::{FeatureExtractor, Fen, FenLayerId};
use crate::inception::InceptionV3;
use crate::model::Generator;

/// Images are pushed through embedders and models in chunks of this size.
const CHUNK: usize = 16;
const EIGEN_EPS: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;
/// Tolerated negative eigenvalue, relative to the largest one.
const NEG_EIG_TOL: f64 = 1e-6;

/// `N × D` embeddings tagged with the network that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: DMatrix<f64>,
    pub embedder_id: String,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Which network produces embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EmbedderSpec {
    /// Global-average-pooled activations of one FEN layer.
    Fen(FenLayerId),
    /// Pool features of an InceptionV3 weight archive.
    Inception(PathBuf),
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Fen(FenLayerId::RELU4_1)
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Fen(l) => write!(f, "fen:{l}"),
            EmbedderSpec::Inception(p) => write!(f, "inception:{}", p.display()),
        }
    }
}

impl FromStr for EmbedderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("fen", layer)) => Ok(EmbedderSpec::Fen(layer.parse()?)),
            Some(("inception", path)) if !path.is_empty() => Ok(EmbedderSpec::Inception(PathBuf::from(path))),
            _ => Err(Error::Config(format!("embedder must be fen:<layer> or inception:<file>, got {s:?}"))),
        }
    }
}

impl TryFrom<String> for EmbedderSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EmbedderSpec> for String {
    fn from(e: EmbedderSpec) -> String {
        e.to_string()
    }
}

/// A ready-to-run embedder.
pub enum Embedder<'a> {
    Fen { fen: &'a Fen<f32>, layer: FenLayerId },
    Inception(InceptionV3),
}

impl<'a> Embedder<'a> {
    pub fn load(spec: &EmbedderSpec, fen: &'a Fen<f32>) -> Result<Self> {
        match spec {
            EmbedderSpec::Fen(layer) => {
                if !fen.config().variant.has_layer(*layer) {
                    return Err(Error::Config(format!("layer {layer} does not exist in {}", fen.config().variant)));
                }
                Ok(Embedder::Fen { fen, layer: *layer })
            }
            EmbedderSpec::Inception(path) => Ok(Embedder::Inception(InceptionV3::load(path)?)),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Embedder::Fen { fen, layer } => format!("fen:{layer}@{}", fen.id()),
            Embedder::Inception(net) => format!("inception:{}", net.digest()),
        }
    }

    fn embed_batch(&self, images: &ImageBatch) -> Result<Tensor<f32>> {
        match self {
            Embedder::Fen { fen, layer } => {
                let g = Graph::new();
                let x = g.constant(images.tensor().clone());
                let f = fen.features(&g, x, &[*layer])?;
                let pooled = g.global_avg_pool(f[0])?;
                Ok(g.value(pooled))
            }
            Embedder::Inception(net) => net.pool_features(images),
        }
    }
}

/// Embeds every image; rows follow input order.
pub fn embed(images: &[ImageBatch], embedder: &Embedder<'_>) -> Result<EmbeddingSet> {
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    let mut dim = 0;
    for chunk in images.chunks(CHUNK) {
        let batch = ImageBatch::stack(chunk)?;
        let e = embedder.embed_batch(&batch)?;
        if !e.all_finite() {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        dim = e.shape()[1];
        n += e.shape()[0];
        rows.extend(e.as_slice().iter().map(|&v| v as f64));
    }
    Ok(EmbeddingSet { vectors: DMatrix::from_row_slice(n, dim, &rows), embedder_id: embedder.id() })
}

fn mean_and_cov(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    (mean, cov)
}

fn symmetric_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))
}

/// Clips eigenvalues at zero, failing when one is clearly negative.
fn clipped(values: &DVector<f64>) -> Result<DVector<f64>> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let tol = NEG_EIG_TOL * max.max(1.0);
    if let Some(v) = values.iter().find(|v| **v < -tol) {
        return Err(Error::Numerical(format!("covariance product has negative eigenvalue {v:.3e}")));
    }
    Ok(values.map(|v| v.max(0.0)))
}

/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})` with unbiased
/// covariances. The trace term is evaluated as `tr √(Σ_A^{½} Σ_B Σ_A^{½})`,
/// a symmetric PSD matrix with the same eigenvalues as `Σ_A Σ_B`.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.embedder_id != b.embedder_id {
        return Err(Error::EmbedderMismatch(a.embedder_id.clone(), b.embedder_id.clone()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("embedding dims differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples(format!("need >= 2 embeddings per set, got {} and {}", a.len(), b.len())));
    }
    let (mu_a, cov_a) = mean_and_cov(&a.vectors);
    let (mu_b, cov_b) = mean_and_cov(&b.vectors);
    let ea = symmetric_eigen(cov_a.clone())?;
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&clipped(&ea.eigenvalues)?.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let ei = symmetric_eigen(inner)?;
    let tr_sqrt: f64 = clipped(&ei.eigenvalues)?.iter().map(|v| v.sqrt()).sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

fn unit_normalized(t: &Tensor<f32>) -> Vec<f64> {
    let (n, c, h, w) = t.dims4().expect("feature maps are NCHW");
    let p = h * w;
    let src = t.as_slice();
    let mut out = vec![0.0f64; src.len()];
    for b in 0..n {
        for i in 0..p {
            let norm = (0..c).map(|k| (src[(b * c + k) * p + i] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
            for k in 0..c {
                out[(b * c + k) * p + i] = src[(b * c + k) * p + i] as f64 / norm;
            }
        }
    }
    out
}

/// Per-image perceptual distances in `[0, 1)`: per layer, the squared
/// difference of channel-normalized features summed over channels and
/// averaged over positions; averaged over layers, then `d / (1 + d)`.
pub fn perceptual_distances(
    fen: &Fen<f32>,
    sources: &ImageBatch,
    transferred: &ImageBatch,
    layers: &[FenLayerId],
) -> Result<Vec<f64>> {
    if sources.tensor().shape() != transferred.tensor().shape() {
        return Err(Error::Shape(format!(
            "paired batches differ: {:?} vs {:?}",
            sources.tensor().shape(),
            transferred.tensor().shape()
        )));
    }
    if layers.is_empty() {
        return Err(Error::Config("content similarity needs at least one layer".into()));
    }
    let n = sources.batch();
    let fa = fen.extract(sources, layers)?;
    let fb = fen.extract(transferred, layers)?;
    let mut d = vec![0.0f64; n];
    for (a, b) in fa.iter().zip(&fb) {
        let (_, c, h, w) = a.values.dims4()?;
        let (ua, ub) = (unit_normalized(&a.values), unit_normalized(&b.values));
        let per = c * h * w;
        for (i, di) in d.iter_mut().enumerate() {
            let s: f64 = ua[i * per..(i + 1) * per].iter().zip(&ub[i * per..(i + 1) * per]).map(|(x, y)| (x - y).powi(2)).sum();
            *di += s / (h * w) as f64 / layers.len() as f64;
        }
    }
    Ok(d.into_iter().map(|v| v / (1.0 + v)).collect())
}

/// `(1 − mean distance) · 100` over aligned pairs.
pub fn content_similarity(
    fen: &Fen<f32>,
    sources: &[ImageBatch],
    transferred: &[ImageBatch],
    layers: &[FenLayerId],
) -> Result<f64> {
    if sources.len() != transferred.len() || sources.is_empty() {
        return Err(Error::Shape(format!("need equally many non-zero pairs, got {} and {}", sources.len(), transferred.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in sources.chunks(CHUNK).zip(transferred.chunks(CHUNK)) {
        let d = perceptual_distances(fen, &ImageBatch::stack(a)?, &ImageBatch::stack(b)?, layers)?;
        total += d.iter().sum::<f64>();
        count += d.len();
    }
    Ok((1.0 - total / count as f64) * 100.0)
}

/// `fid + λ · (1 − similarity/100) · 100`.
pub fn dpd(fid: f64, content_similarity_pct: f64, lambda: f64) -> f64 {
    fid + lambda * (1.0 - content_similarity_pct / 100.0) * 100.0
}

fn sobel_magnitude(plane: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| plane[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize] as f64;
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut m = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            m[i] = gx[i].hypot(gy[i]);
        }
    }
    (gx, gy, m)
}

/// Sobel magnitude thinned by non-maximum suppression along the gradient
/// direction (quantized to 0°, 45°, 90°, 135°).
pub fn thinned_edges(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let (gx, gy, m) = sobel_magnitude(plane, h, w);
    let get = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            m[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if m[i] <= 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            // Strict on one side so a plateau of two equal pixels keeps one.
            if m[i] > get(y - dy, x - dx) && m[i] >= get(y + dy, x + dx) {
                out[i] = m[i];
            }
        }
    }
    out
}

/// Pixels whose right or lower neighbour carries a different label.
pub fn label_boundaries(labels: &LabelMap) -> Vec<bool> {
    let (h, w) = (labels.height, labels.width);
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels.at(y, x);
            if (x + 1 < w && labels.at(y, x + 1) != l) || (y + 1 < h && labels.at(y + 1, x) != l) {
                b[y * w + x] = true;
            }
        }
    }
    b
}

fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// The `q`-quantile (nearest rank) of `values`.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Edge F1 of one image against one label map, with 1-px tolerance.
pub fn edge_f1(plane: &[f32], labels: &LabelMap) -> Result<f64> {
    let (h, w) = (labels.height, labels.width);
    if plane.len() != h * w {
        return Err(Error::Shape(format!("image has {} pixels, mask {h}x{w}", plane.len())));
    }
    let thin = thinned_edges(plane, h, w);
    let thr = quantile(&thin, 0.9);
    let edges: Vec<bool> = thin.iter().map(|&v| v > 0.0 && v >= thr).collect();
    let truth = label_boundaries(labels);
    let n_e = edges.iter().filter(|&&e| e).count();
    let n_b = truth.iter().filter(|&&b| b).count();
    if n_e == 0 || n_b == 0 {
        return Ok(0.0);
    }
    let truth_d = dilate(&truth, h, w);
    let edges_d = dilate(&edges, h, w);
    let tp_e = edges.iter().zip(&truth_d).filter(|(e, t)| **e && **t).count();
    let tp_b = truth.iter().zip(&edges_d).filter(|(b, e)| **b && **e).count();
    let precision = tp_e as f64 / n_e as f64;
    let recall = tp_b as f64 / n_b as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean edge F1 between transferred images and the boundaries of their
/// sources' label maps (structure and fluid combined).
pub fn structural_consistency(source_masks: &[LabelMap], transferred: &ImageBatch) -> Result<f64> {
    if source_masks.len() != transferred.batch() {
        return Err(Error::Shape(format!("{} masks for {} images", source_masks.len(), transferred.batch())));
    }
    let gray = transferred.to_gray();
    let mut s = 0.0;
    for (i, m) in source_masks.iter().enumerate() {
        s += edge_f1(gray.plane(i, 0), m)?;
    }
    Ok(s / source_masks.len() as f64)
}

/// One source→target evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source: String,
    pub target: String,
    pub fid: f64,
    #[serde(rename = "lpips_pct")]
    pub content_similarity_pct: f64,
    pub dpd: f64,
    pub n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub structural_consistency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub embedder: EmbedderSpec,
    pub similarity_layers: Vec<FenLayerId>,
    pub lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderSpec::default(),
            similarity_layers: vec![FenLayerId::RELU1_2, FenLayerId::RELU2_2, FenLayerId::RELU3_2, FenLayerId::RELU4_2],
            lambda: 1.0,
        }
    }
}

/// Translates `images` through transfer slot `slot` in chunks.
pub fn translate_images(model: &Generator<f32>, images: &[ImageBatch], slot: usize) -> Result<Vec<ImageBatch>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        out.extend(model.translate(&ImageBatch::stack(chunk)?, slot)?.unstack());
    }
    Ok(out)
}

/// Translates every source image into slot `slot` and scores the result
/// against the target images.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_direction(
    model: &Generator<f32>,
    slot: usize,
    source: (&str, &[ImageBatch]),
    target: (&str, &[ImageBatch]),
    fen: &Fen<f32>,
    embedder: &Embedder<'_>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if source.1.is_empty() {
        return Err(Error::EmptyDomain(source.0.to_string()));
    }
    if target.1.is_empty() {
        return Err(Error::EmptyDomain(target.0.to_string()));
    }
    let transferred = translate_images(model, source.1, slot)?;
    score_direction(source, target, &transferred, fen, embedder, cfg)
}

/// Scores precomputed translations.
pub fn score_direction(
    source: (&str, &[ImageBatch]),
    target: (&str, &[ImageBatch]),
    transferred: &[ImageBatch],
    fen: &Fen<f32>,
    embedder: &Embedder<'_>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let fid = frechet_distance(&embed(transferred, embedder)?, &embed(target.1, embedder)?)?;
    let sim = content_similarity(fen, source.1, transferred, &cfg.similarity_layers)?;
    Ok(MetricsReport {
        source: source.0.to_string(),
        target: target.0.to_string(),
        fid,
        content_similarity_pct: sim,
        dpd: dpd(fid, sim, cfg.lambda),
        n_images: source.1.len(),
        structural_consistency: None,
    })
}

/// One row per report plus an `average` row.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("source,target,fid,lpips_pct,dpd,n_images,structural_consistency\n");
    let fmt_sc = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in reports {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{}\n",
            r.source,
            r.target,
            r.fid,
            r.content_similarity_pct,
            r.dpd,
            r.n_images,
            fmt_sc(r.structural_consistency)
        ));
    }
    if !reports.is_empty() {
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let sc: Vec<f64> = reports.iter().filter_map(|r| r.structural_consistency).collect();
        let sc_mean = (sc.len() == reports.len()).then(|| sc.iter().sum::<f64>() / n);
        s.push_str(&format!(
            "average,,{:.6},{:.6},{:.6},{},{}\n",
            mean(&|r| r.fid),
            mean(&|r| r.content_similarity_pct),
            mean(&|r| r.dpd),
            reports.iter().map(|r| r.n_images).sum::<usize>(),
            fmt_sc(sc_mean)
        ));
    }
    s
}
