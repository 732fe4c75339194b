//! Joint identity + multi-target optimization with Adam, a one-step LR
//! decay, checkpointing and resume.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mdt_tensor::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::data::{self, DomainDataset, ImageBatch};
use crate::error::{Error, Result};
use crate::fen::{FeatureExtractor, Fen, FenConfig, FenLayerId};
use crate::loss::{self, LossReport, LossTerms, LossWeights};
use crate::model::{build_model, Generator, ModelConfig};
use crate::rng;

const CHECKPOINT_FORMAT: &str = "mdt-checkpoint/1";
const SOURCE_STREAM: u64 = 0;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub source_domain: usize,
    /// Dataset domain ids; position `k` is served by transfer module `k`.
    pub target_domains: Vec<usize>,
    pub total_iters: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_at: f64,
    pub seed: u64,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Supplied by the `loss` section of a run config.
    #[serde(skip)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source_domain: 0,
            target_domains: Vec::new(),
            total_iters: 3000,
            batch: 4,
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_at: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters < 1 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.decay_at > 0.0 && self.decay_at < 1.0) {
            return Err(Error::Config(format!("decay_at must lie in (0, 1), got {}", self.decay_at)));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) || !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::Config("base_lr and decay_factor must be finite and > 0".into()));
        }
        if self.target_domains.is_empty() {
            return Err(Error::Config("target_domains must not be empty".into()));
        }
        for (i, t) in self.target_domains.iter().enumerate() {
            if *t == self.source_domain {
                return Err(Error::Config(format!("target domain {t} equals the source domain")));
            }
            if self.target_domains[..i].contains(t) {
                return Err(Error::Config(format!("target domain {t} listed twice")));
            }
        }
        self.weights.validate()
    }

    /// Transfer-module slot of a dataset domain id.
    pub fn slot_of(&self, domain: usize) -> Option<usize> {
        self.target_domains.iter().position(|&d| d == domain)
    }
}

/// Step schedule: `base_lr` before `decay_at · total_iters`, then scaled.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if (iter as f64) < cfg.decay_at * cfg.total_iters as f64 {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.decay_factor
    }
}

/// `round(budget / size)` epochs per domain.
pub fn epochs_for_budget(sizes: &BTreeMap<String, usize>, budget: usize) -> Result<BTreeMap<String, usize>> {
    sizes
        .iter()
        .map(|(k, &n)| {
            if n == 0 {
                return Err(Error::EmptyDomain(k.clone()));
            }
            Ok((k.clone(), (budget as f64 / n as f64).round() as usize))
        })
        .collect()
}

/// Iterations per domain: `epochs · ceil(size / batch)`.
pub fn balance_iterations(
    sizes: &BTreeMap<String, usize>,
    epochs: &BTreeMap<String, usize>,
    batch: usize,
) -> Result<BTreeMap<String, usize>> {
    if batch == 0 {
        return Err(Error::Argument("batch must be >= 1".into()));
    }
    sizes
        .iter()
        .map(|(k, &n)| {
            let e = epochs.get(k).ok_or_else(|| Error::Argument(format!("no epoch count for domain {k}")))?;
            Ok((k.clone(), e * n.div_ceil(batch)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
struct AdamSlot<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

/// Adam with per-parameter step counts. Parameters without a gradient in
/// a step are left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: BTreeMap::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(self.eps);
        for (name, grad) in grads {
            let p = params.get_mut(&name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != grad.shape() {
                return Err(Error::Shape(format!("gradient of {name} has the wrong shape")));
            }
            let slot = self.slots.entry(name).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                steps: 0,
            });
            slot.steps += 1;
            let t = slot.steps as i32;
            let step = T::from_f64_lossy(lr / (1.0 - self.beta1.powi(t)));
            let vcorr = T::from_f64_lossy(1.0 / (1.0 - self.beta2.powi(t)));
            let (m, v) = (slot.m.make_mut(), slot.v.make_mut());
            for (((w, &g), m), v) in p.make_mut().iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *w = *w - step * *m / ((*v * vcorr).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn steps(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.steps)
    }
}

/// Model, optimizer and number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Generator<f32>,
    pub adam: Adam<f32>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(model: Generator<f32>) -> Self {
        Self { model, adam: Adam::default(), iteration: 0 }
    }
}

/// Images or precomputed FEN outputs for one side of a loss term.
#[derive(Clone, Debug)]
pub enum Reference<T> {
    Images(Tensor<T>),
    /// One tensor per requested layer: features for the content side,
    /// Gram matrices for the domain side.
    Computed(Vec<Tensor<T>>),
}

#[derive(Clone, Debug)]
pub struct StepTarget<T> {
    pub domain: usize,
    pub slot: usize,
    pub reference: Reference<T>,
}

/// Everything one objective evaluation needs besides the model.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub source: Tensor<T>,
    pub source_features: Option<Vec<Tensor<T>>>,
    pub targets: Vec<StepTarget<T>>,
}

/// Layer lists driving the two loss families.
#[derive(Clone, Copy, Debug)]
pub struct LossLayers<'a> {
    pub content: &'a [FenLayerId],
    pub domain: &'a [FenLayerId],
}

impl<'a> LossLayers<'a> {
    pub fn of(cfg: &'a FenConfig) -> Self {
        Self { content: &cfg.content_layers, domain: &cfg.domain_layers }
    }
}

/// Evaluates the combined objective on `model`; with `with_grad` also
/// returns gradients for every parameter that took part.
pub fn objective<T: Scalar>(
    model: &Generator<T>,
    fen: &dyn FeatureExtractor<T>,
    inputs: &StepInputs<T>,
    weights: &LossWeights,
    layers: LossLayers<'_>,
    with_grad: bool,
) -> Result<(LossReport, BTreeMap<String, Tensor<T>>)> {
    let g = Graph::new();
    let b = model.bind(&g, with_grad);
    let x = g.constant(inputs.source.clone());
    let src_feats = match &inputs.source_features {
        Some(f) => f.iter().map(|t| g.constant(t.clone())).collect(),
        None => fen.features(&g, x, layers.content)?,
    };
    let feats = b.encode(x)?;
    let rec = b.decode(&feats, x)?;
    let rec_feats = fen.features(&g, rec, layers.content)?;
    let content = loss::content_term(&g, &rec_feats, &src_feats)?;
    let mut domain = Vec::with_capacity(inputs.targets.len());
    let mut tc = Vec::new();
    for t in &inputs.targets {
        let moved = b.transfer(&feats, t.slot)?;
        let out = b.decode(&moved, x)?;
        let fa = fen.features(&g, out, layers.domain)?;
        let gb = match &t.reference {
            Reference::Images(img) => {
                if img.shape()[0] != inputs.source.shape()[0] {
                    return Err(Error::Shape(format!("target batch for domain {} has the wrong size", t.domain)));
                }
                let fb = fen.features(&g, g.constant(img.clone()), layers.domain)?;
                loss::grams(&g, &fb)?
            }
            Reference::Computed(grams) => grams.iter().map(|t| g.constant(t.clone())).collect(),
        };
        domain.push((t.domain, loss::domain_term(&g, &fa, &gb)?));
        if weights.lambda_content_on_transfer > 0.0 {
            let ft = fen.features(&g, out, layers.content)?;
            tc.push((loss::content_term(&g, &ft, &src_feats)?, T::one()));
        }
    }
    let transfer_content = if tc.is_empty() { None } else { Some(g.combine(&tc)?) };
    let terms = LossTerms::assemble(&g, content, domain, transfer_content, weights)?;
    let report = terms.report(&g)?;
    let mut grads = BTreeMap::new();
    if with_grad {
        let mut all = g.backward(terms.total)?;
        for (name, v) in b.bound_params() {
            if let Some(t) = all.take(v) {
                grads.insert(name, t);
            }
        }
    }
    Ok((report, grads))
}

fn target_inputs(cfg: &TrainConfig, targets: &BTreeMap<usize, ImageBatch>) -> Result<Vec<StepTarget<f32>>> {
    cfg.target_domains
        .iter()
        .enumerate()
        .map(|(slot, &d)| {
            let batch = targets
                .get(&d)
                .ok_or_else(|| Error::Config(format!("no target batch supplied for domain {d}")))?;
            Ok(StepTarget { domain: d, slot, reference: Reference::Images(batch.tensor().clone()) })
        })
        .collect()
}

/// One Adam step on the joint objective; returns the pre-update report.
pub fn training_step(
    state: &mut TrainState,
    fen: &dyn FeatureExtractor<f32>,
    layers: LossLayers<'_>,
    source: &ImageBatch,
    targets: &BTreeMap<usize, ImageBatch>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let inputs = StepInputs { source: source.tensor().clone(), source_features: None, targets: target_inputs(cfg, targets)? };
    step_with_inputs(state, fen, layers, &inputs, cfg)
}

fn step_with_inputs(
    state: &mut TrainState,
    fen: &dyn FeatureExtractor<f32>,
    layers: LossLayers<'_>,
    inputs: &StepInputs<f32>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (report, grads) = objective(&state.model, fen, inputs, &cfg.weights, layers, true)?;
    let lr = lr_at(state.iteration, cfg);
    state.adam.update(state.model.params_mut(), grads, lr)?;
    state.iteration += 1;
    Ok(report)
}

/// Per-image FEN outputs of the constant loss inputs. Extraction runs one
/// image at a time, which gives the same values as batched extraction.
#[derive(Default)]
pub struct FeatureCache {
    content: HashMap<(usize, usize), Vec<Tensor<f32>>>,
    grams: HashMap<(usize, usize), Vec<Tensor<f32>>>,
}

impl FeatureCache {
    fn gather(
        map: &mut HashMap<(usize, usize), Vec<Tensor<f32>>>,
        domain: usize,
        indices: &[usize],
        images: &[ImageBatch],
        compute: impl Fn(&ImageBatch) -> Result<Vec<Tensor<f32>>>,
    ) -> Result<Vec<Tensor<f32>>> {
        for &i in indices {
            if !map.contains_key(&(domain, i)) {
                map.insert((domain, i), compute(&images[i])?);
            }
        }
        let per_image: Vec<&Vec<Tensor<f32>>> = indices.iter().map(|&i| &map[&(domain, i)]).collect();
        let layers = per_image[0].len();
        (0..layers)
            .map(|l| {
                let parts: Vec<Tensor<f32>> = per_image.iter().map(|p| p[l].clone()).collect();
                Ok(Tensor::cat0(&parts)?)
            })
            .collect()
    }
}

fn fen_features(fen: &Fen<f32>, img: &ImageBatch, layers: &[FenLayerId]) -> Result<Vec<Tensor<f32>>> {
    Ok(fen.extract(img, layers)?.into_iter().map(|f| f.values).collect())
}

fn fen_grams(fen: &Fen<f32>, img: &ImageBatch, layers: &[FenLayerId]) -> Result<Vec<Tensor<f32>>> {
    let g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let feats = fen.features(&g, x, layers)?;
    Ok(loss::grams(&g, &feats)?.into_iter().map(|v| g.value(v)).collect())
}

/// Settings of a run that do not affect the optimization itself.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub image_size: (usize, usize),
    pub workers: usize,
    /// Directory for checkpoints and the JSON-lines log; `None` keeps the
    /// run in memory.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub progress: bool,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self { image_size: (64, 64), workers: 1, out_dir: None, resume: None, progress: false }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// `(iteration, lr, report)`, iterations strictly increasing.
    pub reports: Vec<(usize, f64, LossReport)>,
    /// Seconds spent on each consecutive block of 100 iterations.
    pub seconds_per_100: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.2.total).collect()
    }
}

/// Stored alongside the tensors of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub iteration: usize,
    pub model: ModelConfig,
    pub fen: FenConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub source: String,
    /// Domain names in transfer-slot order.
    pub targets: Vec<String>,
    /// `(height, width)` the model was trained at.
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    pub config_hash: String,
    pub param_hash: String,
    pub adam_steps: BTreeMap<String, u64>,
}

fn default_image_size() -> (usize, usize) {
    (64, 64)
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    model: &'a ModelConfig,
    fen: &'a FenConfig,
    train: &'a TrainConfig,
    loss: &'a LossWeights,
    source: &'a str,
    targets: &'a [String],
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the canonical JSON of everything that defines a run.
pub fn config_hash(
    model: &ModelConfig,
    fen: &FenConfig,
    train: &TrainConfig,
    source: &str,
    targets: &[String],
) -> Result<String> {
    let doc = HashedConfig { model, fen, train, loss: &train.weights, source, targets };
    Ok(hex(&Sha256::digest(serde_json::to_vec(&doc)?)))
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn param_hash<T: Scalar>(model: &Generator<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in model.params() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.as_slice() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    hex(&h.finalize())
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, state: &TrainState, meta: &CheckpointMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.iteration = state.iteration;
    meta.param_hash = param_hash(&state.model);
    meta.adam_steps = state.adam.slots.iter().map(|(k, s)| (k.clone(), s.steps)).collect();
    let mut ar = Archive::new(serde_json::to_value(&meta)?);
    for (name, t) in state.model.params() {
        ar.push(format!("param/{name}"), t);
    }
    for (name, s) in &state.adam.slots {
        ar.push(format!("adam_m/{name}"), &s.m);
        ar.push(format!("adam_v/{name}"), &s.v);
    }
    ar.save(path)
}

/// Loads a checkpoint. A stored config hash that does not match the stored
/// configuration is refused unless `allow_mismatch`.
pub fn load_checkpoint(path: &Path, allow_mismatch: bool) -> Result<Checkpoint> {
    let ar = Archive::load(path)?;
    let mut meta: CheckpointMeta = serde_json::from_value(ar.metadata.clone())
        .map_err(|e| Error::Archive { path: path.to_path_buf(), reason: format!("checkpoint metadata: {e}") })?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Archive { path: path.to_path_buf(), reason: format!("unsupported format {}", meta.format) });
    }
    meta.train.weights = meta.loss.clone();
    let expected = config_hash(&meta.model, &meta.fen, &meta.train, &meta.source, &meta.targets)?;
    if expected != meta.config_hash && !allow_mismatch {
        return Err(Error::ConfigHashMismatch { stored: meta.config_hash.clone(), expected });
    }
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in ar.tensors::<f32>() {
        if let Some(n) = name.strip_prefix("param/") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_m/") {
            m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_v/") {
            v.insert(n.to_string(), t);
        }
    }
    let model = Generator::from_params(&meta.model, params)?;
    let mut adam = Adam::default();
    for (name, mt) in m {
        let vt = v.remove(&name).ok_or_else(|| Error::Archive {
            path: path.to_path_buf(),
            reason: format!("missing second moment for {name}"),
        })?;
        let steps = meta.adam_steps.get(&name).copied().unwrap_or(0);
        adam.slots.insert(name, AdamSlot { m: mt, v: vt, steps });
    }
    let state = TrainState { model, adam, iteration: meta.iteration };
    Ok(Checkpoint { meta, state })
}

/// Index of the image for `(iteration, stream)`.
fn draw(count: usize, batch: usize, seed: u64, iteration: usize, stream: u64) -> Vec<usize> {
    data::sample_indices(count, batch, rng::derive_seed(seed, &[iteration as u64, stream]))
}

/// Runs `cfg.total_iters` iterations (continuing from `run.resume` when set)
/// on datasets indexed by domain id.
pub fn train(
    cfg: &TrainConfig,
    datasets: &[DomainDataset],
    model_cfg: &ModelConfig,
    fen_cfg: &FenConfig,
    run: &TrainRun,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    fen_cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.n_domains != cfg.target_domains.len() {
        return Err(Error::Config(format!(
            "model has {} transfer modules but {} target domains are configured",
            model_cfg.n_domains,
            cfg.target_domains.len()
        )));
    }
    let find = |id: usize| {
        datasets
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::Config(format!("no dataset for domain {id}")))
    };
    let source_ds = find(cfg.source_domain)?;
    let target_ds: Vec<&DomainDataset> = cfg.target_domains.iter().map(|&d| find(d)).collect::<Result<_>>()?;
    data::check_size(run.image_size)?;
    if model_cfg.size_divisor() > 0 && (run.image_size.0 % model_cfg.size_divisor() != 0 || run.image_size.1 % model_cfg.size_divisor() != 0) {
        return Err(Error::Config(format!("image size must be divisible by {}", model_cfg.size_divisor())));
    }
    let targets: Vec<String> = target_ds.iter().map(|d| d.name.clone()).collect();
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        iteration: 0,
        model: model_cfg.clone(),
        fen: fen_cfg.clone(),
        train: cfg.clone(),
        loss: cfg.weights.clone(),
        source: source_ds.name.clone(),
        targets: targets.clone(),
        image_size: run.image_size,
        config_hash: config_hash(model_cfg, fen_cfg, cfg, &source_ds.name, &targets)?,
        param_hash: String::new(),
        adam_steps: BTreeMap::new(),
    };

    let mut state = match &run.resume {
        Some(path) => {
            let ck = load_checkpoint(path, false)?;
            if ck.meta.config_hash != meta.config_hash {
                return Err(Error::ConfigHashMismatch { stored: ck.meta.config_hash, expected: meta.config_hash });
            }
            ck.state
        }
        None => TrainState::new(build_model(model_cfg, rng::derive_seed(cfg.seed, &[INIT_STREAM]))?),
    };

    let fen: Fen<f32> = crate::fen::load_fen(fen_cfg)?;
    let layers = LossLayers::of(fen_cfg);
    let source_images = data::load_gray_images(&source_ds.image_paths, run.image_size, run.workers)?;
    let target_images: Vec<Vec<ImageBatch>> = target_ds
        .iter()
        .map(|d| data::load_gray_images(&d.image_paths, run.image_size, run.workers))
        .collect::<Result<_>>()?;
    if source_images.is_empty() {
        return Err(Error::EmptyDomain(source_ds.name.clone()));
    }
    if let Some(d) = target_ds.iter().zip(&target_images).find(|(_, im)| im.is_empty()) {
        return Err(Error::EmptyDomain(d.0.name.clone()));
    }

    let mut log_file = match &run.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join("train_log.jsonl");
            let f = if run.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            };
            Some(BufWriter::new(f.map_err(|e| Error::io(format!("opening {}", path.display()), e))?))
        }
        None => None,
    };

    let mut cache = FeatureCache::default();
    let mut log = TrainLog::default();
    let mut block_start = Instant::now();
    let batch = cfg.batch;
    while state.iteration < cfg.total_iters {
        let it = state.iteration;
        let src_idx = draw(source_images.len(), batch, cfg.seed, it, SOURCE_STREAM);
        let src_batch: Vec<ImageBatch> = src_idx.iter().map(|&i| source_images[i].clone()).collect();
        let source = ImageBatch::stack(&src_batch)?;
        let source_features = Some(FeatureCache::gather(&mut cache.content, cfg.source_domain, &src_idx, &source_images, |im| {
            fen_features(&fen, im, layers.content)
        })?);
        let mut step_targets = Vec::with_capacity(target_ds.len());
        for (slot, (&d, images)) in cfg.target_domains.iter().zip(&target_images).enumerate() {
            let idx = draw(images.len(), batch, cfg.seed, it, 1 + d as u64);
            let grams = FeatureCache::gather(&mut cache.grams, d, &idx, images, |im| fen_grams(&fen, im, layers.domain))?;
            step_targets.push(StepTarget { domain: d, slot, reference: Reference::Computed(grams) });
        }
        let inputs = StepInputs { source: source.tensor().clone(), source_features, targets: step_targets };
        let lr = lr_at(it, cfg);
        let report = match step_with_inputs(&mut state, &fen, layers, &inputs, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(f) = log_file.as_mut() {
                    let _ = f.flush();
                }
                return Err(e);
            }
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", report.log_line(it, lr)).map_err(|e| Error::io("writing training log", e))?;
        }
        if run.progress && (it % 100 == 0 || it + 1 == cfg.total_iters) {
            eprintln!("iter {it:>6}  total {:.5}  content {:.5}  lr {lr:.1e}", report.total, report.content);
        }
        log.reports.push((it, lr, report));
        if (it + 1) % 100 == 0 {
            log.seconds_per_100.push(block_start.elapsed().as_secs_f64());
            block_start = Instant::now();
        }
        let done = state.iteration == cfg.total_iters;
        let periodic = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
        if let Some(dir) = &run.out_dir {
            if periodic || done {
                if let Some(f) = log_file.as_mut() {
                    f.flush().map_err(|e| Error::io("flushing training log", e))?;
                }
                let path = if done { dir.join("final.ckpt") } else { dir.join(format!("iter_{:06}.ckpt", state.iteration)) };
                save_checkpoint(&path, &state, &meta)?;
                if done {
                    log.final_checkpoint = Some(path);
                }
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io("flushing training log", e))?;
    }
    Ok((state, log))
}
