//! Generator: shared encoder/decoder plus one transfer module per
//! (target domain, feature scale).
//!
//! ```text
//! reconstruct(I)  = decode(encode(I), I)
//! translate(I, X) = decode(transfer_X(encode(I)), I)
//! ```
//!
//! The decoder consumes every scale (trunk at the coarsest, additive skips
//! at the others), so each scale's transfer module reaches the output.

use std::cell::RefCell;
use std::collections::BTreeMap;

use mdt_tensor::{Graph, Scalar, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng;

const NORM_EPS: f64 = 1e-5;
/// The output head starts at a tenth of the He scale so an untrained
/// residual model stays close to the identity.
const HEAD_INIT_GAIN: f64 = 0.1;
const HEAD_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    /// Densely connected 3×3 conv layers plus a 1×1 projection.
    #[default]
    Dense,
    /// A single 3×3 conv + instance norm per module.
    SingleConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub scales: usize,
    pub transfer_depth: usize,
    pub transfer_growth: usize,
    pub n_domains: usize,
    pub residual_output: bool,
    pub transfer_variant: TransferVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            scales: 3,
            transfer_depth: 3,
            transfer_growth: 16,
            n_domains: 2,
            residual_output: true,
            transfer_variant: TransferVariant::Dense,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.scales) {
            return Err(Error::Config(format!("scales must be 2 or 3, got {}", self.scales)));
        }
        if self.transfer_depth < 1 {
            return Err(Error::Config("transfer_depth must be >= 1".into()));
        }
        if self.n_domains < 1 {
            return Err(Error::Config("n_domains must be >= 1".into()));
        }
        if self.base_channels < 1 || self.transfer_growth < 1 {
            return Err(Error::Config("base_channels and transfer_growth must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels of the encoder output at each scale.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..self.scales).map(|s| self.base_channels << s).collect()
    }

    /// Required divisor of the input height and width.
    pub fn size_divisor(&self) -> usize {
        1 << (self.scales - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal { std: f64 },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn conv_spec(out: &mut Vec<ParamSpec>, prefix: &str, co: usize, ci: usize, k: usize, bias: bool, gain: f64) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![co, ci, k, k],
        init: Init::Normal { std: gain * (2.0 / (ci * k * k) as f64).sqrt() },
    });
    if bias {
        out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![co], init: Init::Zeros });
    }
}

fn norm_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec { name: format!("{prefix}.gamma"), shape: vec![c], init: Init::Ones });
    out.push(ParamSpec { name: format!("{prefix}.beta"), shape: vec![c], init: Init::Zeros });
}

fn shared_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let ch = cfg.channel_plan();
    let mut out = Vec::new();
    conv_spec(&mut out, "encoder.stem.conv", ch[0], 1, 7, false, 1.0);
    norm_spec(&mut out, "encoder.stem.norm", ch[0]);
    for s in 1..cfg.scales {
        conv_spec(&mut out, &format!("encoder.down{s}.conv"), ch[s], ch[s - 1], 3, false, 1.0);
        norm_spec(&mut out, &format!("encoder.down{s}.norm"), ch[s]);
    }
    for s in (0..cfg.scales - 1).rev() {
        conv_spec(&mut out, &format!("decoder.up{s}.conv"), ch[s], ch[s + 1], 3, false, 1.0);
        norm_spec(&mut out, &format!("decoder.up{s}.norm"), ch[s]);
    }
    out.push(ParamSpec {
        name: "decoder.head.weight".into(),
        shape: vec![1, ch[0], HEAD_KERNEL, HEAD_KERNEL],
        init: Init::Normal { std: HEAD_INIT_GAIN },
    });
    out.push(ParamSpec { name: "decoder.head.bias".into(), shape: vec![1], init: Init::Zeros });
    out
}

/// The stored head weight is multiplied by the He factor `sqrt(2 / fan_in)`
/// at run time. The head reads a wide, non-negative input, so an Adam step
/// of size lr on every stored weight moves the output by about
/// `lr · fan_in · mean input`; scaling the weight divides that by
/// `sqrt(fan_in / 2)`, which keeps early steps from saturating the output.
fn head_scale(in_channels: usize) -> f64 {
    (2.0 / (in_channels * HEAD_KERNEL * HEAD_KERNEL) as f64).sqrt()
}

fn transfer_specs(cfg: &ModelConfig, domain: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (s, &c) in cfg.channel_plan().iter().enumerate() {
        let p = format!("transfer.d{domain}.s{s}");
        match cfg.transfer_variant {
            TransferVariant::Dense => {
                for k in 0..cfg.transfer_depth {
                    let ci = c + k * cfg.transfer_growth;
                    conv_spec(&mut out, &format!("{p}.layer{k}.conv"), cfg.transfer_growth, ci, 3, false, 1.0);
                    norm_spec(&mut out, &format!("{p}.layer{k}.norm"), cfg.transfer_growth);
                }
                let ci = c + cfg.transfer_depth * cfg.transfer_growth;
                conv_spec(&mut out, &format!("{p}.proj"), c, ci, 1, true, 1.0);
            }
            TransferVariant::SingleConv => {
                conv_spec(&mut out, &format!("{p}.conv"), c, c, 3, false, 1.0);
                norm_spec(&mut out, &format!("{p}.norm"), c);
            }
        }
    }
    out
}

fn all_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = shared_specs(cfg);
    for d in 0..cfg.n_domains {
        specs.extend(transfer_specs(cfg, d));
    }
    specs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub shared: usize,
    pub per_domain: usize,
    pub total: usize,
}

/// Trainable scalar count, split into the shared encoder/decoder and one
/// domain's transfer stack. Grows linearly in `n_domains`.
pub fn parameter_count(cfg: &ModelConfig) -> ParameterCount {
    let shared = shared_specs(cfg).iter().map(ParamSpec::numel).sum();
    let per_domain = transfer_specs(cfg, 0).iter().map(ParamSpec::numel).sum();
    ParameterCount { shared, per_domain, total: shared + cfg.n_domains * per_domain }
}

/// Encoder outputs, finest scale first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T> {
    pub scales: Vec<Tensor<T>>,
}

/// Parameters of an encoder, decoder and transfer bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

/// Creates the generator; every tensor is drawn from a stream keyed by
/// `(init_seed, parameter name)`.
pub fn build_model<T: Scalar>(config: &ModelConfig, init_seed: u64) -> Result<Generator<T>> {
    config.validate()?;
    let params = all_specs(config)
        .into_iter()
        .map(|spec| {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
                Init::Normal { std } => {
                    let mut r = rng::stream(init_seed, &[rng::hash_str(&spec.name)]);
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            T::from_f64_lossy(z * std)
                        })
                        .collect()
                }
            };
            (spec.name, Tensor::from_vec(&spec.shape, data).expect("spec shape"))
        })
        .collect();
    Ok(Generator { config: config.clone(), params })
}

impl<T: Scalar> Generator<T> {
    /// Reassembles a generator from stored tensors, checking names and shapes.
    pub fn from_params(config: &ModelConfig, mut params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = all_specs(config);
        let mut out = BTreeMap::new();
        for spec in specs {
            let t = params
                .remove(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!("parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            out.insert(spec.name, t);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config: config.clone(), params: out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Names of the parameters owned by one domain's transfer modules.
    pub fn transfer_param_names(&self, domain: usize) -> Vec<String> {
        let prefix = format!("transfer.d{domain}.");
        self.params.keys().filter(|k| k.starts_with(&prefix)).cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator { config: self.config.clone(), params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Attaches the parameters to a graph: as trainable leaves when
    /// `trainable`, otherwise as constants. Leaves are created on first use,
    /// so modules that do not take part never appear on the tape.
    pub fn bind<'a>(&'a self, graph: &'a Graph<T>, trainable: bool) -> Bound<'a, T> {
        Bound { graph, model: self, trainable, vars: RefCell::new(BTreeMap::new()) }
    }

    fn input_var(&self, g: &Graph<T>, images: &ImageBatch) -> Var {
        g.constant(images.tensor().cast())
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<MultiScaleFeatures<T>> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let x = self.input_var(&g, images);
        let feats = b.encode(x)?;
        Ok(MultiScaleFeatures { scales: feats.iter().map(|v| g.value(*v)).collect() })
    }

    pub fn apply_transfer(&self, feats: &MultiScaleFeatures<T>, domain: usize) -> Result<MultiScaleFeatures<T>> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let vars: Vec<Var> = feats.scales.iter().map(|t| g.constant(t.clone())).collect();
        let out = b.transfer(&vars, domain)?;
        Ok(MultiScaleFeatures { scales: out.iter().map(|v| g.value(*v)).collect() })
    }

    pub fn decode(&self, feats: &MultiScaleFeatures<T>, source: &ImageBatch) -> Result<ImageBatch> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let vars: Vec<Var> = feats.scales.iter().map(|t| g.constant(t.clone())).collect();
        let src = self.input_var(&g, source);
        let out = b.decode(&vars, src)?;
        ImageBatch::new(g.value(out).cast())
    }

    pub fn reconstruct(&self, images: &ImageBatch) -> Result<ImageBatch> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let x = self.input_var(&g, images);
        let out = b.reconstruct(x)?;
        ImageBatch::new(g.value(out).cast())
    }

    pub fn translate(&self, images: &ImageBatch, domain: usize) -> Result<ImageBatch> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let x = self.input_var(&g, images);
        let out = b.translate(x, domain)?;
        ImageBatch::new(g.value(out).cast())
    }

    /// One rendition per transfer module; the encoder runs once.
    pub fn translate_all(&self, images: &ImageBatch) -> Result<Vec<ImageBatch>> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let x = self.input_var(&g, images);
        let feats = b.encode(x)?;
        (0..self.config.n_domains)
            .map(|d| {
                let t = b.transfer(&feats, d)?;
                let out = b.decode(&t, x)?;
                ImageBatch::new(g.value(out).cast())
            })
            .collect()
    }
}

/// A generator's parameters recorded on one graph.
pub struct Bound<'a, T: Scalar> {
    graph: &'a Graph<T>,
    model: &'a Generator<T>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.model.params.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?.clone();
        let v = if self.trainable { self.graph.param(t) } else { self.graph.constant(t) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves created so far.
    pub fn bound_params(&self) -> BTreeMap<String, Var> {
        self.vars.borrow().clone()
    }

    fn eps(&self) -> T {
        T::from_f64_lossy(NORM_EPS)
    }

    /// conv (no bias) → instance norm → ReLU.
    fn conv_norm_relu(&self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let g = self.graph;
        let y = g.conv2d(x, self.p(&format!("{prefix}.conv.weight"))?, None, stride, (pad, pad))?;
        let y = g.instance_norm(
            y,
            Some(self.p(&format!("{prefix}.norm.gamma"))?),
            Some(self.p(&format!("{prefix}.norm.beta"))?),
            self.eps(),
        )?;
        Ok(g.relu(y))
    }

    pub fn encode(&self, x: Var) -> Result<Vec<Var>> {
        let shape = self.graph.shape(x);
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::Shape(format!("encoder input must be NCHW, got {shape:?}")));
        };
        if c != 1 {
            return Err(Error::Shape(format!("encoder expects 1-channel images, got {c}")));
        }
        let d = self.config().size_divisor();
        if h % d != 0 || w % d != 0 || h < d || w < d {
            return Err(Error::Shape(format!("input {h}x{w} must be divisible by {d}")));
        }
        let mut feats = Vec::with_capacity(self.config().scales);
        let mut y = self.conv_norm_relu(x, "encoder.stem", 1, 3)?;
        feats.push(y);
        for s in 1..self.config().scales {
            y = self.conv_norm_relu(y, &format!("encoder.down{s}"), 2, 1)?;
            feats.push(y);
        }
        Ok(feats)
    }

    fn check_feats(&self, feats: &[Var]) -> Result<()> {
        let plan = self.config().channel_plan();
        if feats.len() != plan.len() {
            return Err(Error::Shape(format!("expected {} feature scales, got {}", plan.len(), feats.len())));
        }
        let s0 = self.graph.shape(feats[0]);
        for (s, (&f, &c)) in feats.iter().zip(&plan).enumerate() {
            let sh = self.graph.shape(f);
            let want = [s0[0], c, s0[2] >> s, s0[3] >> s];
            if sh != want {
                return Err(Error::Shape(format!("feature scale {s} has shape {sh:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn transfer(&self, feats: &[Var], domain: usize) -> Result<Vec<Var>> {
        let n = self.config().n_domains;
        if domain >= n {
            return Err(Error::UnknownDomain { domain, available: n });
        }
        self.check_feats(feats)?;
        let g = self.graph;
        feats
            .iter()
            .enumerate()
            .map(|(s, &f)| {
                let p = format!("transfer.d{domain}.s{s}");
                match self.config().transfer_variant {
                    TransferVariant::Dense => {
                        let mut stack = vec![f];
                        for k in 0..self.config().transfer_depth {
                            let input = if stack.len() == 1 { f } else { g.concat_channels(&stack)? };
                            stack.push(self.conv_norm_relu(input, &format!("{p}.layer{k}"), 1, 1)?);
                        }
                        let all = g.concat_channels(&stack)?;
                        Ok(g.conv2d(
                            all,
                            self.p(&format!("{p}.proj.weight"))?,
                            Some(self.p(&format!("{p}.proj.bias"))?),
                            1,
                            (0, 0),
                        )?)
                    }
                    TransferVariant::SingleConv => {
                        let y = g.conv2d(f, self.p(&format!("{p}.conv.weight"))?, None, 1, (1, 1))?;
                        Ok(g.instance_norm(
                            y,
                            Some(self.p(&format!("{p}.norm.gamma"))?),
                            Some(self.p(&format!("{p}.norm.beta"))?),
                            self.eps(),
                        )?)
                    }
                }
            })
            .collect()
    }

    /// Raw 1-channel decoder output before the residual/clamp stage.
    pub fn decode_raw(&self, feats: &[Var]) -> Result<Var> {
        self.check_feats(feats)?;
        let g = self.graph;
        let scales = self.config().scales;
        let mut h = feats[scales - 1];
        for s in (0..scales - 1).rev() {
            let up = g.upsample_nearest(h, 2)?;
            let y = self.conv_norm_relu(up, &format!("decoder.up{s}"), 1, 1)?;
            h = g.add(y, feats[s])?;
        }
        let ci = self.config().base_channels;
        let scale = vec![T::from_f64_lossy(head_scale(ci)); ci];
        let w = g.channel_affine(self.p("decoder.head.weight")?, &scale, &vec![T::zero(); ci])?;
        let pad = HEAD_KERNEL / 2;
        Ok(g.conv2d(h, w, Some(self.p("decoder.head.bias")?), 1, (pad, pad))?)
    }

    /// `clamp(source + r, 0, 1)` in residual mode, else `clamp(r, 0, 1)`.
    pub fn decode(&self, feats: &[Var], source: Var) -> Result<Var> {
        let raw = self.decode_raw(feats)?;
        let g = self.graph;
        let (rs, ss) = (g.shape(raw), g.shape(source));
        if rs != ss {
            return Err(Error::Shape(format!("source {ss:?} does not match decoded {rs:?}")));
        }
        let y = if self.config().residual_output { g.add(source, raw)? } else { raw };
        Ok(g.clamp(y, T::zero(), T::one()))
    }

    pub fn reconstruct(&self, x: Var) -> Result<Var> {
        let feats = self.encode(x)?;
        self.decode(&feats, x)
    }

    pub fn translate(&self, x: Var, domain: usize) -> Result<Var> {
        let feats = self.encode(x)?;
        let t = self.transfer(&feats, domain)?;
        self.decode(&t, x)
    }
}
