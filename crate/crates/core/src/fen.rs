//! Frozen VGG-style feature extraction network and Gram statistics.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use mdt_tensor::{Graph, Scalar, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::archive::Archive;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const BLOCK_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// A ReLU activation site, `relu{block}_{index}`, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FenLayerId {
    block: u8,
    index: u8,
}

impl FenLayerId {
    pub const RELU1_2: Self = Self { block: 1, index: 2 };
    pub const RELU2_2: Self = Self { block: 2, index: 2 };
    pub const RELU3_2: Self = Self { block: 3, index: 2 };
    pub const RELU4_1: Self = Self { block: 4, index: 1 };
    pub const RELU4_2: Self = Self { block: 4, index: 2 };

    pub fn new(block: u8, index: u8) -> Self {
        Self { block, index }
    }

    pub fn block(&self) -> usize {
        self.block as usize
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    /// Number of 2× max-pools applied before this site.
    pub fn pools_before(&self) -> usize {
        self.block as usize - 1
    }

    /// Channel count of the activation.
    pub fn channels(&self) -> usize {
        BLOCK_CHANNELS[self.block as usize - 1]
    }
}

impl fmt::Display for FenLayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "relu{}_{}", self.block, self.index)
    }
}

impl FromStr for FenLayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown FEN layer name {s:?}"));
        let rest = s.strip_prefix("relu").ok_or_else(bad)?;
        let (b, i) = rest.split_once('_').ok_or_else(bad)?;
        let block: u8 = b.parse().map_err(|_| bad())?;
        let index: u8 = i.parse().map_err(|_| bad())?;
        if !(1..=5).contains(&block) || !(1..=4).contains(&index) {
            return Err(bad());
        }
        Ok(Self { block, index })
    }
}

impl Serialize for FenLayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FenLayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FenVariant {
    #[default]
    Vgg16,
    Vgg19,
}

impl FenVariant {
    /// Convolutions per block.
    pub fn block_depths(&self) -> [usize; 5] {
        match self {
            FenVariant::Vgg16 => [2, 2, 3, 3, 3],
            FenVariant::Vgg19 => [2, 2, 4, 4, 4],
        }
    }

    pub fn has_layer(&self, layer: FenLayerId) -> bool {
        (1..=5).contains(&layer.block()) && layer.index() >= 1 && layer.index() <= self.block_depths()[layer.block() - 1]
    }

    /// `(name, c_out, c_in)` of every 3×3 convolution, in order.
    pub fn architecture(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (b, &depth) in self.block_depths().iter().enumerate() {
            for i in 0..depth {
                out.push((format!("conv{}_{}", b + 1, i + 1), BLOCK_CHANNELS[b], c_in));
                c_in = BLOCK_CHANNELS[b];
            }
        }
        out
    }
}

impl fmt::Display for FenVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FenVariant::Vgg16 => "vgg16",
            FenVariant::Vgg19 => "vgg19",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightsSource {
    PretrainedFile { path: PathBuf },
    RandomSeeded { seed: u64 },
}

impl Default for WeightsSource {
    fn default() -> Self {
        WeightsSource::RandomSeeded { seed: 42 }
    }
}

impl fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightsSource::PretrainedFile { path } => write!(f, "pretrained-file({})", path.display()),
            WeightsSource::RandomSeeded { seed } => write!(f, "random-seeded({seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FenConfig {
    pub variant: FenVariant,
    pub weights: WeightsSource,
    pub content_layers: Vec<FenLayerId>,
    pub domain_layers: Vec<FenLayerId>,
}

impl Default for FenConfig {
    fn default() -> Self {
        Self {
            variant: FenVariant::Vgg16,
            weights: WeightsSource::default(),
            content_layers: vec![FenLayerId::RELU4_1],
            domain_layers: vec![FenLayerId::RELU1_2, FenLayerId::RELU2_2, FenLayerId::RELU3_2, FenLayerId::RELU4_2],
        }
    }
}

impl FenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_layers.is_empty() || self.domain_layers.is_empty() {
            return Err(Error::Config("FEN content_layers and domain_layers must be nonempty".into()));
        }
        for l in self.content_layers.iter().chain(&self.domain_layers) {
            if !self.variant.has_layer(*l) {
                return Err(Error::Config(format!("layer {l} does not exist in {}", self.variant)));
            }
        }
        Ok(())
    }
}

/// Activation of one FEN site, `batch × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub layer: FenLayerId,
}

/// Per-sample `C × C` Gram matrices, `batch × C × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    pub values: Tensor<T>,
    pub layer: FenLayerId,
}

/// Anything that maps an image node to feature nodes at named sites. The
/// losses are written against this so they can be exercised with stubs.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, g: &Graph<T>, images: Var, layers: &[FenLayerId]) -> Result<Vec<Var>>;
}

struct ConvLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// Loaded, immutable feature extractor. Its weights never enter an
/// optimizer: they are recorded as graph constants.
pub struct Fen<T> {
    config: FenConfig,
    /// Indexed `[block][conv]`.
    blocks: Vec<Vec<ConvLayer<T>>>,
}

impl<T: Scalar> Fen<T> {
    pub fn config(&self) -> &FenConfig {
        &self.config
    }

    /// Stable identifier of variant + weights, used to tag embeddings.
    pub fn id(&self) -> String {
        format!("{}:{}", self.config.variant, self.config.weights)
    }

    fn check_input(&self, h: usize, w: usize, layers: &[FenLayerId]) -> Result<()> {
        for l in layers {
            if !self.config.variant.has_layer(*l) {
                return Err(Error::Config(format!("layer {l} does not exist in {}", self.config.variant)));
            }
            let (mut hh, mut ww) = (h, w);
            for _ in 0..l.pools_before() {
                if hh < 2 || ww < 2 {
                    return Err(Error::InputTooSmall {
                        layer: l.to_string(),
                        detail: format!("{h}x{w} input cannot be pooled {} times", l.pools_before()),
                    });
                }
                hh /= 2;
                ww /= 2;
            }
        }
        Ok(())
    }

    /// Tensor-level extraction; one map per requested layer in request order.
    pub fn extract(&self, images: &ImageBatch, layers: &[FenLayerId]) -> Result<Vec<FeatureMap<T>>> {
        self.extract_tensor(&images.tensor().cast(), layers)
    }

    pub fn extract_tensor(&self, images: &Tensor<T>, layers: &[FenLayerId]) -> Result<Vec<FeatureMap<T>>> {
        let g = Graph::new();
        let x = g.constant(images.clone());
        let vars = self.features(&g, x, layers)?;
        Ok(vars.into_iter().zip(layers).map(|(v, &layer)| FeatureMap { values: g.value(v), layer }).collect())
    }
}

impl<T: Scalar> FeatureExtractor<T> for Fen<T> {
    fn features(&self, g: &Graph<T>, images: Var, layers: &[FenLayerId]) -> Result<Vec<Var>> {
        let shape = g.shape(images);
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::Shape(format!("FEN input must be NCHW, got {shape:?}")));
        };
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("FEN input must have 1 or 3 channels, got {c}")));
        }
        self.check_input(h, w, layers)?;
        let deepest = match layers.iter().max() {
            Some(l) => *l,
            None => return Ok(Vec::new()),
        };
        let scale: Vec<T> = IMAGENET_STD.iter().map(|s| T::from_f64_lossy(1.0 / s)).collect();
        let shift: Vec<T> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| T::from_f64_lossy(-m / s)).collect();
        let mut x = g.channel_affine(images, &scale, &shift)?;
        let mut found: Vec<(FenLayerId, Var)> = Vec::with_capacity(layers.len());
        'blocks: for (b, convs) in self.blocks.iter().enumerate() {
            if b > 0 {
                x = g.max_pool2d(x, 2, 2)?;
            }
            for (i, conv) in convs.iter().enumerate() {
                let wv = g.constant(conv.weight.clone());
                let bv = g.constant(conv.bias.clone());
                x = g.relu(g.conv2d(x, wv, Some(bv), 1, (1, 1))?);
                let site = FenLayerId::new(b as u8 + 1, i as u8 + 1);
                if layers.contains(&site) {
                    found.push((site, x));
                }
                if site == deepest {
                    break 'blocks;
                }
            }
        }
        Ok(layers.iter().map(|l| found.iter().find(|(s, _)| s == l).expect("site visited").1).collect())
    }
}

/// Builds the extractor. Random mode draws He-normal weights from a stream
/// keyed by `(seed, layer index)`; file mode validates every tensor against
/// the variant's architecture table.
pub fn load_fen<T: Scalar>(config: &FenConfig) -> Result<Fen<T>> {
    config.validate()?;
    let arch = config.variant.architecture();
    let layers: Vec<ConvLayer<T>> = match &config.weights {
        WeightsSource::RandomSeeded { seed } => arch
            .iter()
            .enumerate()
            .map(|(li, (_, co, ci))| {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let mut r = rng::stream(*seed, &[li as u64, 0x66656e]);
                let data = (0..co * ci * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        T::from_f64_lossy(z * std)
                    })
                    .collect();
                ConvLayer {
                    weight: Tensor::from_vec(&[*co, *ci, 3, 3], data).expect("arch shape"),
                    bias: Tensor::zeros(&[*co]),
                }
            })
            .collect(),
        WeightsSource::PretrainedFile { path } => {
            let archive = Archive::load(path)?;
            let expected: Vec<String> =
                arch.iter().flat_map(|(n, _, _)| [format!("{n}.weight"), format!("{n}.bias")]).collect();
            if let Some(extra) = archive
                .entries()
                .iter()
                .find(|e| e.name.starts_with("conv") && !expected.contains(&e.name))
            {
                return Err(Error::FenManifestMismatch(format!(
                    "{} holds {} which is not part of {}",
                    path.display(),
                    extra.name,
                    config.variant
                )));
            }
            arch.iter()
                .map(|(name, co, ci)| {
                    let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor<T>> {
                        let key = format!("{name}.{suffix}");
                        let entry = archive.entry(&key).ok_or_else(|| {
                            Error::FenManifestMismatch(format!("{} lacks {key} required by {}", path.display(), config.variant))
                        })?;
                        if entry.shape != shape {
                            return Err(Error::FenManifestMismatch(format!(
                                "{key} has shape {:?}, {} expects {shape:?}",
                                entry.shape, config.variant
                            )));
                        }
                        archive
                            .tensor(&key)
                            .ok_or_else(|| Error::FenManifestMismatch(format!("{key} has unsupported dtype")))
                    };
                    Ok(ConvLayer { weight: fetch("weight", &[*co, *ci, 3, 3])?, bias: fetch("bias", &[*co])? })
                })
                .collect::<Result<_>>()?
        }
    };
    let mut blocks = Vec::with_capacity(5);
    let mut it = layers.into_iter();
    for depth in config.variant.block_depths() {
        blocks.push(it.by_ref().take(depth).collect());
    }
    Ok(Fen { config: config.clone(), blocks })
}

/// Writes an extractor's weights in the archive layout `load_fen` accepts.
pub fn save_fen_weights<T: Scalar>(fen: &Fen<T>, path: &std::path::Path) -> Result<()> {
    let mut ar = Archive::new(serde_json::json!({ "variant": fen.config.variant }));
    for ((name, _, _), conv) in fen.config.variant.architecture().iter().zip(fen.blocks.iter().flatten()) {
        ar.push(format!("{name}.weight"), &conv.weight);
        ar.push(format!("{name}.bias"), &conv.bias);
    }
    ar.save(path)
}

/// `F Fᵀ / (C·H·W)` per batch element.
pub fn gram<T: Scalar>(feature: &FeatureMap<T>) -> Result<GramMatrix<T>> {
    let g = Graph::new();
    let x = g.constant(feature.values.clone());
    let m = g.gram(x)?;
    Ok(GramMatrix { values: g.value(m), layer: feature.layer })
}
