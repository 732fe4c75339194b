//! Image batches, directory-per-domain datasets and the synthetic
//! multi-domain retina generator.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};
use mdt_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Smallest spatial size accepted by the loaders and the generator.
pub const MIN_SIDE: usize = 32;
/// Both spatial dims must be multiples of this.
pub const SIDE_MULTIPLE: usize = 4;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// `batch × channels × height × width` pixels in `[0, 1]`, channels 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = pixels.dims4()?;
        if n == 0 {
            return Err(Error::Shape("image batch is empty".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("images must have 1 or 3 channels, got {c}")));
        }
        if h % SIDE_MULTIPLE != 0 || w % SIDE_MULTIPLE != 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not divisible by {SIDE_MULTIPLE}")));
        }
        if let Some(v) = pixels.as_slice().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Single grayscale image from a row-major plane.
    pub fn from_gray(height: usize, width: usize, plane: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[1, 1, height, width], plane)?)
    }

    pub fn stack(images: &[ImageBatch]) -> Result<Self> {
        let parts: Vec<Tensor<f32>> = images.iter().map(|b| b.pixels.clone()).collect();
        Self::new(Tensor::cat0(&parts)?)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.pixels
    }

    pub fn batch(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, index: usize) -> Result<ImageBatch> {
        Ok(Self { pixels: self.pixels.narrow0(index, 1)? })
    }

    /// Splits into single-image batches.
    pub fn unstack(&self) -> Vec<ImageBatch> {
        (0..self.batch()).map(|i| self.get(i).expect("index within batch")).collect()
    }

    /// Channel `c` of image `n` as a row-major plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let (h, w) = self.size();
        let ch = self.channels();
        &self.pixels.as_slice()[(n * ch + c) * h * w..(n * ch + c + 1) * h * w]
    }

    /// Rec. 601 luma for 3-channel batches; 1-channel batches are returned as-is.
    pub fn to_gray(&self) -> ImageBatch {
        if self.channels() == 1 {
            return self.clone();
        }
        let (h, w) = self.size();
        let mut out = Vec::with_capacity(self.batch() * h * w);
        for n in 0..self.batch() {
            let (r, g, b) = (self.plane(n, 0), self.plane(n, 1), self.plane(n, 2));
            out.extend((0..h * w).map(|i| (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).clamp(0.0, 1.0)));
        }
        Self { pixels: Tensor::from_vec(&[self.batch(), 1, h, w], out).expect("consistent shape") }
    }
}

/// Integer label map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// One domain of a corpus: a named, ordered list of image files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    pub image_paths: Vec<PathBuf>,
    pub count: usize,
}

impl DomainDataset {
    pub fn new(domain_id: usize, name: impl Into<String>, image_paths: Vec<PathBuf>) -> Self {
        let count = image_paths.len();
        Self { domain_id, name: name.into(), image_paths, count }
    }

    /// Restricts to `range` of the sorted image list, keeping id and name.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self::new(self.domain_id, self.name.clone(), self.image_paths[range].to_vec())
    }

    /// Directory holding this domain's masks, if the corpus was exported with them.
    pub fn mask_paths(&self, image: &Path) -> Option<(PathBuf, PathBuf)> {
        let dir = image.parent()?.join("masks");
        let stem = image.file_stem()?.to_string_lossy().to_string();
        let structure = dir.join(format!("{stem}.png"));
        let fluid = dir.join(format!("{stem}_fluid.png"));
        (structure.is_file() && fluid.is_file()).then_some((structure, fluid))
    }
}

/// Appearance parameters of one synthetic domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    #[serde(default)]
    pub speckle_sigma: f64,
    #[serde(default = "one")]
    pub contrast_gamma: f64,
    #[serde(default)]
    pub brightness_offset: f64,
    #[serde(default)]
    pub blur_radius: f64,
    #[serde(default = "one")]
    pub band_intensity_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self::neutral()
    }
}

impl DomainStyle {
    /// No noise, no blur, identity tone curve.
    pub fn neutral() -> Self {
        Self { speckle_sigma: 0.0, contrast_gamma: 1.0, brightness_offset: 0.0, blur_radius: 0.0, band_intensity_scale: 1.0 }
    }

    /// The three stock vendor-like appearances used by `synth`.
    pub fn default_set() -> Vec<DomainStyle> {
        vec![
            DomainStyle { speckle_sigma: 0.05, ..Self::neutral() },
            DomainStyle { speckle_sigma: 0.20, contrast_gamma: 0.7, blur_radius: 1.0, ..Self::neutral() },
            DomainStyle { speckle_sigma: 0.10, contrast_gamma: 1.4, brightness_offset: 0.1, ..Self::neutral() },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.speckle_sigma,
            self.contrast_gamma,
            self.brightness_offset,
            self.blur_radius,
            self.band_intensity_scale,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("domain style fields must be finite".into()));
        }
        if self.speckle_sigma < 0.0 || self.blur_radius < 0.0 {
            return Err(Error::Argument("speckle_sigma and blur_radius must be >= 0".into()));
        }
        if self.contrast_gamma <= 0.0 || self.band_intensity_scale <= 0.0 {
            return Err(Error::Argument("contrast_gamma and band_intensity_scale must be > 0".into()));
        }
        if !(-0.3..=0.3).contains(&self.brightness_offset) {
            return Err(Error::Argument("brightness_offset must lie in [-0.3, 0.3]".into()));
        }
        Ok(())
    }

    /// Stable digest of the parameters; keys the noise stream.
    pub fn digest(&self) -> u64 {
        [self.speckle_sigma, self.contrast_gamma, self.brightness_offset, self.blur_radius, self.band_intensity_scale]
            .iter()
            .fold(0x243F_6A88_85A3_08D3, |h, v| rng::splitmix64(h ^ v.to_bits()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageBatch,
    /// Layer index per pixel, 0 = background.
    pub structure_mask: LabelMap,
    /// 1 inside fluid pockets.
    pub fluid_mask: LabelMap,
}

// ---------------------------------------------------------------------------
// Dataset ingestion

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// One dataset per immediate subdirectory of `root`, ids in name order.
pub fn scan_dataset(root: &Path) -> Result<Vec<DomainDataset>> {
    if !root.is_dir() {
        return Err(Error::DatasetRootNotFound(root.to_path_buf()));
    }
    let read = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
            let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            out.push(entry.path());
        }
        out.sort();
        Ok(out)
    };
    let mut dirs: Vec<PathBuf> = read(root)?
        .into_iter()
        .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    dirs.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    let mut out = Vec::with_capacity(dirs.len());
    for (id, dir) in dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let images: Vec<PathBuf> = read(dir)?.into_iter().filter(|p| is_image_file(p)).collect();
        if images.is_empty() {
            return Err(Error::EmptyDomain(name));
        }
        out.push(DomainDataset::new(id, name, images));
    }
    Ok(out)
}

pub fn check_size(size: (usize, usize)) -> Result<()> {
    let (h, w) = size;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Argument(format!("image size {h}x{w} is below the {MIN_SIDE}px minimum")));
    }
    if h % SIDE_MULTIPLE != 0 || w % SIDE_MULTIPLE != 0 {
        return Err(Error::Argument(format!("image size {h}x{w} must be divisible by {SIDE_MULTIPLE}")));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centers; identity when sizes agree.
pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return plane.to_vec();
    }
    let coords = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..ow).map(|x| coords(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coords(y, h, oh);
        for &(x0, x1, fx) in &cols {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Decodes an 8- or 16-bit raster, scales to `[0, 1]` by the format maximum
/// and resizes bilinearly to `size`. Grayscale stays single-channel.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<ImageBatch> {
    check_size(size)?;
    let decode_err = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let img = image::ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<f32>> = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            vec![img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()]
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            vec![img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()]
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            split_rgb(img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0), h * w)
        }
        _ => split_rgb(img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0), h * w),
    };
    let (oh, ow) = size;
    let mut data = Vec::with_capacity(planes.len() * oh * ow);
    for p in &planes {
        data.extend(resize_bilinear(p, h, w, oh, ow).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    ImageBatch::new(Tensor::from_vec(&[1, planes.len(), oh, ow], data)?)
}

/// `(height, width)` of an image file without decoding its pixels.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok((h as usize, w as usize))
}

fn split_rgb(interleaved: impl Iterator<Item = f32>, pixels: usize) -> Vec<Vec<f32>> {
    let mut planes = vec![Vec::with_capacity(pixels); 3];
    for (i, v) in interleaved.enumerate() {
        planes[i % 3].push(v);
    }
    planes
}

/// Loads `paths` as grayscale on `workers` threads, preserving order.
pub fn load_gray_images(paths: &[PathBuf], size: (usize, usize), workers: usize) -> Result<Vec<ImageBatch>> {
    let workers = workers.max(1).min(paths.len().max(1));
    if workers == 1 {
        return paths.iter().map(|p| Ok(load_image(p, size)?.to_gray())).collect();
    }
    let chunk = paths.len().div_ceil(workers);
    let results: Vec<Result<Vec<ImageBatch>>> = std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| Ok(load_image(p, size)?.to_gray())).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(paths.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// `batch` indices drawn uniformly with replacement from `0..count`.
pub fn sample_indices(count: usize, batch: usize, rng_seed: u64) -> Vec<usize> {
    let mut r = rng::stream(rng_seed, &[count as u64]);
    (0..batch).map(|_| r.random_range(0..count)).collect()
}

/// Draws a grayscale batch from `dataset`; deterministic in `rng_seed`.
pub fn sample_batch(dataset: &DomainDataset, batch: usize, rng_seed: u64, size: (usize, usize)) -> Result<ImageBatch> {
    if batch == 0 {
        return Err(Error::Argument("batch must be >= 1".into()));
    }
    if dataset.count == 0 {
        return Err(Error::EmptyDomain(dataset.name.clone()));
    }
    let images = sample_indices(dataset.count, batch, rng_seed)
        .into_iter()
        .map(|i| Ok(load_image(&dataset.image_paths[i], size)?.to_gray()))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::stack(&images)
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Style-independent layout of one synthetic B-scan.
struct Geometry {
    structure: LabelMap,
    fluid: LabelMap,
    /// Base intensity per label (index 0 = background).
    band_intensity: Vec<f64>,
}

const FLUID_INTENSITY: f64 = 0.03;

fn build_geometry(seed: u64, index: usize, h: usize, w: usize) -> Geometry {
    let mut r = rng::stream(seed, &[index as u64, 0x6e6f_6d65]);
    let (hf, wf) = (h as f64, w as f64);
    let n_bands: usize = r.random_range(4..=7);
    let top = hf * r.random_range(0.18..0.30);
    let thickness = hf * r.random_range(0.48..0.62);
    let weights: Vec<f64> = (0..n_bands).map(|_| r.random_range(0.7..1.3)).collect();
    let total: f64 = weights.iter().sum();
    // boundary k is the top edge of band k; the last band runs to the bottom
    let mut base = Vec::with_capacity(n_bands);
    let mut acc = top;
    for wk in &weights {
        base.push(acc);
        acc += thickness * wk / total;
    }
    let min_gap = (0..n_bands - 1).map(|k| base[k + 1] - base[k]).fold(f64::INFINITY, f64::min);
    let curve_amp = hf * r.random_range(0.0..0.06);
    let curve_freq = r.random_range(0.5..1.5);
    let curve_phase = r.random_range(0.0..2.0 * PI);
    let wiggle: Vec<(f64, f64, f64)> = (0..n_bands)
        .map(|_| {
            (
                r.random_range(0.0..0.35) * min_gap.min(hf * 0.04),
                r.random_range(1.0..3.0),
                r.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let boundary = |k: usize, x: f64| -> f64 {
        let u = x / wf;
        let (a, f, p) = wiggle[k];
        base[k] + curve_amp * (2.0 * PI * curve_freq * u + curve_phase).sin() + a * (2.0 * PI * f * u + p).sin()
    };

    let mut band_intensity = vec![r.random_range(0.03..0.08)];
    for j in 0..n_bands {
        band_intensity.push(if j % 2 == 0 { r.random_range(0.55..0.85) } else { r.random_range(0.20..0.38) });
    }

    let mut structure = vec![0u8; h * w];
    for x in 0..w {
        let xc = x as f64 + 0.5;
        let edges: Vec<f64> = (0..n_bands).map(|k| boundary(k, xc)).collect();
        for y in 0..h {
            let yc = y as f64 + 0.5;
            let band = edges.iter().take_while(|&&e| yc >= e).count();
            structure[y * w + x] = band as u8;
        }
    }

    let mut fluid = vec![0u8; h * w];
    let n_blobs: usize = r.random_range(0..=3);
    for _ in 0..n_blobs {
        let band = r.random_range(0..n_bands - 1);
        let cx = wf * r.random_range(0.15..0.85);
        let upper = boundary(band, cx);
        let lower = boundary(band + 1, cx);
        let cy = 0.5 * (upper + lower);
        let ry = (0.5 * (lower - upper) - 0.75).max(1.0) * r.random_range(0.6..1.0);
        let rx = wf * r.random_range(0.05..0.12);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let i = y * w + x;
                if dx * dx + dy * dy <= 1.0 && structure[i] as usize == band + 1 {
                    fluid[i] = 1;
                }
            }
        }
    }
    Geometry {
        structure: LabelMap { height: h, width: w, labels: structure },
        fluid: LabelMap { height: h, width: w, labels: fluid },
        band_intensity,
    }
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * w + clampi(x as isize + i as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clampi(y as isize + i as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

fn render(geometry: &Geometry, style: &DomainStyle, noise_seed: u64) -> Vec<f32> {
    let (h, w) = (geometry.structure.height, geometry.structure.width);
    let mut plane: Vec<f64> = geometry
        .structure
        .labels
        .iter()
        .zip(&geometry.fluid.labels)
        .map(|(&label, &fluid)| {
            let base = if fluid == 1 {
                FLUID_INTENSITY
            } else if label == 0 {
                geometry.band_intensity[0]
            } else {
                geometry.band_intensity[label as usize] * style.band_intensity_scale
            };
            base.clamp(0.0, 1.0).powf(style.contrast_gamma)
        })
        .collect();
    plane = gaussian_blur(&plane, h, w, style.blur_radius);
    let mut r = rng::stream(noise_seed, &[]);
    let speckle = Normal::new(1.0, style.speckle_sigma).expect("validated sigma");
    plane
        .into_iter()
        .map(|v| {
            let n = if style.speckle_sigma > 0.0 { speckle.sample(&mut r) } else { 1.0 };
            ((v + style.brightness_offset) * n).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Deterministic synthetic B-scans. Geometry depends only on
/// `(geometry_seed, i)`; the style only changes appearance.
pub fn generate_synthetic(
    geometry_seed: u64,
    style: &DomainStyle,
    count: usize,
    size: (usize, usize),
) -> Result<Vec<SyntheticSample>> {
    if count < 1 {
        return Err(Error::Argument("count must be >= 1".into()));
    }
    check_size(size)?;
    style.validate()?;
    let (h, w) = size;
    (0..count)
        .map(|i| {
            let geometry = build_geometry(geometry_seed, i, h, w);
            let noise_seed = rng::derive_seed(geometry_seed, &[i as u64, style.digest()]);
            let pixels = render(&geometry, style, noise_seed);
            Ok(SyntheticSample {
                image: ImageBatch::from_gray(h, w, pixels)?,
                structure_mask: geometry.structure,
                fluid_mask: geometry.fluid,
            })
        })
        .collect()
}

/// Quantizes to 8 bits and writes a grayscale PNG.
pub fn save_gray_png(path: &Path, plane: &[f32], height: usize, width: usize) -> Result<()> {
    let bytes: Vec<u8> = plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_u8_png(path, bytes, height, width)
}

pub fn save_u8_png(path: &Path, bytes: Vec<u8>, height: usize, width: usize) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape(format!("{} bytes do not form a {height}x{width} image", width * height)))?;
    img.save(path).map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let g = img.to_luma8();
    Ok(LabelMap { height: g.height() as usize, width: g.width() as usize, labels: g.into_raw() })
}

/// Writes `samples` as `<dir>/img_NNNN.png` plus `masks/img_NNNN.png`
/// (structure labels) and `masks/img_NNNN_fluid.png` (0/255).
pub fn export_samples(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let masks = dir.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(format!("creating {}", masks.display()), e))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("img_{i:04}");
        let (h, w) = s.image.size();
        save_gray_png(&dir.join(format!("{stem}.png")), s.image.plane(0, 0), h, w)?;
        save_u8_png(&masks.join(format!("{stem}.png")), s.structure_mask.labels.clone(), h, w)?;
        let fluid = s.fluid_mask.labels.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
        save_u8_png(&masks.join(format!("{stem}_fluid.png")), fluid, h, w)?;
    }
    Ok(())
}

/// Directory name of synthetic domain `d`; zero-padded so name order is id order.
pub fn synthetic_domain_name(d: usize) -> String {
    format!("domain_{d:02}")
}

/// Writes a full synthetic corpus under `root`. Domain `d` uses style
/// `styles[d]` and its own geometry seed, so domains share no anatomy.
pub fn synthesize_corpus(
    root: &Path,
    styles: &[DomainStyle],
    per_domain: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<Vec<SyntheticSample>>> {
    if styles.is_empty() {
        return Err(Error::Argument("need at least one domain".into()));
    }
    let mut all = Vec::with_capacity(styles.len());
    for (d, style) in styles.iter().enumerate() {
        let samples = generate_synthetic(rng::derive_seed(seed, &[d as u64]), style, per_domain, size)?;
        export_samples(&root.join(synthetic_domain_name(d)), &samples)?;
        all.push(samples);
    }
    Ok(all)
}

/// Structure labels with fluid pockets folded in as their own label, the
/// map whose boundaries the anatomy-consistency score compares against.
pub fn combined_labels(structure: &LabelMap, fluid: &LabelMap) -> LabelMap {
    let labels = structure.labels.iter().zip(&fluid.labels).map(|(&s, &f)| if f > 0 { 255 } else { s }).collect();
    LabelMap { height: structure.height, width: structure.width, labels }
}
