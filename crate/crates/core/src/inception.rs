//! InceptionV3 pool-feature embedder in the layout used by FID
//! reference implementations. Every conv carries its batch norm folded into
//! `{name}.weight` `[c_out, c_in, kh, kw]` and `{name}.bias` `[c_out]`.

use std::collections::BTreeMap;
use std::path::Path;

use mdt_tensor::{Graph, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::data::{resize_bilinear, ImageBatch};
use crate::error::{Error, Result};
use crate::rng;

pub const INPUT_SIDE: usize = 299;
pub const POOL_DIM: usize = 2048;
/// Images per forward pass; activations at 299 px are large.
const CHUNK: usize = 4;

#[derive(Clone, Copy)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    k: (usize, usize),
    stride: usize,
    pad: (usize, usize),
}

const fn conv(c_in: usize, c_out: usize, k: (usize, usize), stride: usize, pad: (usize, usize)) -> ConvSpec {
    ConvSpec { c_in, c_out, k, stride, pad }
}

const fn c1(c_in: usize, c_out: usize) -> ConvSpec {
    conv(c_in, c_out, (1, 1), 1, (0, 0))
}

/// Every conv in forward order.
fn architecture() -> Vec<(String, ConvSpec)> {
    let mut a: Vec<(String, ConvSpec)> = vec![
        ("Conv2d_1a_3x3".into(), conv(3, 32, (3, 3), 2, (0, 0))),
        ("Conv2d_2a_3x3".into(), conv(32, 32, (3, 3), 1, (0, 0))),
        ("Conv2d_2b_3x3".into(), conv(32, 64, (3, 3), 1, (1, 1))),
        ("Conv2d_3b_1x1".into(), c1(64, 80)),
        ("Conv2d_4a_3x3".into(), conv(80, 192, (3, 3), 1, (0, 0))),
    ];
    let mut block = |name: &str, convs: Vec<(&str, ConvSpec)>| {
        a.extend(convs.into_iter().map(|(n, s)| (format!("{name}.{n}"), s)));
    };
    for (name, c_in, pool) in [("Mixed_5b", 192, 32), ("Mixed_5c", 256, 64), ("Mixed_5d", 288, 64)] {
        block(
            name,
            vec![
                ("branch1x1", c1(c_in, 64)),
                ("branch5x5_1", c1(c_in, 48)),
                ("branch5x5_2", conv(48, 64, (5, 5), 1, (2, 2))),
                ("branch3x3dbl_1", c1(c_in, 64)),
                ("branch3x3dbl_2", conv(64, 96, (3, 3), 1, (1, 1))),
                ("branch3x3dbl_3", conv(96, 96, (3, 3), 1, (1, 1))),
                ("branch_pool", c1(c_in, pool)),
            ],
        );
    }
    block(
        "Mixed_6a",
        vec![
            ("branch3x3", conv(288, 384, (3, 3), 2, (0, 0))),
            ("branch3x3dbl_1", c1(288, 64)),
            ("branch3x3dbl_2", conv(64, 96, (3, 3), 1, (1, 1))),
            ("branch3x3dbl_3", conv(96, 96, (3, 3), 2, (0, 0))),
        ],
    );
    for (name, c7) in [("Mixed_6b", 128), ("Mixed_6c", 160), ("Mixed_6d", 160), ("Mixed_6e", 192)] {
        block(
            name,
            vec![
                ("branch1x1", c1(768, 192)),
                ("branch7x7_1", c1(768, c7)),
                ("branch7x7_2", conv(c7, c7, (1, 7), 1, (0, 3))),
                ("branch7x7_3", conv(c7, 192, (7, 1), 1, (3, 0))),
                ("branch7x7dbl_1", c1(768, c7)),
                ("branch7x7dbl_2", conv(c7, c7, (7, 1), 1, (3, 0))),
                ("branch7x7dbl_3", conv(c7, c7, (1, 7), 1, (0, 3))),
                ("branch7x7dbl_4", conv(c7, c7, (7, 1), 1, (3, 0))),
                ("branch7x7dbl_5", conv(c7, 192, (1, 7), 1, (0, 3))),
                ("branch_pool", c1(768, 192)),
            ],
        );
    }
    block(
        "Mixed_7a",
        vec![
            ("branch3x3_1", c1(768, 192)),
            ("branch3x3_2", conv(192, 320, (3, 3), 2, (0, 0))),
            ("branch7x7x3_1", c1(768, 192)),
            ("branch7x7x3_2", conv(192, 192, (1, 7), 1, (0, 3))),
            ("branch7x7x3_3", conv(192, 192, (7, 1), 1, (3, 0))),
            ("branch7x7x3_4", conv(192, 192, (3, 3), 2, (0, 0))),
        ],
    );
    for (name, c_in) in [("Mixed_7b", 1280), ("Mixed_7c", 2048)] {
        block(
            name,
            vec![
                ("branch1x1", c1(c_in, 320)),
                ("branch3x3_1", c1(c_in, 384)),
                ("branch3x3_2a", conv(384, 384, (1, 3), 1, (0, 1))),
                ("branch3x3_2b", conv(384, 384, (3, 1), 1, (1, 0))),
                ("branch3x3dbl_1", c1(c_in, 448)),
                ("branch3x3dbl_2", conv(448, 384, (3, 3), 1, (1, 1))),
                ("branch3x3dbl_3a", conv(384, 384, (1, 3), 1, (0, 1))),
                ("branch3x3dbl_3b", conv(384, 384, (3, 1), 1, (1, 0))),
                ("branch_pool", c1(c_in, 192)),
            ],
        );
    }
    a
}

struct Layer {
    spec: ConvSpec,
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

pub struct InceptionV3 {
    layers: BTreeMap<String, Layer>,
    digest: String,
}

fn weight_shape(s: &ConvSpec) -> [usize; 4] {
    [s.c_out, s.c_in, s.k.0, s.k.1]
}

impl InceptionV3 {
    /// Loads folded weights, rejecting missing, extra or misshapen tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let archive = Archive::from_bytes(&bytes, path)?;
        let arch = architecture();
        let mismatch = |reason: String| Error::Archive { path: path.to_path_buf(), reason };
        let known: std::collections::BTreeSet<String> =
            arch.iter().flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")]).collect();
        if let Some(extra) = archive.entries().iter().find(|e| !known.contains(&e.name)) {
            return Err(mismatch(format!("unexpected tensor {} for InceptionV3", extra.name)));
        }
        let mut layers = BTreeMap::new();
        for (name, spec) in arch {
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor<f32>> {
                let key = format!("{name}.{suffix}");
                let e = archive.entry(&key).ok_or_else(|| mismatch(format!("missing {key}")))?;
                if e.shape != shape {
                    return Err(mismatch(format!("{key} has shape {:?}, expected {shape:?}", e.shape)));
                }
                archive.tensor(&key).ok_or_else(|| mismatch(format!("{key} has unsupported dtype {}", e.dtype)))
            };
            let weight = fetch("weight", &weight_shape(&spec))?;
            let bias = fetch("bias", &[spec.c_out])?;
            layers.insert(name, Layer { spec, weight, bias });
        }
        Ok(Self { layers, digest: crate::train::hex(&Sha256::digest(&bytes))[..16].to_string() })
    }

    /// He-initialized weights; stands in where no pretrained file exists.
    pub fn random(seed: u64) -> Self {
        let mut layers = BTreeMap::new();
        for (name, spec) in architecture() {
            let fan_in = spec.c_in * spec.k.0 * spec.k.1;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut r = rng::stream(seed, &[rng::hash_str(&name)]);
            let shape = weight_shape(&spec);
            let data = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    (z * std) as f32
                })
                .collect();
            let weight = Tensor::from_vec(&shape, data).expect("arch shape");
            layers.insert(name, Layer { spec, weight, bias: Tensor::zeros(&[spec.c_out]) });
        }
        Self { layers, digest: format!("random-{seed}") }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new(serde_json::json!({ "network": "inception_v3_fid" }));
        for (name, _) in architecture() {
            let l = &self.layers[&name];
            ar.push(format!("{name}.weight"), &l.weight);
            ar.push(format!("{name}.bias"), &l.bias);
        }
        ar.save(path)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// `[n, 2048]` pool features. Inputs in `[0, 1]` are resized to
    /// 299×299, replicated to three channels and scaled to `[-1, 1]`.
    pub fn pool_features(&self, images: &ImageBatch) -> Result<Tensor<f32>> {
        let mut parts = Vec::new();
        for chunk in images.unstack().chunks(CHUNK) {
            parts.push(self.forward(&ImageBatch::stack(chunk)?)?);
        }
        Ok(Tensor::cat0(&parts)?)
    }

    fn forward(&self, images: &ImageBatch) -> Result<Tensor<f32>> {
        let gray = images.to_gray();
        let (h, w) = gray.size();
        let n = gray.batch();
        let mut data = Vec::with_capacity(n * 3 * INPUT_SIDE * INPUT_SIDE);
        for i in 0..n {
            let plane: Vec<f32> =
                resize_bilinear(gray.plane(i, 0), h, w, INPUT_SIDE, INPUT_SIDE).into_iter().map(|v| 2.0 * v - 1.0).collect();
            for _ in 0..3 {
                data.extend_from_slice(&plane);
            }
        }
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[n, 3, INPUT_SIDE, INPUT_SIDE], data)?);
        let cv = |name: &str, x: Var| -> Result<Var> {
            let l = &self.layers[name];
            let w = g.constant(l.weight.clone());
            let b = g.constant(l.bias.clone());
            Ok(g.relu(g.conv2d(x, w, Some(b), l.spec.stride, l.spec.pad)?))
        };
        let chain = |names: &[&str], x: Var, block: &str| -> Result<Var> {
            names.iter().try_fold(x, |h, n| cv(&format!("{block}.{n}"), h))
        };
        let mut x = cv("Conv2d_1a_3x3", x)?;
        x = cv("Conv2d_2a_3x3", x)?;
        x = cv("Conv2d_2b_3x3", x)?;
        x = g.max_pool2d(x, 3, 2)?;
        x = cv("Conv2d_3b_1x1", x)?;
        x = cv("Conv2d_4a_3x3", x)?;
        x = g.max_pool2d(x, 3, 2)?;
        for b in ["Mixed_5b", "Mixed_5c", "Mixed_5d"] {
            let p = g.avg_pool2d(x, 3, 1, 1)?;
            x = g.concat_channels(&[
                chain(&["branch1x1"], x, b)?,
                chain(&["branch5x5_1", "branch5x5_2"], x, b)?,
                chain(&["branch3x3dbl_1", "branch3x3dbl_2", "branch3x3dbl_3"], x, b)?,
                chain(&["branch_pool"], p, b)?,
            ])?;
        }
        x = g.concat_channels(&[
            chain(&["branch3x3"], x, "Mixed_6a")?,
            chain(&["branch3x3dbl_1", "branch3x3dbl_2", "branch3x3dbl_3"], x, "Mixed_6a")?,
            g.max_pool2d(x, 3, 2)?,
        ])?;
        for b in ["Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e"] {
            let p = g.avg_pool2d(x, 3, 1, 1)?;
            x = g.concat_channels(&[
                chain(&["branch1x1"], x, b)?,
                chain(&["branch7x7_1", "branch7x7_2", "branch7x7_3"], x, b)?,
                chain(
                    &["branch7x7dbl_1", "branch7x7dbl_2", "branch7x7dbl_3", "branch7x7dbl_4", "branch7x7dbl_5"],
                    x,
                    b,
                )?,
                chain(&["branch_pool"], p, b)?,
            ])?;
        }
        x = g.concat_channels(&[
            chain(&["branch3x3_1", "branch3x3_2"], x, "Mixed_7a")?,
            chain(&["branch7x7x3_1", "branch7x7x3_2", "branch7x7x3_3", "branch7x7x3_4"], x, "Mixed_7a")?,
            g.max_pool2d(x, 3, 2)?,
        ])?;
        for b in ["Mixed_7b", "Mixed_7c"] {
            // The final block pools with a max instead of an average.
            let p = if b == "Mixed_7c" { g.constant(max_pool_same3(&g.value(x))?) } else { g.avg_pool2d(x, 3, 1, 1)? };
            let t = chain(&["branch3x3_1"], x, b)?;
            let d = chain(&["branch3x3dbl_1", "branch3x3dbl_2"], x, b)?;
            x = g.concat_channels(&[
                chain(&["branch1x1"], x, b)?,
                chain(&["branch3x3_2a"], t, b)?,
                chain(&["branch3x3_2b"], t, b)?,
                chain(&["branch3x3dbl_3a"], d, b)?,
                chain(&["branch3x3dbl_3b"], d, b)?,
                chain(&["branch_pool"], p, b)?,
            ])?;
        }
        let pooled = g.global_avg_pool(x)?;
        Ok(g.value(pooled))
    }
}

/// 3×3 max pooling, stride 1, padding 1 (padding never wins).
fn max_pool_same3(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.as_slice();
    let mut out = vec![0.0f32; src.len()];
    for (dst, plane) in out.chunks_exact_mut(h * w).zip(src.chunks_exact(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let mut m = f32::NEG_INFINITY;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xs in xx.saturating_sub(1)..(xx + 2).min(w) {
                        m = m.max(plane[yy * w + xs]);
                    }
                }
                dst[y * w + xx] = m;
            }
        }
    }
    Ok(Tensor::from_vec(&[n, c, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_plan_is_consistent() {
        let arch = architecture();
        assert_eq!(arch.len(), 94);
        let total: usize = arch.iter().map(|(_, s)| s.c_out * (s.c_in * s.k.0 * s.k.1 + 1)).sum();
        assert!(total > 21_000_000 && total < 22_000_000, "{total}");
    }

    #[test]
    fn padded_max_pool_keeps_borders() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, -4.0]).unwrap();
        assert_eq!(max_pool_same3(&t).unwrap().as_slice(), &[3.0; 4]);
    }
}
