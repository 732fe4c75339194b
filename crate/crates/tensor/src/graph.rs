use std::cell::RefCell;

use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::{norm, pool};
use crate::scalar::gemm;
use crate::{Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry },
    Relu { x: Var },
    InstanceNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<T>, rstd: Vec<T> },
    Add { a: Var, b: Var },
    ConcatChannels { parts: Vec<(Var, usize)> },
    Upsample { x: Var, factor: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, kernel: usize, stride: usize, pad: usize },
    GlobalAvgPool { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    ChannelAffine { x: Var, scale: Vec<T> },
    Gram { x: Var },
    Mse { a: Var, b: Var },
    Combine { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run tape. Every op appends a node holding its value; nodes that
/// depend on a parameter leaf are differentiated by [`Graph::backward`].
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every parameter leaf that
/// contributed to it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<R>(msg: String) -> Result<R, TensorError> {
    Err(TensorError::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// 2-D convolution with zero padding. `weight` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (value, geo) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[weight.0].value;
            let (n, c, h, w) = xv.dims4()?;
            let (co, ci, kh, kw) = wv.dims4()?;
            if ci != c {
                return shape_err(format!("conv2d: input has {c} channels, weight expects {ci}"));
            }
            if stride == 0 || h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
                return shape_err(format!("conv2d: kernel {kh}x{kw} does not fit input {h}x{w}"));
            }
            if let Some(b) = bias {
                if nodes[b.0].value.numel() != co {
                    return shape_err(format!("conv2d: bias must have {co} elements"));
                }
            }
            let geo = ConvGeometry { c_in: c, h, w, c_out: co, kh, kw, stride, pad_h: pad.0, pad_w: pad.1 };
            let (oh, ow) = geo.out_hw();
            let mut y = vec![T::zero(); n * co * oh * ow];
            conv::forward(
                xv.as_slice(),
                n,
                &geo,
                wv.as_slice(),
                bias.map(|b| nodes[b.0].value.as_slice()),
                &mut y,
            );
            (Tensor::from_vec(&[n, co, oh, ow], y)?, geo)
        };
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Conv2d { x, w: weight, b: bias, geo }, ng))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu { x }, ng)
    }

    /// Instance normalization over each `(n, c)` plane with optional affine.
    pub fn instance_norm(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
    ) -> Result<Var, TensorError> {
        let (value, mean, rstd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            for p in [gamma, beta].into_iter().flatten() {
                if nodes[p.0].value.numel() != c {
                    return shape_err(format!("instance_norm: affine params must have {c} elements"));
                }
            }
            let mut y = vec![T::zero(); xv.numel()];
            let mut mean = vec![T::zero(); n * c];
            let mut rstd = vec![T::zero(); n * c];
            norm::instance_norm_forward(
                xv.as_slice(),
                c,
                h * w,
                gamma.map(|g| nodes[g.0].value.as_slice()),
                beta.map(|b| nodes[b.0].value.as_slice()),
                eps,
                &mut y,
                &mut mean,
                &mut rstd,
            );
            (Tensor::from_vec(xv.shape(), y)?, mean, rstd)
        };
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::InstanceNorm { x, gamma, beta, mean, rstd }, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return shape_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
            }
            let data = av.as_slice().iter().zip(bv.as_slice()).map(|(&p, &q)| p + q).collect();
            Tensor::from_vec(av.shape(), data)?
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, ng))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let (value, meta) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts.first().ok_or_else(|| TensorError::Shape("concat of nothing".into()))?.0]
                .value
                .dims4()?;
            let (n, _, h, w) = first;
            let mut meta = Vec::with_capacity(parts.len());
            for p in parts {
                let (pn, pc, ph, pw) = nodes[p.0].value.dims4()?;
                if (pn, ph, pw) != (n, h, w) {
                    return shape_err(format!("concat_channels: {:?} vs {:?}", nodes[p.0].value.shape(), first));
                }
                meta.push((*p, pc));
            }
            let total: usize = meta.iter().map(|m| m.1).sum();
            let plane = h * w;
            let mut y = Vec::with_capacity(n * total * plane);
            for b in 0..n {
                for &(p, pc) in &meta {
                    let src = nodes[p.0].value.as_slice();
                    y.extend_from_slice(&src[b * pc * plane..(b + 1) * pc * plane]);
                }
            }
            (Tensor::from_vec(&[n, total, h, w], y)?, meta)
        };
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatChannels { parts: meta }, ng))
    }

    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            let mut y = vec![T::zero(); n * c * h * w * factor * factor];
            pool::upsample_nearest_forward(xv.as_slice(), n * c, h, w, factor, &mut y);
            Tensor::from_vec(&[n, c, h * factor, w * factor], y)?
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, ng))
    }

    /// Max pooling with square window and no padding.
    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            if h < kernel || w < kernel {
                return shape_err(format!("max_pool2d: window {kernel} exceeds input {h}x{w}"));
            }
            let oh = pool::pooled_len(h, kernel, stride, 0);
            let ow = pool::pooled_len(w, kernel, stride, 0);
            let mut y = vec![T::zero(); n * c * oh * ow];
            let mut argmax = vec![0u32; y.len()];
            pool::max_pool_forward(xv.as_slice(), n * c, h, w, kernel, stride, &mut y, &mut argmax);
            (Tensor::from_vec(&[n, c, oh, ow], y)?, argmax)
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, ng))
    }

    /// Average pooling; padded cells are excluded from each window's count.
    pub fn avg_pool2d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            if h + 2 * pad < kernel || w + 2 * pad < kernel || pad >= kernel {
                return shape_err(format!("avg_pool2d: window {kernel} invalid for input {h}x{w}"));
            }
            let oh = pool::pooled_len(h, kernel, stride, pad);
            let ow = pool::pooled_len(w, kernel, stride, pad);
            let mut y = vec![T::zero(); n * c * oh * ow];
            pool::avg_pool_forward(xv.as_slice(), n * c, h, w, kernel, stride, pad, &mut y);
            Tensor::from_vec(&[n, c, oh, ow], y)?
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::AvgPool { x, kernel, stride, pad }, ng))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            let inv = T::one() / T::from_usize(h * w).unwrap();
            let y = xv.as_slice().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            Tensor::from_vec(&[n, c], y)?
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool { x }, ng))
    }

    /// Element-wise clamp; gradient passes only where `lo < x < hi`.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(|v| v.max(lo).min(hi));
        let ng = self.ng(&[x]);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    /// Per-output-channel `y_c = x_c' * scale[c] + shift[c]`, where `c' = c`
    /// or `c' = 0` when the input has a single channel (broadcast).
    pub fn channel_affine(&self, x: Var, scale: &[T], shift: &[T]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            let co = scale.len();
            if shift.len() != co || (c != co && c != 1) {
                return shape_err(format!("channel_affine: {c} input channels, {co} affine channels"));
            }
            let plane = h * w;
            let src = xv.as_slice();
            let mut y = Vec::with_capacity(n * co * plane);
            for b in 0..n {
                for k in 0..co {
                    let ci = if c == 1 { 0 } else { k };
                    let p = &src[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                    y.extend(p.iter().map(|&v| v * scale[k] + shift[k]));
                }
            }
            Tensor::from_vec(&[n, co, h, w], y)?
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::ChannelAffine { x, scale: scale.to_vec() }, ng))
    }

    /// Per-sample Gram matrix `F Fᵀ / (C·H·W)`, `[n, c, h, w] -> [n, c, c]`.
    pub fn gram(&self, x: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.dims4()?;
            let p = h * w;
            let norm = T::one() / T::from_usize(c * p).unwrap();
            let mut y = vec![T::zero(); n * c * c];
            for b in 0..n {
                let f = &xv.as_slice()[b * c * p..(b + 1) * c * p];
                let g = &mut y[b * c * c..(b + 1) * c * c];
                gemm(c, p, c, norm, f, false, f, true, T::zero(), g);
                symmetrize(g, c);
            }
            Tensor::from_vec(&[n, c, c], y)?
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Gram { x }, ng))
    }

    /// Mean squared difference over all elements; returns a 1-element tensor.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return shape_err(format!("mse: {:?} vs {:?}", av.shape(), bv.shape()));
            }
            let s: f64 = av.as_slice().iter().zip(bv.as_slice()).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum();
            Tensor::scalar(T::from_f64_lossy(s / av.numel() as f64))
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, ng))
    }

    /// Weighted sum of 1-element tensors.
    pub fn combine(&self, terms: &[(Var, T)]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut s = 0.0f64;
            for &(v, k) in terms {
                let t = &nodes[v.0].value;
                if t.numel() != 1 {
                    return shape_err(format!("combine: term has shape {:?}", t.shape()));
                }
                s += (t.item() * k).as_f64();
            }
            Tensor::scalar(T::from_f64_lossy(s))
        };
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        Ok(self.push(value, Op::Combine { terms: terms.to_vec() }, ng))
    }

    /// Reverse-mode pass from a 1-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", nodes[loss.0].value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &dy, &mut grads);
        }
        // Keep only parameter leaves.
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn symmetrize<T: Scalar>(g: &mut [T], c: usize) {
    let half = T::from_f64_lossy(0.5);
    for i in 0..c {
        for j in i + 1..c {
            let s = (g[i * c + j] + g[j * c + i]) * half;
            g[i * c + j] = s;
            g[j * c + i] = s;
        }
    }
}

/// Adds `delta` into the gradient slot of `v` (only if `v` needs it).
fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    vec![T::zero(); t.numel()]
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].needs_grad;
    let g = dy.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geo } => {
            let xv = val(*x);
            let n = xv.shape()[0];
            let mut dx = wants(*x).then(|| zeros_like(xv));
            let mut dw = wants(*w).then(|| zeros_like(val(*w)));
            let mut db = b.filter(|b| wants(*b)).map(|b| zeros_like(val(b)));
            conv::backward(
                xv.as_slice(),
                n,
                geo,
                val(*w).as_slice(),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            if let Some(d) = dw {
                accumulate(nodes, grads, *w, Tensor::from_vec(val(*w).shape(), d).unwrap());
            }
            if let (Some(d), Some(bv)) = (db, b) {
                accumulate(nodes, grads, *bv, Tensor::from_vec(val(*bv).shape(), d).unwrap());
            }
        }
        Op::Relu { x } => {
            let out = node.value.as_slice();
            let d = g.iter().zip(out).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect();
            accumulate(nodes, grads, *x, Tensor::from_vec(node.value.shape(), d).unwrap());
        }
        Op::InstanceNorm { x, gamma, beta, mean, rstd } => {
            let xv = val(*x);
            let (_, c, h, w) = xv.dims4().unwrap();
            let mut dx = wants(*x).then(|| zeros_like(xv));
            let mut dg = gamma.filter(|v| wants(*v)).map(|v| zeros_like(val(v)));
            let mut dbeta = beta.filter(|v| wants(*v)).map(|v| zeros_like(val(v)));
            norm::instance_norm_backward(
                xv.as_slice(),
                g,
                c,
                h * w,
                gamma.map(|v| val(v).as_slice()),
                mean,
                rstd,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                dbeta.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            if let (Some(d), Some(v)) = (dg, gamma) {
                accumulate(nodes, grads, *v, Tensor::from_vec(&[c], d).unwrap());
            }
            if let (Some(d), Some(v)) = (dbeta, beta) {
                accumulate(nodes, grads, *v, Tensor::from_vec(&[c], d).unwrap());
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, dy.clone());
            accumulate(nodes, grads, *b, dy.clone());
        }
        Op::ConcatChannels { parts } => {
            let (n, _, h, w) = node.value.dims4().unwrap();
            let plane = h * w;
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, pc) in parts {
                if wants(p) {
                    let mut d = Vec::with_capacity(n * pc * plane);
                    for b in 0..n {
                        let start = (b * total + offset) * plane;
                        d.extend_from_slice(&g[start..start + pc * plane]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_vec(&[n, pc, h, w], d).unwrap());
                }
                offset += pc;
            }
        }
        Op::Upsample { x, factor } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4().unwrap();
            let mut d = zeros_like(xv);
            pool::upsample_nearest_backward(g, n * c, h, w, *factor, &mut d);
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::MaxPool { x, argmax } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4().unwrap();
            let mut d = zeros_like(xv);
            pool::max_pool_backward(g, argmax, n * c, h * w, &mut d);
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::AvgPool { x, kernel, stride, pad } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4().unwrap();
            let mut d = zeros_like(xv);
            pool::avg_pool_backward(g, n * c, h, w, *kernel, *stride, *pad, &mut d);
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::GlobalAvgPool { x } => {
            let xv = val(*x);
            let (_, _, h, w) = xv.dims4().unwrap();
            let inv = T::one() / T::from_usize(h * w).unwrap();
            let mut d = Vec::with_capacity(xv.numel());
            for &gv in g {
                d.extend(std::iter::repeat_n(gv * inv, h * w));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            let d = g.iter().zip(xv.as_slice()).map(|(&d, &v)| if v > *lo && v < *hi { d } else { T::zero() }).collect();
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::ChannelAffine { x, scale } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4().unwrap();
            let plane = h * w;
            let co = scale.len();
            let mut d = zeros_like(xv);
            for b in 0..n {
                for (k, &s) in scale.iter().enumerate() {
                    let ci = if c == 1 { 0 } else { k };
                    let src = &g[(b * co + k) * plane..(b * co + k + 1) * plane];
                    let dst = &mut d[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v * s;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::Gram { x } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4().unwrap();
            let p = h * w;
            let norm = T::one() / T::from_usize(c * p).unwrap();
            let mut d = zeros_like(xv);
            let mut sym = vec![T::zero(); c * c];
            for b in 0..n {
                let dg = &g[b * c * c..(b + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
                    }
                }
                let f = &xv.as_slice()[b * c * p..(b + 1) * c * p];
                gemm(c, c, p, norm, &sym, false, f, false, T::zero(), &mut d[b * c * p..(b + 1) * c * p]);
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
        }
        Op::Mse { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let k = g[0] * T::from_f64_lossy(2.0 / av.numel() as f64);
            let da: Vec<T> = av.as_slice().iter().zip(bv.as_slice()).map(|(&p, &q)| (p - q) * k).collect();
            if wants(*b) {
                let db = da.iter().map(|&v| -v).collect();
                accumulate(nodes, grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
            }
            accumulate(nodes, grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
        }
        Op::Combine { terms } => {
            for &(v, k) in terms {
                accumulate(nodes, grads, v, Tensor::scalar(g[0] * k));
            }
        }
    }
}
