use crate::scalar::gemm;
use crate::Scalar;

/// Static shape of one 2-D convolution (per batch element).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad_h - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad_w - self.kw) / self.stride + 1,
        )
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Output column range `[lo, hi)` whose input column `ox*stride + off` lies in `[0, w)`.
#[inline]
fn valid_cols(ow: usize, w: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) + 1) as usize };
    let hi = hi.min(ow);
    (lo.min(hi), hi)
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let (h, w) = (g.h, g.w);
    for ci in 0..g.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * p..(r + 1) * p];
                let off = kj as isize - g.pad_w as isize;
                let (lo, hi) = valid_cols(ow, w, g.stride, off);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let s0 = (lo as isize + off) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[(ox as isize * g.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image plane stack (inverse of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let (h, w) = (g.h, g.w);
    for ci in 0..g.c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * p..(r + 1) * p];
                let off = kj as isize - g.pad_w as isize;
                let (lo, hi) = valid_cols(ow, w, g.stride, off);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate().take(hi).skip(lo) {
                        dst[(ox as isize * g.stride as isize + off) as usize] += v;
                    }
                }
            }
        }
    }
}

/// Below this many output channels a stride-1 convolution is computed by
/// direct shifted row updates instead of a skinny GEMM.
const DIRECT_MAX_C_OUT: usize = 4;

fn use_direct(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.c_out <= DIRECT_MAX_C_OUT && !g.is_pointwise()
}

/// Calls `f(out_row_start, in_row_start, len)` for every contiguous run of
/// one kernel tap `(ki, kj)` that lands inside the input (stride 1).
#[inline]
fn tap_runs(g: &ConvGeometry, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = g.out_hw();
    let off = kj as isize - g.pad_w as isize;
    let (lo, hi) = valid_cols(ow, g.w, 1, off);
    if lo >= hi {
        return;
    }
    for oy in 0..oh {
        let iy = (oy + ki) as isize - g.pad_h as isize;
        if iy < 0 || iy >= g.h as isize {
            continue;
        }
        f(oy * ow + lo, iy as usize * g.w + (lo as isize + off) as usize, hi - lo);
    }
}

/// `yn += W ∗ xn` by direct accumulation.
fn direct_forward<T: Scalar>(xn: &[T], g: &ConvGeometry, weight: &[T], yn: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let plane = g.h * g.w;
    for co in 0..g.c_out {
        let y = &mut yn[co * p..(co + 1) * p];
        for ci in 0..g.c_in {
            let x = &xn[ci * plane..(ci + 1) * plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = weight[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                    tap_runs(g, ki, kj, |o, i, len| {
                        for (d, &s) in y[o..o + len].iter_mut().zip(&x[i..i + len]) {
                            *d = *d + wv * s;
                        }
                    });
                }
            }
        }
    }
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).fold(T::zero(), |s, (&u, &v)| s + u * v);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// `dw += dyn ⋆ xn` by direct dot products.
fn direct_weight_grad<T: Scalar>(xn: &[T], g: &ConvGeometry, dyn_: &[T], dw: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let plane = g.h * g.w;
    for co in 0..g.c_out {
        let dy = &dyn_[co * p..(co + 1) * p];
        for ci in 0..g.c_in {
            let x = &xn[ci * plane..(ci + 1) * plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let mut acc = T::zero();
                    tap_runs(g, ki, kj, |o, i, len| acc = acc + dot(&dy[o..o + len], &x[i..i + len]));
                    let slot = &mut dw[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                    *slot = *slot + acc;
                }
            }
        }
    }
}

/// `yn = W · im2col(xn)` (plus `yn` itself when `accumulate`).
fn apply_one<T: Scalar>(xn: &[T], g: &ConvGeometry, weight: &[T], cols: &mut [T], yn: &mut [T], accumulate: bool) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    if use_direct(g) {
        if !accumulate {
            yn.fill(T::zero());
        }
        direct_forward(xn, g, weight, yn);
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let rhs: &[T] = if g.is_pointwise() {
        xn
    } else {
        im2col(xn, g, cols);
        cols
    };
    gemm(g.c_out, g.patch_len(), p, T::one(), weight, false, rhs, false, beta, yn);
}

fn cols_buffer<T: Scalar>(g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() || use_direct(g) {
        Vec::new()
    } else {
        let (oh, ow) = g.out_hw();
        vec![T::zero(); g.patch_len() * oh * ow]
    }
}

/// `y[n] = W · im2col(x[n]) + b` for every batch element.
pub fn forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut cols = cols_buffer(g);
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let yn = &mut y[n * out_len..(n + 1) * out_len];
        match bias {
            Some(b) => {
                for (co, row) in yn.chunks_exact_mut(p).enumerate() {
                    row.fill(b[co]);
                }
                apply_one(xn, g, weight, &mut cols, yn, true);
            }
            None => apply_one(xn, g, weight, &mut cols, yn, false),
        }
    }
}

/// Geometry and weights of the stride-1 convolution mapping `dy` to `dx`:
/// channels swapped, kernel flipped, padding `k - 1 - pad`.
fn transposed<T: Scalar>(g: &ConvGeometry, weight: &[T]) -> Option<(ConvGeometry, Vec<T>)> {
    if g.stride != 1 || g.pad_h + 1 > g.kh || g.pad_w + 1 > g.kw {
        return None;
    }
    let (oh, ow) = g.out_hw();
    let gt = ConvGeometry {
        c_in: g.c_out,
        h: oh,
        w: ow,
        c_out: g.c_in,
        kh: g.kh,
        kw: g.kw,
        stride: 1,
        pad_h: g.kh - 1 - g.pad_h,
        pad_w: g.kw - 1 - g.pad_w,
    };
    let mut wt = vec![T::zero(); weight.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    wt[((ci * g.c_out + co) * g.kh + (g.kh - 1 - ki)) * g.kw + (g.kw - 1 - kj)] =
                        weight[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                }
            }
        }
    }
    Some((gt, wt))
}

/// Accumulates gradients for whichever of `dx`, `dw`, `db` are requested.
/// `dx` must be zeroed by the caller; `dw`/`db` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let pointwise = g.is_pointwise();
    let direct = use_direct(g);
    let needs_cols = !pointwise && !direct && dw.is_some();
    let trans = if dx.is_some() && !pointwise { transposed(g, weight) } else { None };
    let mut cols = if needs_cols || (dx.is_some() && !pointwise && trans.is_none()) {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    let mut tcols = trans.as_ref().map_or_else(Vec::new, |(gt, _)| cols_buffer(gt));
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyn_.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            if direct {
                direct_weight_grad(xn, g, dyn_, dw);
            } else {
                let rhs: &[T] = if pointwise {
                    xn
                } else {
                    im2col(xn, g, &mut cols);
                    &cols
                };
                // dW (c_out × k) += dY (c_out × p) · colsᵀ (p × k)
                gemm(g.c_out, p, k, T::one(), dyn_, false, rhs, true, T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(k, g.c_out, p, T::one(), weight, true, dyn_, false, T::one(), dxn);
            } else if let Some((gt, wt)) = &trans {
                apply_one(dyn_, gt, wt, &mut tcols, dxn, true);
            } else {
                gemm(k, g.c_out, p, T::one(), weight, true, dyn_, false, T::zero(), &mut cols);
                col2im(&cols, g, dxn);
            }
        }
    }
}
