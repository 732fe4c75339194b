use crate::Scalar;

#[inline]
pub fn pooled_len(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Max pooling without padding; `argmax` receives the winning in-plane index.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    y: &mut [T],
    argmax: &mut [u32],
) {
    let oh = pooled_len(h, kernel, stride, 0);
    let ow = pooled_len(w, kernel, stride, 0);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut at = 0usize;
                for ki in 0..kernel {
                    let row = (oy * stride + ki) * w;
                    for kj in 0..kernel {
                        let i = row + ox * stride + kj;
                        // strict '>' keeps the first maximum on ties
                        if xp[i] > best {
                            best = xp[i];
                            at = i;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                y[o] = best;
                argmax[o] = at as u32;
            }
        }
    }
}

pub fn max_pool_backward<T: Scalar>(dy: &[T], argmax: &[u32], planes: usize, in_plane: usize, dx: &mut [T]) {
    let out_plane = dy.len() / planes;
    for p in 0..planes {
        let dxp = &mut dx[p * in_plane..(p + 1) * in_plane];
        for o in 0..out_plane {
            dxp[argmax[p * out_plane + o] as usize] += dy[p * out_plane + o];
        }
    }
}

/// Average pooling with zero padding that is excluded from the divisor.
#[allow(clippy::too_many_arguments)]
pub fn avg_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    y: &mut [T],
) {
    let oh = pooled_len(h, kernel, stride, pad);
    let ow = pooled_len(w, kernel, stride, pad);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1, x0, x1) = window(oy, ox, h, w, kernel, stride, pad);
                let mut s = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += xp[iy * w + ix];
                    }
                }
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                y[(p * oh + oy) * ow + ox] = s / count;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = pooled_len(h, kernel, stride, pad);
    let ow = pooled_len(w, kernel, stride, pad);
    for p in 0..planes {
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1, x0, x1) = window(oy, ox, h, w, kernel, stride, pad);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                let g = dy[(p * oh + oy) * ow + ox] / count;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dxp[iy * w + ix] += g;
                    }
                }
            }
        }
    }
}

#[inline]
fn window(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize, usize, usize) {
    let ys = (oy * stride) as isize - pad as isize;
    let xs = (ox * stride) as isize - pad as isize;
    let y0 = ys.max(0) as usize;
    let x0 = xs.max(0) as usize;
    let y1 = ((ys + kernel as isize) as usize).min(h);
    let x1 = ((xs + kernel as isize) as usize).min(w);
    (y0, y1, x0, x1)
}

pub fn upsample_nearest_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize, y: &mut [T]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let src = &xp[(oy / f) * w..(oy / f + 1) * w];
            let dst = &mut yp[oy * ow..(oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
}

pub fn upsample_nearest_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let src = &dyp[oy * ow..(oy + 1) * ow];
            let dst = &mut dxp[(oy / f) * w..(oy / f + 1) * w];
            for (ox, &v) in src.iter().enumerate() {
                dst[ox / f] += v;
            }
        }
    }
}
