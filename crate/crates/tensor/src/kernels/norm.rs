use crate::Scalar;

/// Per-(sample, channel) normalization over the spatial plane, with optional
/// per-channel affine. Writes `mean` and `rstd` (one per plane) for backward.
#[allow(clippy::too_many_arguments)]
pub fn instance_norm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    plane: usize,
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
    eps: T,
    y: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let inv_m = 1.0 / plane as f64;
    for (idx, (xp, yp)) in x.chunks_exact(plane).zip(y.chunks_exact_mut(plane)).enumerate() {
        let c = idx % channels;
        let mu = xp.iter().map(|v| v.as_f64()).sum::<f64>() * inv_m;
        let var = xp.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() * inv_m;
        let mu_t = T::from_f64_lossy(mu);
        let rs = T::from_f64_lossy(1.0 / (var + eps.as_f64()).sqrt());
        mean[idx] = mu_t;
        rstd[idx] = rs;
        let g = gamma.map_or(T::one(), |g| g[c]);
        let b = beta.map_or(T::zero(), |b| b[c]);
        let scale = g * rs;
        for (o, &v) in yp.iter_mut().zip(xp) {
            *o = (v - mu_t) * scale + b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    channels: usize,
    plane: usize,
    gamma: Option<&[T]>,
    mean: &[T],
    rstd: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let m = T::from_usize(plane).unwrap();
    for (idx, (xp, dyp)) in x.chunks_exact(plane).zip(dy.chunks_exact(plane)).enumerate() {
        let c = idx % channels;
        let (mu, rs) = (mean[idx], rstd[idx]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for (&v, &d) in xp.iter().zip(dyp) {
            let xhat = (v - mu) * rs;
            sum_dy += d.as_f64();
            sum_dy_xhat += (d * xhat).as_f64();
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[c] += T::from_f64_lossy(sum_dy);
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[c] += T::from_f64_lossy(sum_dy_xhat);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let g = gamma.map_or(T::one(), |g| g[c]);
            let s_dy = T::from_f64_lossy(sum_dy);
            let s_dyx = T::from_f64_lossy(sum_dy_xhat);
            let k = g * rs / m;
            let dxp = &mut dx[idx * plane..(idx + 1) * plane];
            for ((o, &v), &d) in dxp.iter_mut().zip(xp).zip(dyp) {
                let xhat = (v - mu) * rs;
                *o += k * (m * d - s_dy - xhat * s_dyx);
            }
        }
    }
}
