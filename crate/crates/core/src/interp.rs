//! Interpolation kernels shared by the projector, the point sampler and the
//! feature fusion.

/// Linear interpolation taps along one axis of `n` samples at continuous
/// index `f`, clamped to `[0, n-1]`. Returns `(i0, i1, t)` with the value
/// `(1-t)*x[i0] + t*x[i1]`.
#[inline]
pub fn linear_taps(f: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let f = f.clamp(0.0, (n - 1) as f64);
    let i0 = (f.floor() as usize).min(n - 2);
    (i0, i0 + 1, f - i0 as f64)
}

/// Trilinear interpolation of an x-fastest grid at continuous voxel index
/// `f = (fx, fy, fz)`, border clamped.
pub fn trilinear(data: &[f64], dims: [usize; 3], f: [f64; 3]) -> f64 {
    let (x0, x1, tx) = linear_taps(f[0], dims[0]);
    let (y0, y1, ty) = linear_taps(f[1], dims[1]);
    let (z0, z1, tz) = linear_taps(f[2], dims[2]);
    let at = |x: usize, y: usize, z: usize| data[x + dims[0] * (y + dims[1] * z)];
    let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x1, y0, z0) * tx;
    let c10 = at(x0, y1, z0) * (1.0 - tx) + at(x1, y1, z0) * tx;
    let c01 = at(x0, y0, z1) * (1.0 - tx) + at(x1, y0, z1) * tx;
    let c11 = at(x0, y1, z1) * (1.0 - tx) + at(x1, y1, z1) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

/// Bilinear corner indices (into a `w`-fastest `w x h` map) and weights for
/// a normalized coordinate `(u, v)` in `[0,1]²`, where cell `i` is centered
/// at `(i + 0.5) / n`. Outside the centers the map is border clamped.
#[inline]
pub fn bilinear_corners(u: f64, v: f64, w: usize, h: usize) -> ([usize; 4], [f64; 4]) {
    let (x0, x1, tx) = linear_taps(u * w as f64 - 0.5, w);
    let (y0, y1, ty) = linear_taps(v * h as f64 - 0.5, h);
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
    )
}

/// Bilinear sample of a single-channel `w x h` map.
pub fn bilinear(map: &[f64], w: usize, h: usize, u: f64, v: f64) -> f64 {
    let (idx, wt) = bilinear_corners(u, v, w, h);
    idx.iter().zip(wt).map(|(&i, t)| map[i] * t).sum()
}
