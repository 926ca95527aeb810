//! Brute-force references used by the acceptance checks.

use cbct_core::{GridSpec, ScannerGeometry};
use cbct_model::pointtrans::Neighborhood;
use cbct_nn::Tensor;

pub fn tent(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Bilinear value as a tent-weighted sum over every cell of a `w x h` map;
/// cell `i` sits at `(i + 0.5) / n` and queries are clamped to the centers.
pub fn bilinear(map: &[f64], w: usize, h: usize, u: f64, v: f64) -> f64 {
    let x = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let mut s = 0.0;
    for j in 0..h {
        for i in 0..w {
            s += map[j * w + i] * tent(x - i as f64) * tent(y - j as f64);
        }
    }
    s
}

/// Trilinear value at continuous voxel index `f` of an x-fastest grid.
pub fn trilinear(data: &[f64], d: [usize; 3], f: [f64; 3]) -> f64 {
    let f: Vec<f64> = (0..3).map(|a| f[a].clamp(0.0, (d[a] - 1) as f64)).collect();
    let mut s = 0.0;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let w = tent(f[0] - i as f64) * tent(f[1] - j as f64) * tent(f[2] - k as f64);
                if w != 0.0 {
                    s += w * data[(k * d[1] + j) * d[0] + i];
                }
            }
        }
    }
    s
}

/// All-pairs KNN: self first, then by squared distance, ties by index.
pub fn brute_knn(points: &[[f64; 3]], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(points.len() * k);
    let mut dist = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(j, q)| {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                (if i == j { -1.0 } else { d2 }, j)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d2, j) in &all[..k] {
            idx.push(j);
            dist.push(d2.max(0.0).sqrt());
        }
    }
    (idx, dist)
}

/// Full `n x n` attention with non-neighbors at `-inf` and `ln w` added to
/// the neighbor logits. Returns the output and every softmax row.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, nb: &Neighborhood, heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = q.dims2();
    let dk = d / heads;
    let mut out = vec![0.0; n * d];
    let mut rows = Vec::new();
    for i in 0..n {
        for h in 0..heads {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for s in 0..nb.graph.k {
                let j = nb.graph.indices[i * nb.graph.k + s];
                let w = nb.weights[i * nb.graph.k + s];
                if w > 0.0 {
                    let dot: f64 = (0..dk).map(|c| q.data()[i * d + h * dk + c] * k.data()[j * d + h * dk + c]).sum();
                    logits[j] = dot / (dk as f64).sqrt() + w.ln();
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / z).collect();
            for j in 0..n {
                for c in 0..dk {
                    out[i * d + h * dk + c] += a[j] * v.data()[j * d + h * dk + c];
                }
            }
            rows.push(a);
        }
    }
    (out, rows)
}

/// Length of `o + t d`, `t ∈ [0, len]`, inside the box `[-h, h]`, clipping
/// against one face pair at a time.
pub fn clipped_chord(o: [f64; 3], d: [f64; 3], len: f64, h: [f64; 3]) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, len);
    for a in 0..3 {
        for (bound, sign) in [(-h[a], 1.0), (h[a], -1.0)] {
            let num = sign * (o[a] - bound);
            let den = sign * d[a];
            if den == 0.0 {
                if num < 0.0 {
                    return 0.0;
                }
            } else if den > 0.0 {
                lo = lo.max(-num / den);
            } else {
                hi = hi.min(-num / den);
            }
        }
    }
    (hi - lo).max(0.0)
}

type SparseRow = Vec<(usize, f64)>;

/// Forward (`rays x voxels`) and unweighted backprojection
/// (`voxels x rays`) operators of one view, materialized row by row.
pub struct ViewMatrices {
    pub a: Vec<SparseRow>,
    pub b: Vec<SparseRow>,
}

fn taps(f: f64, n: usize) -> [(usize, f64); 2] {
    let f = f.clamp(0.0, (n - 1) as f64);
    let i0 = (f.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let t = f - i0 as f64;
    [(i0, 1.0 - t), (i1, t)]
}

fn sparse(dense: Vec<f64>) -> SparseRow {
    dense.into_iter().enumerate().filter(|(_, x)| *x != 0.0).collect()
}

/// Midpoint ray marching at half the voxel spacing with trilinear taps,
/// and pixel-driven backprojection with bilinear taps.
pub fn view_matrices(g: &ScannerGeometry, grid: &GridSpec, angle_deg: f64) -> ViewMatrices {
    let n = grid.dims[0];
    let [pw, ph] = g.detector_pixels;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let sid = g.source_to_isocenter_mm;
    let sdd = g.source_to_detector_mm;
    let src = [s * sid, -c * sid, 0.0];
    let size = g.detector_size_mm;
    let half = grid.box_half_extent_mm();
    let sp = grid.spacing_mm;
    let step = sp[0] / 2.0;
    let centre = (n as f64 - 1.0) / 2.0;

    let mut a = Vec::with_capacity(pw * ph);
    for iv in 0..ph {
        for iu in 0..pw {
            let mut row = vec![0.0; grid.len()];
            let x = ((iu as f64 + 0.5) / pw as f64 - 0.5) * size[0];
            let z = ((iv as f64 + 0.5) / ph as f64 - 0.5) * size[1];
            let y = sdd - sid;
            let det = [c * x - s * y, s * x + c * y, z];
            let mut d = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            d.iter_mut().for_each(|e| *e /= len);
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for ax in 0..3 {
                let t1 = (-half[ax] - src[ax]) / d[ax];
                let t2 = (half[ax] - src[ax]) / d[ax];
                lo = lo.max(t1.min(t2));
                hi = hi.min(t1.max(t2));
            }
            let (lo, hi) = (lo.max(0.0), hi.min(len));
            if hi > lo {
                let m = ((hi - lo) / step).ceil().max(1.0) as usize;
                let h = (hi - lo) / m as f64;
                for k in 0..m {
                    let t = lo + (k as f64 + 0.5) * h;
                    let p = [src[0] + t * d[0], src[1] + t * d[1], src[2] + t * d[2]];
                    for &(i, wx) in &taps(p[0] / sp[0] + centre, n) {
                        for &(j, wy) in &taps(p[1] / sp[1] + centre, n) {
                            for &(kk, wz) in &taps(p[2] / sp[2] + centre, n) {
                                row[(kk * n + j) * n + i] += h * wx * wy * wz;
                            }
                        }
                    }
                }
            }
            a.push(sparse(row));
        }
    }

    let mut b = Vec::with_capacity(grid.len());
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let mut row = vec![0.0; pw * ph];
                let p = grid.voxel_center_mm(i, j, k);
                let gx = c * p[0] + s * p[1];
                let gy = -s * p[0] + c * p[1];
                let depth = gy + sid;
                let u = gx * sdd / depth / size[0] + 0.5;
                let v = p[2] * sdd / depth / size[1] + 0.5;
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
                    for &(pu, wu) in &taps(u * pw as f64 - 0.5, pw) {
                        for &(pv, wv) in &taps(v * ph as f64 - 0.5, ph) {
                            row[pv * pw + pu] += wu * wv;
                        }
                    }
                }
                b.push(sparse(row));
            }
        }
    }
    ViewMatrices { a, b }
}

pub fn matvec(m: &[SparseRow], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().map(|&(j, w)| w * x[j]).sum()).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// SART iterates from zero with the matrices above, clamped at zero.
pub fn dense_sart(mats: &[ViewMatrices], measured: &[Vec<f64>], iterations: usize, relaxation: f64) -> Vec<Vec<f64>> {
    let guard = |d: f64| if d < 1e-8 { 1.0 } else { d };
    let nvox = mats[0].b.len();
    let ones = vec![1.0; nvox];
    let ray_len: Vec<Vec<f64>> = mats.iter().map(|m| matvec(&m.a, &ones).into_iter().map(guard).collect()).collect();
    let col: Vec<Vec<f64>> =
        mats.iter().map(|m| m.b.iter().map(|r| guard(r.iter().map(|&(_, w)| w).sum())).collect()).collect();
    let mut x = vec![0.0; nvox];
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        for (vi, m) in mats.iter().enumerate() {
            let ax = matvec(&m.a, &x);
            let r: Vec<f64> = (0..ax.len()).map(|i| (measured[vi][i] - ax[i]) / ray_len[vi][i]).collect();
            let upd = matvec(&m.b, &r);
            for j in 0..nvox {
                x[j] = (x[j] + relaxation * upd[j] / col[vi][j]).max(0.0);
            }
        }
        out.push(x.clone());
    }
    out
}
