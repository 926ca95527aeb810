use crate::{Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Per-column batch statistics from a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, as tracked by running statistics.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.count as f64;
        let f = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * f).collect()
    }
}

impl Graph {
    /// Normalizes every row of `x [m,d]` to zero mean and unit variance, then
    /// applies the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, d) = self.value(x).dims2();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let (mean, inv) = row_stats(row);
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv * gv[c] + bv[c];
            }
        }
        self.push(
            Tensor::from_vec(&[m, d], out),
            &[x, gamma, beta],
            Box::new(move |ctx, grads| {
                let xv = ctx.value(x).data();
                let gv = ctx.value(gamma).data().to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let want_x = grads.wants(x);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..m {
                    let row = &xv[r * d..(r + 1) * d];
                    let gy = &ctx.grad[r * d..(r + 1) * d];
                    let (mean, inv) = row_stats(row);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * inv;
                        dgamma[c] += gy[c] * xhat[c];
                        dbeta[c] += gy[c];
                        dxhat[c] = gy[c] * gv[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xhat[c];
                    }
                    if want_x {
                        let dx = &mut grads.slot(x)[r * d..(r + 1) * d];
                        let dn = d as f64;
                        for c in 0..d {
                            dx[c] += inv * (dxhat[c] - s1 / dn - xhat[c] * s2 / dn);
                        }
                    }
                }
                grads.accumulate(gamma, &dgamma);
                grads.accumulate(beta, &dbeta);
            }),
        )
    }

    /// Training-mode batch normalization over the rows of `x [m,d]` (one
    /// channel per column). Returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let (m, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let (mean, var) = col_stats(xv, m, d);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            for c in 0..d {
                out[r * d + c] = (xv[r * d + c] - mean[c]) * inv[c] * gv[c] + bv[c];
            }
        }
        let stats = BatchStats { mean: mean.clone(), var, count: m };
        let v = self.push(
            Tensor::from_vec(&[m, d], out),
            &[x, gamma, beta],
            Box::new(move |ctx, grads| {
                let xv = ctx.value(x).data();
                let gv = ctx.value(gamma).data().to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut s1 = vec![0.0; d];
                let mut s2 = vec![0.0; d];
                for r in 0..m {
                    for c in 0..d {
                        let g = ctx.grad[r * d + c];
                        let xhat = (xv[r * d + c] - mean[c]) * inv[c];
                        dgamma[c] += g * xhat;
                        dbeta[c] += g;
                        s1[c] += g * gv[c];
                        s2[c] += g * gv[c] * xhat;
                    }
                }
                if grads.wants(x) {
                    let dx = grads.slot(x);
                    let n = m as f64;
                    for r in 0..m {
                        for c in 0..d {
                            let xhat = (xv[r * d + c] - mean[c]) * inv[c];
                            let dxhat = ctx.grad[r * d + c] * gv[c];
                            dx[r * d + c] += inv[c] * (dxhat - s1[c] / n - xhat * s2[c] / n);
                        }
                    }
                }
                grads.accumulate(gamma, &dgamma);
                grads.accumulate(beta, &dbeta);
            }),
        );
        (v, stats)
    }

    /// Evaluation-mode batch normalization with frozen statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let (m, d) = self.value(x).dims2();
        assert_eq!(mean.len(), d);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mean = mean.to_vec();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            for c in 0..d {
                out[r * d + c] = (xv[r * d + c] - mean[c]) * inv[c] * gv[c] + bv[c];
            }
        }
        self.push(
            Tensor::from_vec(&[m, d], out),
            &[x, gamma, beta],
            Box::new(move |ctx, grads| {
                let xv = ctx.value(x).data();
                let gv = ctx.value(gamma).data().to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let want_x = grads.wants(x);
                for r in 0..m {
                    for c in 0..d {
                        let g = ctx.grad[r * d + c];
                        dgamma[c] += g * (xv[r * d + c] - mean[c]) * inv[c];
                        dbeta[c] += g;
                    }
                }
                if want_x {
                    let dx = grads.slot(x);
                    for r in 0..m {
                        for c in 0..d {
                            dx[r * d + c] += ctx.grad[r * d + c] * gv[c] * inv[c];
                        }
                    }
                }
                grads.accumulate(gamma, &dgamma);
                grads.accumulate(beta, &dbeta);
            }),
        )
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn col_stats(x: &[f64], m: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in mean.iter_mut() {
        *a /= m as f64;
    }
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for c in 0..d {
            let t = row[c] - mean[c];
            var[c] += t * t;
        }
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }
    (mean, var)
}
