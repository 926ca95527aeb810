use crate::{Graph, Tensor, Var};

/// In-place numerically stable softmax over each row of length `cols`.
pub fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            &[a, b],
            Box::new(move |ctx, grads| {
                grads.accumulate(a, ctx.grad);
                grads.accumulate(b, ctx.grad);
            }),
        )
    }

    /// Adds a constant tensor of identical shape (no gradient to the constant).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.value(a).shape(), c.shape(), "add_const: shape mismatch");
        let data: Vec<f64> = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = c.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), &[a], Box::new(move |ctx, grads| grads.accumulate(a, ctx.grad)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            &[a],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    for (d, g) in grads.slot(a).iter_mut().zip(ctx.grad) {
                        *d += s * g;
                    }
                }
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            &[a],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    let x = ctx.value(a).data();
                    for ((d, g), xv) in grads.slot(a).iter_mut().zip(ctx.grad).zip(x) {
                        if *xv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| logistic(x)).collect();
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            &[a],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    let x = ctx.value(a).data();
                    for ((d, g), xv) in grads.slot(a).iter_mut().zip(ctx.grad).zip(x) {
                        let s = logistic(*xv);
                        *d += g * s * (1.0 - s);
                    }
                }
            }),
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    let g = ctx.grad[0];
                    for d in grads.slot(a).iter_mut() {
                        *d += g;
                    }
                }
            }),
        )
    }

    /// `sum(a * c)` for a constant `c` of the same shape; the usual probe for
    /// gradient checks of vector-valued maps.
    pub fn dot_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.value(a).len(), c.len());
        let s: f64 = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        let c = c.data().to_vec();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    let g = ctx.grad[0];
                    for (d, cv) in grads.slot(a).iter_mut().zip(&c) {
                        *d += g * cv;
                    }
                }
            }),
        )
    }

    /// Mean squared error between `pred` and a constant target of equal length.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len(), "mse: length mismatch");
        let n = p.len() as f64;
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let target = target.to_vec();
        self.push(
            Tensor::scalar(loss),
            &[pred],
            Box::new(move |ctx, grads| {
                if grads.wants(pred) {
                    let g = ctx.grad[0];
                    let p = ctx.value(pred).data();
                    for ((d, pv), tv) in grads.slot(pred).iter_mut().zip(p).zip(&target) {
                        *d += g * 2.0 * (pv - tv) / n;
                    }
                }
            }),
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat_cols: row count mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let parts_owned = parts.to_vec();
        self.push(
            Tensor::from_vec(&[rows, total], out),
            parts,
            Box::new(move |ctx, grads| {
                let mut off = 0;
                for (&p, &w) in parts_owned.iter().zip(&widths) {
                    if grads.wants(p) {
                        let d = grads.slot(p);
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * w + c] += ctx.grad[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }),
        )
    }

    /// Gathers rows `idx` of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (_, c) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        let n = idx.len();
        self.push(
            Tensor::from_vec(&[n, c], out),
            &[a],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    let d = grads.slot(a);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += ctx.grad[r * c + j];
                        }
                    }
                }
            }),
        )
    }

    /// Flattens to a column vector view with a new shape (same data order).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        self.push(t, &[a], Box::new(move |ctx, grads| grads.accumulate(a, ctx.grad)))
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
