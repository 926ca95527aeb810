use crate::{Graph, Tensor, Var};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe row-major (or transposed) views that stay
    // inside the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Graph {
    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Box::new(move |ctx, grads| {
                if grads.wants(a) {
                    gemm(m, n, k, 1.0, ctx.grad, false, ctx.value(b).data(), true, 1.0, grads.slot(a));
                }
                if grads.wants(b) {
                    gemm(k, m, n, 1.0, ctx.value(a).data(), true, ctx.grad, false, 1.0, grads.slot(b));
                }
            }),
        )
    }

    /// Affine map `x [m,in] @ w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, din) = self.value(x).dims2();
        let (dout, din2) = self.value(w).dims2();
        assert_eq!(din, din2, "linear: input width {din} vs weight width {din2}");
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(m, din, dout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        self.push(
            Tensor::from_vec(&[m, dout], out),
            &parents,
            Box::new(move |ctx, grads| {
                if grads.wants(x) {
                    // dx = dy @ w
                    gemm(m, dout, din, 1.0, ctx.grad, false, ctx.value(w).data(), false, 1.0, grads.slot(x));
                }
                if grads.wants(w) {
                    // dw = dy^T @ x
                    gemm(dout, m, din, 1.0, ctx.grad, true, ctx.value(x).data(), false, 1.0, grads.slot(w));
                }
                if let Some(b) = b {
                    if grads.wants(b) {
                        let db = grads.slot(b);
                        for row in ctx.grad.chunks(dout) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                    }
                }
            }),
        )
    }
}
