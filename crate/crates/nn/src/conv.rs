use crate::{gemm, softmax_rows_inplace, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(img: &[f64], s: &ConvShape, col: &mut [f64]) {
    let npix = s.col_cols();
    for c in 0..s.c {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..s.ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    for ox in 0..s.wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        dst[oy * s.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            img[(c * s.h + iy as usize) * s.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], s: &ConvShape, img: &mut [f64]) {
    let npix = s.col_cols();
    for c in 0..s.c {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let src = &col[row * npix..(row + 1) * npix];
                for oy in 0..s.ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy as usize >= s.h {
                        continue;
                    }
                    for ox in 0..s.wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && (ix as usize) < s.w {
                            img[(c * s.h + iy as usize) * s.w + ix as usize] += src[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis linear interpolation taps for a 2x half-pixel upsampling.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

impl Graph {
    /// 2D convolution of `x [n,c,h,w]` with square kernels `w [co,c,k,k]`,
    /// zero padding `pad` and stride `stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (co, ci, k, k2) = self.value(w).dims4();
        assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
        assert_eq!(k, k2);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let s = ConvShape { c, h, w: wd, k, stride, pad, ho, wo };
        let (cr, cc) = (s.col_rows(), s.col_cols());
        let mut out = vec![0.0; n * co * cc];
        let mut col = vec![0.0; cr * cc];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for img in 0..n {
                im2col(&xv[img * c * h * wd..(img + 1) * c * h * wd], &s, &mut col);
                let o = &mut out[img * co * cc..(img + 1) * co * cc];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, chunk) in o.chunks_mut(cc).enumerate() {
                        chunk.fill(bv[oc]);
                    }
                }
                gemm(co, cr, cc, 1.0, wv, false, &col, false, 1.0, o);
            }
        }
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(
            Tensor::from_vec(&[n, co, ho, wo], out),
            &parents,
            Box::new(move |ctx, grads| {
                let xv = ctx.value(x).data();
                let wv = ctx.value(w).data();
                let mut col = vec![0.0; cr * cc];
                let mut dcol = vec![0.0; cr * cc];
                let want_x = grads.wants(x);
                let want_w = grads.wants(w);
                for img in 0..n {
                    let gy = &ctx.grad[img * co * cc..(img + 1) * co * cc];
                    if want_w {
                        im2col(&xv[img * c * h * wd..(img + 1) * c * h * wd], &s, &mut col);
                        gemm(co, cc, cr, 1.0, gy, false, &col, true, 1.0, grads.slot(w));
                    }
                    if want_x {
                        gemm(cr, co, cc, 1.0, wv, true, gy, false, 0.0, &mut dcol);
                        let dx = grads.slot(x);
                        col2im(&dcol, &s, &mut dx[img * c * h * wd..(img + 1) * c * h * wd]);
                    }
                }
                if let Some(b) = b {
                    if grads.wants(b) {
                        let db = grads.slot(b);
                        for img in 0..n {
                            for oc in 0..co {
                                let base = (img * co + oc) * cc;
                                db[oc] += ctx.grad[base..base + cc].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Bilinear 2x upsampling (half-pixel centers, edge clamped) of NCHW maps.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let a = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bb = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = a * (1.0 - fy) + bb * fy;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, ho, wo], out),
            &[x],
            Box::new(move |ctx, grads| {
                if !grads.wants(x) {
                    return;
                }
                let dx = grads.slot(x);
                for p in 0..n * c {
                    let gy = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let g = gy[oy * wo + ox];
                            d[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += g * (1.0 - fy) * fx;
                            d[y1 * w + x0] += g * fy * (1.0 - fx);
                            d[y1 * w + x1] += g * fy * fx;
                        }
                    }
                }
            }),
        )
    }

    /// Concatenates NCHW maps with equal `n, h, w` along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat_channels: mismatched maps");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![0.0; n * total * hw];
        for img in 0..n {
            let mut off = 0;
            for (&p, &pc) in parts.iter().zip(&chans) {
                let src = &self.value(p).data()[img * pc * hw..(img + 1) * pc * hw];
                out[(img * total + off) * hw..(img * total + off + pc) * hw].copy_from_slice(src);
                off += pc;
            }
        }
        let parts_owned = parts.to_vec();
        self.push(
            Tensor::from_vec(&[n, total, h, w], out),
            parts,
            Box::new(move |ctx, grads| {
                let mut off = 0;
                for (&p, &pc) in parts_owned.iter().zip(&chans) {
                    if grads.wants(p) {
                        let d = grads.slot(p);
                        for img in 0..n {
                            let src = &ctx.grad[(img * total + off) * hw..(img * total + off + pc) * hw];
                            for (a, b) in d[img * pc * hw..(img + 1) * pc * hw].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    off += pc;
                }
            }),
        )
    }

    /// `[n,c,h,w]` feature maps to a `[n*h*w, c]` token matrix.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw * c];
        for img in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(img * hw + p) * c + ch] = xv[(img * c + ch) * hw + p];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n * hw, c], out),
            &[x],
            Box::new(move |ctx, grads| {
                if grads.wants(x) {
                    let d = grads.slot(x);
                    for img in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(img * c + ch) * hw + p] += ctx.grad[(img * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Inverse of [`Graph::nchw_to_tokens`].
    pub fn tokens_to_nchw(&mut self, t: Var, n: usize, h: usize, w: usize) -> Var {
        let (rows, c) = self.value(t).dims2();
        let hw = h * w;
        assert_eq!(rows, n * hw, "tokens_to_nchw: {rows} tokens for {n}x{h}x{w}");
        let tv = self.value(t).data();
        let mut out = vec![0.0; n * c * hw];
        for img in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(img * c + ch) * hw + p] = tv[(img * hw + p) * c + ch];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            &[t],
            Box::new(move |ctx, grads| {
                if grads.wants(t) {
                    let d = grads.slot(t);
                    for img in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(img * hw + p) * c + ch] += ctx.grad[(img * c + ch) * hw + p];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences of `seq` tokens. `q`, `k`, `v` are `[groups*seq, d]`; head `h`
    /// owns columns `h*d/heads..(h+1)*d/heads`. Returns the concatenated heads.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, groups: usize, seq: usize, heads: usize) -> Var {
        let (rows, d) = self.value(q).dims2();
        assert_eq!(rows, groups * seq);
        assert_eq!(d % heads, 0, "model width {d} not divisible by {heads} heads");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; seq * seq];
        for gi in 0..groups {
            for hh in 0..heads {
                let base = gi * seq * d + hh * dk;
                attention_probs(self.value(q).data(), self.value(k).data(), base, seq, d, dk, scale, &mut probs);
                strided_gemm(seq, seq, dk, &probs, seq, 1, &self.value(v).data()[base..], d, 1, 0.0, &mut out[base..], d);
            }
        }
        self.push(
            Tensor::from_vec(&[rows, d], out),
            &[q, k, v],
            Box::new(move |ctx, grads| {
                let (qv, kv, vv) = (ctx.value(q).data(), ctx.value(k).data(), ctx.value(v).data());
                let mut probs = vec![0.0; seq * seq];
                let mut dp = vec![0.0; seq * seq];
                let mut dq = vec![0.0; rows * d];
                let mut dkm = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                for gi in 0..groups {
                    for hh in 0..heads {
                        let base = gi * seq * d + hh * dk;
                        let go = &ctx.grad[base..];
                        attention_probs(qv, kv, base, seq, d, dk, scale, &mut probs);
                        // dV = P^T dO
                        strided_gemm(seq, seq, dk, &probs, 1, seq, go, d, 1, 1.0, &mut dv[base..], d);
                        // dP = dO V^T
                        strided_gemm(seq, dk, seq, go, d, 1, &vv[base..], 1, d, 0.0, &mut dp, seq);
                        for r in 0..seq {
                            let pr = &probs[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, p) in dr.iter_mut().zip(pr) {
                                *x = p * (*x - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dS^T Q
                        strided_gemm(seq, seq, dk, &dp, seq, 1, &kv[base..], d, 1, 1.0, &mut dq[base..], d);
                        strided_gemm(seq, seq, dk, &dp, 1, seq, &qv[base..], d, 1, 1.0, &mut dkm[base..], d);
                    }
                }
                grads.accumulate(q, &dq);
                grads.accumulate(k, &dkm);
                grads.accumulate(v, &dv);
            }),
        )
    }
}

/// Row-softmax of `Q_h K_h^T * scale` for one head of one sequence.
#[allow(clippy::too_many_arguments)]
fn attention_probs(q: &[f64], k: &[f64], base: usize, seq: usize, d: usize, _dk: usize, scale: f64, probs: &mut [f64]) {
    strided_gemm(seq, _dk, seq, &q[base..], d, 1, &k[base..], 1, d, 0.0, probs, seq);
    for p in probs.iter_mut() {
        *p *= scale;
    }
    softmax_rows_inplace(probs, seq);
}

/// Attention probabilities of every head for one sequence `q`,`k` `[seq,d]`,
/// returned as `[heads][seq*seq]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Vec<Vec<f64>> {
    let (seq, d) = q.dims2();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    (0..heads)
        .map(|hh| {
            let mut p = vec![0.0; seq * seq];
            attention_probs(q.data(), k.data(), hh * dk, seq, d, dk, scale, &mut p);
            p
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    // SAFETY: callers pass views whose last addressed element lies inside the
    // slices (each slice starts at the view origin and spans the full rows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
