//! Neighbor-aware point transformer: learnable positional encoding, exact
//! KNN neighborhoods, Gaussian adjacency weights used as a log-bias on the
//! attention logits, and a stack of attention/feed-forward layers.

use std::fmt;
use std::str::FromStr;

use cbct_nn::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

use crate::layers::{LayerNorm, Linear};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormPlacement {
    #[default]
    PreNorm,
    PostNorm,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::PreNorm => "prenorm",
            NormPlacement::PostNorm => "postnorm",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prenorm" => Ok(NormPlacement::PreNorm),
            "postnorm" => Ok(NormPlacement::PostNorm),
            _ => Err(Error::InvalidArgument(format!("unknown norm placement '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointTransformerConfig {
    pub layers: usize,
    pub k: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Gaussian bandwidth in model coordinates.
    pub sigma: f64,
    /// Hidden width of the positional encoding.
    pub pe_hidden: usize,
    pub norm: NormPlacement,
}

impl Default for PointTransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            k: 3,
            heads: 4,
            model_dim: 256,
            ffn_dim: 512,
            sigma: 0.1,
            pe_hidden: 128,
            norm: NormPlacement::PreNorm,
        }
    }
}

impl PointTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma {} must be positive", self.sigma)));
        }
        if self.ffn_dim == 0 || self.pe_hidden == 0 {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// `k` neighbors per point, row-major `[N, k]`. Each row starts with the
/// point itself, followed by the nearest other points by ascending distance,
/// ties by ascending index.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Exact KNN with uniform grid buckets.
pub fn knn(points: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} with {n} points")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point coordinate".into()));
        }
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let per_axis = ((n as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 128);
    let cell = if span > 0.0 { span / per_axis as f64 } else { 1.0 };
    let dims: [usize; 3] = std::array::from_fn(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
    let cell_of = |p: [f64; 3]| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / cell).floor() as usize).min(dims[a] - 1))
    };
    let flat = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    let ncells = dims[0] * dims[1] * dims[2];
    let mut start = vec![0usize; ncells + 1];
    let cells: Vec<usize> = points.iter().map(|&p| flat(cell_of(p))).collect();
    for &c in &cells {
        start[c + 1] += 1;
    }
    for c in 0..ncells {
        start[c + 1] += start[c];
    }
    let mut fill = start.clone();
    let mut members = vec![0usize; n];
    for (i, &c) in cells.iter().enumerate() {
        members[fill[c]] = i;
        fill[c] += 1;
    }
    let max_ring = dims.iter().cloned().max().unwrap_or(1);

    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = points[i];
            let qc = cell_of(q);
            // (squared distance, index); self sorts first via -1
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            let consider = |d2: f64, j: usize, best: &mut Vec<(f64, usize)>| {
                let key = (if j == i { -1.0 } else { d2 }, j);
                if best.len() == k {
                    let worst = best[k - 1];
                    if key.0 > worst.0 || (key.0 == worst.0 && key.1 > worst.1) {
                        return;
                    }
                }
                let pos = best.partition_point(|e| e.0 < key.0 || (e.0 == key.0 && e.1 < key.1));
                best.insert(pos, key);
                best.truncate(k);
            };
            for r in 0..=max_ring {
                let r = r as isize;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let c = [qc[0] as isize + dx, qc[1] as isize + dy, qc[2] as isize + dz];
                            if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as isize) {
                                continue;
                            }
                            let f = flat([c[0] as usize, c[1] as usize, c[2] as usize]);
                            for &j in &members[start[f]..start[f + 1]] {
                                consider(dist2(q, points[j]), j, &mut best);
                            }
                        }
                    }
                }
                // everything outside ring r is farther than r * cell
                if best.len() == k {
                    let reach = r as f64 * cell;
                    if best[k - 1].0 < reach * reach {
                        break;
                    }
                }
            }
            let idx: Vec<usize> = best.iter().map(|e| e.1).collect();
            let d: Vec<f64> = best.iter().map(|e| e.0.max(0.0).sqrt()).collect();
            (idx, d)
        })
        .collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (i, d) in rows {
        indices.extend(i);
        distances.extend(d);
    }
    Ok(NeighborGraph { k, indices, distances })
}

/// `exp(-d² / 2σ²)` elementwise.
pub fn gaussian_weights(distances: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    Ok(distances.iter().map(|d| (-d * d / (2.0 * sigma * sigma)).exp()).collect())
}

/// A neighbor graph with its adjacency weights. A zero weight excludes the
/// neighbor from attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub graph: NeighborGraph,
    pub weights: Vec<f64>,
}

impl Neighborhood {
    pub fn gaussian(graph: NeighborGraph, sigma: f64) -> Result<Self> {
        let weights = gaussian_weights(&graph.distances, sigma)?;
        Ok(Self { graph, weights })
    }

    pub fn build(points: &[[f64; 3]], k: usize, sigma: f64) -> Result<Self> {
        Self::gaussian(knn(points, k)?, sigma)
    }

    /// `log w`, with `-inf` for excluded neighbors.
    fn log_weights(&self) -> Result<Vec<f64>> {
        let k = self.graph.k;
        if self.weights.len() != self.graph.indices.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} neighbor slots",
                self.weights.len(),
                self.graph.indices.len()
            )));
        }
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, row) in self.weights.chunks(k).enumerate() {
            if row.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::InvalidArgument(format!("negative or non-finite weight in row {i}")));
            }
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::DegenerateRow(i));
            }
            out.extend(row.iter().map(|&w| if w == 0.0 { f64::NEG_INFINITY } else { w.ln() }));
        }
        Ok(out)
    }
}

/// Softmax over each point's neighbors of `q_i·k_j/√d_k + log w_ij`, per
/// head. Returns `[N, heads, k]`.
fn neighbor_probs(q: &[f64], kmat: &[f64], d: usize, heads: usize, idx: &[usize], logw: &[f64], kk: usize) -> Vec<f64> {
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let n = idx.len() / kk;
    let mut probs = vec![0.0; n * heads * kk];
    probs.par_chunks_mut(heads * kk).enumerate().for_each(|(i, out)| {
        for h in 0..heads {
            let qi = &q[i * d + h * dk..i * d + (h + 1) * dk];
            let row = &mut out[h * kk..(h + 1) * kk];
            let mut mx = f64::NEG_INFINITY;
            for (s, slot) in row.iter_mut().enumerate() {
                let lw = logw[i * kk + s];
                *slot = if lw == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let j = idx[i * kk + s];
                    let kj = &kmat[j * d + h * dk..j * d + (h + 1) * dk];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + lw
                };
                mx = mx.max(*slot);
            }
            let mut total = 0.0;
            for slot in row.iter_mut() {
                *slot = if *slot == f64::NEG_INFINITY { 0.0 } else { (*slot - mx).exp() };
                total += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= total;
            }
        }
    });
    probs
}

/// Graph op: biased neighbor attention of `q, k, v [N, D]`, heads
/// concatenated, `[N, D]`.
pub fn neighbor_attention_core(g: &mut Graph, q: Var, k: Var, v: Var, nb: &Neighborhood, heads: usize) -> Result<Var> {
    let (n, d) = g.value(q).dims2();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("width {d} not divisible by {heads} heads")));
    }
    if nb.graph.len() != n || g.value(k).dims2() != (n, d) || g.value(v).dims2() != (n, d) {
        return Err(Error::Shape(format!("attention over {n} rows with a {}-row neighbor graph", nb.graph.len())));
    }
    let kk = nb.graph.k;
    let dk = d / heads;
    let logw = nb.log_weights()?;
    let idx = nb.graph.indices.clone();
    let probs = neighbor_probs(g.value(q).data(), g.value(k).data(), d, heads, &idx, &logw, kk);
    let vd = g.value(v).data();
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, orow)| {
        for h in 0..heads {
            for s in 0..kk {
                let a = probs[(i * heads + h) * kk + s];
                if a == 0.0 {
                    continue;
                }
                let j = idx[i * kk + s];
                for c in h * dk..(h + 1) * dk {
                    orow[c] += a * vd[j * d + c];
                }
            }
        }
    });
    let scale = 1.0 / (dk as f64).sqrt();
    Ok(g.push(
        Tensor::from_vec(&[n, d], out),
        &[q, k, v],
        Box::new(move |ctx, grads| {
            let (qv, kv, vv) = (ctx.value(q).data(), ctx.value(k).data(), ctx.value(v).data());
            let mut dq = vec![0.0; n * d];
            let mut dkm = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut da = vec![0.0; kk];
            for i in 0..n {
                let go = &ctx.grad[i * d..(i + 1) * d];
                for h in 0..heads {
                    let p = &probs[(i * heads + h) * kk..(i * heads + h + 1) * kk];
                    let cols = h * dk..(h + 1) * dk;
                    for s in 0..kk {
                        let j = idx[i * kk + s];
                        da[s] = cols.clone().map(|c| go[c] * vv[j * d + c]).sum();
                    }
                    let dot: f64 = p.iter().zip(&da).map(|(a, b)| a * b).sum();
                    for s in 0..kk {
                        if p[s] == 0.0 {
                            continue;
                        }
                        let j = idx[i * kk + s];
                        let ds = p[s] * (da[s] - dot) * scale;
                        for c in cols.clone() {
                            dq[i * d + c] += ds * kv[j * d + c];
                            dkm[j * d + c] += ds * qv[i * d + c];
                            dv[j * d + c] += p[s] * go[c];
                        }
                    }
                }
            }
            grads.accumulate(q, &dq);
            grads.accumulate(k, &dkm);
            grads.accumulate(v, &dv);
        }),
    ))
}

/// Query/key/value/output projections around [`neighbor_attention_core`].
#[derive(Clone, Debug)]
pub struct NeighborAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl NeighborAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        })
    }

    /// Output-projected attention, without the residual.
    pub fn forward_delta(&self, g: &mut Graph, store: &ParamStore, x: Var, nb: &Neighborhood) -> Result<Var> {
        let q = self.q.apply(g, store, x);
        let k = self.k.apply(g, store, x);
        let v = self.v.apply(g, store, x);
        let a = neighbor_attention_core(g, q, k, v, nb, self.heads)?;
        Ok(self.out.apply(g, store, a))
    }

    /// `x + forward_delta(x)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, nb: &Neighborhood) -> Result<Var> {
        let d = self.forward_delta(g, store, x, nb)?;
        Ok(g.add(x, d))
    }

    /// Attention probabilities `[N, heads, k]` for input rows `x`.
    pub fn probabilities(&self, store: &ParamStore, x: &Tensor, nb: &Neighborhood) -> Result<Vec<f64>> {
        let mut g = Graph::eval();
        let xv = g.input(x.clone());
        let q = self.q.apply(&mut g, store, xv);
        let k = self.k.apply(&mut g, store, xv);
        let logw = nb.log_weights()?;
        let d = g.value(q).dims2().1;
        Ok(neighbor_probs(g.value(q).data(), g.value(k).data(), d, self.heads, &nb.graph.indices, &logw, nb.graph.k))
    }
}

/// Two-layer coordinate embedding `relu(p W1ᵀ + b1) W2ᵀ + b2`.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub l1: Linear,
    pub l2: Linear,
}

impl PositionalEncoding {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, hidden: usize, out_dim: usize) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.fc1"), 3, hidden),
            l2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, coords: Var) -> Var {
        let h = self.l1.apply(g, store, coords);
        let h = g.relu(h);
        self.l2.apply(g, store, h)
    }
}

pub fn coords_tensor(points: &[[f64; 3]]) -> Tensor {
    Tensor::from_vec(&[points.len(), 3], points.iter().flatten().copied().collect())
}

#[derive(Clone, Debug)]
struct Layer {
    norm1: LayerNorm,
    attn: NeighborAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct PointTransformer {
    pub cfg: PointTransformerConfig,
    pub feature_dim: usize,
    pub pe: PositionalEncoding,
    pub input: Linear,
    layers: Vec<Layer>,
    pub output: Linear,
}

impl PointTransformer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: PointTransformerConfig, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let pe = PositionalEncoding::new(store, rng, "pointtrans.pe", cfg.pe_hidden, feature_dim);
        let input = Linear::new(store, rng, "pointtrans.input", feature_dim, d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("pointtrans.layer{l}");
                Ok(Layer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    attn: NeighborAttention::new(store, rng, &format!("{name}.attn"), d, cfg.heads)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    fc1: Linear::new(store, rng, &format!("{name}.ffn.fc1"), d, cfg.ffn_dim),
                    fc2: Linear::new(store, rng, &format!("{name}.ffn.fc2"), cfg.ffn_dim, d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(store, rng, "pointtrans.output", d, feature_dim);
        Ok(Self { cfg, feature_dim, pe, input, layers, output })
    }

    pub fn attention(&self, layer: usize) -> &NeighborAttention {
        &self.layers[layer].attn
    }

    /// Refines fused features `[N, F]` of points at `coords` (model
    /// coordinates) over the neighborhood `nb` shared by all layers.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &[[f64; 3]],
        nb: &Neighborhood,
        fused: Var,
    ) -> Result<Var> {
        let (n, f) = g.value(fused).dims2();
        if n != coords.len() || f != self.feature_dim {
            return Err(Error::Shape(format!(
                "fused features [{n},{f}] for {} points of width {}",
                coords.len(),
                self.feature_dim
            )));
        }
        let c = g.input(coords_tensor(coords));
        let pe = self.pe.forward(g, store, c);
        let h = g.add(fused, pe);
        let mut z = self.input.apply(g, store, h);
        for layer in &self.layers {
            z = match self.cfg.norm {
                NormPlacement::PreNorm => {
                    let n1 = layer.norm1.apply(g, store, z);
                    let a = layer.attn.forward_delta(g, store, n1, nb)?;
                    let z1 = g.add(z, a);
                    let n2 = layer.norm2.apply(g, store, z1);
                    let ff = ffn(g, store, layer, n2);
                    g.add(z1, ff)
                }
                NormPlacement::PostNorm => {
                    let a = layer.attn.forward_delta(g, store, z, nb)?;
                    let s = g.add(z, a);
                    let z1 = layer.norm1.apply(g, store, s);
                    let ff = ffn(g, store, layer, z1);
                    let s = g.add(z1, ff);
                    layer.norm2.apply(g, store, s)
                }
            };
        }
        Ok(self.output.apply(g, store, z))
    }
}

fn ffn(g: &mut Graph, store: &ParamStore, layer: &Layer, x: Var) -> Var {
    let h = layer.fc1.apply(g, store, x);
    let h = g.relu(h);
    layer.fc2.apply(g, store, h)
}
