//! Shared per-view encoder: a convolutional downsampling path, a token
//! self-attention bottleneck at 1/8 resolution, and a cascaded upsampler
//! with skip connections that emits four feature maps.

use cbct_nn::{attention_weights, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::{Error, Result};

/// Channels of the decoder maps `F1..F4`, coarsest first.
pub const FEATURE_CHANNELS: [usize; 4] = [256, 128, 64, 16];
/// Width of the per-point feature vector when all four maps are used.
pub const FUSED_DIM: usize = 464;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Expected (square) input side in pixels; must be a multiple of 8.
    pub image_size: usize,
    pub stem_width: usize,
    /// Widths of the three stride-2 stages (1/2, 1/4, 1/8 resolution).
    pub stage_widths: [usize; 3],
    pub blocks: usize,
    pub heads: usize,
    pub mlp_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 256, stem_width: 16, stage_widths: [64, 128, 256], blocks: 4, heads: 4, mlp_width: 512 }
    }
}

/// One pre-norm transformer block over token rows.
#[derive(Clone, Debug)]
pub struct TokenBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TokenBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_width: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("token width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            q: Linear::normal(store, rng, &format!("{name}.attn.q"), dim, dim, 0.02),
            k: Linear::normal(store, rng, &format!("{name}.attn.k"), dim, dim, 0.02),
            v: Linear::normal(store, rng, &format!("{name}.attn.v"), dim, dim, 0.02),
            out: Linear::normal(store, rng, &format!("{name}.attn.out"), dim, dim, 0.02),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, mlp_width),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), mlp_width, dim),
            heads,
        })
    }

    /// Output-projected multi-head self-attention of `x` (no residual),
    /// over `groups` independent sequences of `seq` tokens.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, x: Var, groups: usize, seq: usize) -> Var {
        let q = self.q.apply(g, store, x);
        let k = self.k.apply(g, store, x);
        let v = self.v.apply(g, store, x);
        let a = g.multi_head_attention(q, k, v, groups, seq, self.heads);
        self.out.apply(g, store, a)
    }

    /// `x + attn(norm1(x))`, then `+ mlp(norm2(.))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, groups: usize, seq: usize) -> Var {
        let n = self.norm1.apply(g, store, x);
        let a = self.attend(g, store, n, groups, seq);
        let x = g.add(x, a);
        let n = self.norm2.apply(g, store, x);
        let h = self.fc1.apply(g, store, n);
        let h = g.relu(h);
        let h = self.fc2.apply(g, store, h);
        g.add(x, h)
    }

    /// Attention probabilities `[heads][seq*seq]` of one token sequence.
    pub fn attention_probabilities(&self, store: &ParamStore, tokens: &Tensor) -> Vec<Vec<f64>> {
        let mut g = Graph::eval();
        let x = g.input(tokens.clone());
        let n = self.norm1.apply(&mut g, store, x);
        let q = self.q.apply(&mut g, store, n);
        let k = self.k.apply(&mut g, store, n);
        attention_weights(g.value(q), g.value(k), self.heads)
    }
}

/// Decoder maps of a batch of views, each `[M, C_s, H_s, W_s]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub maps: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Conv2d,
    down: [Conv2d; 3],
    blocks: Vec<TokenBlock>,
    final_norm: LayerNorm,
    decoder: [Conv2d; 4],
}

/// Fixed 2D sinusoidal embedding `[h*w, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; h * w * dim];
    let enc = |pos: usize, i: usize, width: usize| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..half {
                row[i] = enc(y, i, half);
            }
            for i in half..dim {
                row[i] = enc(x, i - half, dim - half);
            }
        }
    }
    Tensor::from_vec(&[h * w, dim], out)
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: EncoderConfig) -> Result<Self> {
        if cfg.image_size < 8 || cfg.image_size % 8 != 0 {
            return Err(Error::InvalidArgument(format!("image size {} must be a positive multiple of 8", cfg.image_size)));
        }
        let [w1, w2, w3] = cfg.stage_widths;
        let stem = Conv2d::new(store, rng, "encoder.stem", 1, cfg.stem_width, 3, 1);
        let down = [
            Conv2d::new(store, rng, "encoder.down1", cfg.stem_width, w1, 3, 2),
            Conv2d::new(store, rng, "encoder.down2", w1, w2, 3, 2),
            Conv2d::new(store, rng, "encoder.down3", w2, w3, 3, 2),
        ];
        let blocks = (0..cfg.blocks)
            .map(|b| TokenBlock::new(store, rng, &format!("encoder.block{b}"), w3, cfg.heads, cfg.mlp_width))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, "encoder.norm", w3);
        let [c1, c2, c3, c4] = FEATURE_CHANNELS;
        let decoder = [
            Conv2d::new(store, rng, "encoder.dec1", w3, c1, 3, 1),
            Conv2d::new(store, rng, "encoder.dec2", c1 + w2, c2, 3, 1),
            Conv2d::new(store, rng, "encoder.dec3", c2 + w1, c3, 3, 1),
            Conv2d::new(store, rng, "encoder.dec4", c3 + cfg.stem_width, c4, 3, 1),
        ];
        Ok(Self { cfg, stem, down, blocks, final_norm, decoder })
    }

    /// Checks a `[M,1,H,W]` view stack against the configured input size.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || shape[0] == 0 {
            return Err(Error::Shape(format!("expected [M,1,{s},{s}] views, got {shape:?}")));
        }
        Ok(())
    }

    /// Encodes `[M,1,H,W]` views with shared weights. Any `H = W` that is a
    /// multiple of 8 works; [`Encoder::check_input`] enforces the
    /// configured size.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<FeaturePyramid> {
        let (m, c, h, w) = g.value(images).dims4();
        if c != 1 || h != w || h % 8 != 0 || h == 0 {
            return Err(Error::Shape(format!("views must be [M,1,S,S] with S a multiple of 8, got [{m},{c},{h},{w}]")));
        }
        let conv_relu = |g: &mut Graph, conv: &Conv2d, x: Var| {
            let y = conv.apply(g, store, x);
            g.relu(y)
        };
        let s0 = conv_relu(g, &self.stem, images);
        let s1 = conv_relu(g, &self.down[0], s0);
        let s2 = conv_relu(g, &self.down[1], s1);
        let s3 = conv_relu(g, &self.down[2], s2);

        let (hb, wb) = (h / 8, w / 8);
        let dim = self.cfg.stage_widths[2];
        let mut t = g.nchw_to_tokens(s3);
        let pe = sinusoidal_2d(hb, wb, dim);
        let mut tiled = Vec::with_capacity(m * pe.len());
        for _ in 0..m {
            tiled.extend_from_slice(pe.data());
        }
        t = g.add_const(t, &Tensor::from_vec(&[m * hb * wb, dim], tiled));
        for b in &self.blocks {
            t = b.forward(g, store, t, m, hb * wb);
        }
        t = self.final_norm.apply(g, store, t);
        let bottleneck = g.tokens_to_nchw(t, m, hb, wb);

        let f1 = conv_relu(g, &self.decoder[0], bottleneck);
        let up = g.upsample2x(f1);
        let cat = g.concat_channels(&[up, s2]);
        let f2 = conv_relu(g, &self.decoder[1], cat);
        let up = g.upsample2x(f2);
        let cat = g.concat_channels(&[up, s1]);
        let f3 = conv_relu(g, &self.decoder[2], cat);
        let up = g.upsample2x(f3);
        let cat = g.concat_channels(&[up, s0]);
        let f4 = conv_relu(g, &self.decoder[3], cat);
        Ok(FeaturePyramid { maps: [f1, f2, f3, f4] })
    }

    pub fn blocks(&self) -> &[TokenBlock] {
        &self.blocks
    }
}
