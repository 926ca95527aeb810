//! Cross-view point feature querying: project each point into every view,
//! sample each decoder map bilinearly, keep the elementwise maximum over
//! views, and concatenate the scales.

use std::fmt;
use std::str::FromStr;

use cbct_core::interp::bilinear_corners;
use cbct_core::ScannerGeometry;
use cbct_nn::{Graph, Tensor, Var};
use rayon::prelude::*;

use crate::encoder::{FeaturePyramid, FEATURE_CHANNELS};
use crate::{Error, Result};

/// Which decoder maps feed the per-point feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureSet {
    F4,
    F4F3,
    F4F3F2,
    #[default]
    Full,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [FeatureSet::F4, FeatureSet::F4F3, FeatureSet::F4F3F2, FeatureSet::Full];

    /// Scale indices (0 = `F1`) in concatenation order.
    pub fn scales(self) -> &'static [usize] {
        match self {
            FeatureSet::F4 => &[3],
            FeatureSet::F4F3 => &[2, 3],
            FeatureSet::F4F3F2 => &[1, 2, 3],
            FeatureSet::Full => &[0, 1, 2, 3],
        }
    }

    pub fn dim(self) -> usize {
        self.scales().iter().map(|&s| FEATURE_CHANNELS[s]).sum()
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::F4 => "f4",
            FeatureSet::F4F3 => "f4+f3",
            FeatureSet::F4F3F2 => "f4+f3+f2",
            FeatureSet::Full => "full",
        })
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.to_ascii_lowercase().chars().filter(|c| !c.is_whitespace()).collect();
        match norm.replace(',', "+").as_str() {
            "f4" => Ok(FeatureSet::F4),
            "f4+f3" => Ok(FeatureSet::F4F3),
            "f4+f3+f2" => Ok(FeatureSet::F4F3F2),
            "full" | "f4+f3+f2+f1" => Ok(FeatureSet::Full),
            _ => Err(Error::InvalidArgument(format!("unknown feature set '{s}'"))),
        }
    }
}

/// Maps a world position (mm) to model coordinates: the reconstruction box
/// of `geom` becomes `[-1,1]³`.
pub fn model_coords(geom: &ScannerGeometry, world: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| world[a] / (geom.volume_extent_mm[a] / 2.0))
}

pub fn world_from_model(geom: &ScannerGeometry, q: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| q[a] * geom.volume_extent_mm[a] / 2.0)
}

/// Detector coordinates of a set of points in every view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewProjections {
    /// `uv[view][point]`.
    pub uv: Vec<Vec<[f64; 2]>>,
    /// Points that fall outside the detector in every view; they still get
    /// border-clamped samples.
    pub invisible_everywhere: usize,
}

impl ViewProjections {
    pub fn views(&self) -> usize {
        self.uv.len()
    }

    pub fn points(&self) -> usize {
        self.uv.first().map_or(0, |v| v.len())
    }
}

/// Projects world points (mm) into each view.
pub fn project_points(geom: &ScannerGeometry, angles_deg: &[f64], world: &[[f64; 3]]) -> Result<ViewProjections> {
    if angles_deg.is_empty() {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    let mut visible_any = vec![false; world.len()];
    let mut uv = Vec::with_capacity(angles_deg.len());
    for &a in angles_deg {
        let row = world
            .par_iter()
            .map(|&p| geom.project_point(a, p).map(|d| ([d.u, d.v], d.visible)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for (flag, (_, vis)) in visible_any.iter_mut().zip(&row) {
            *flag |= *vis;
        }
        uv.push(row.into_iter().map(|(p, _)| p).collect());
    }
    let invisible_everywhere = visible_any.iter().filter(|v| !**v).count();
    Ok(ViewProjections { uv, invisible_everywhere })
}

/// Bilinear sample of every channel of a `[C,H,W]` map at `(u, v)`, with
/// cell centers at `(i+0.5)/n` and border clamping.
pub fn bilinear_sample_feature(map: &[f64], c: usize, h: usize, w: usize, u: f64, v: f64) -> Vec<f64> {
    let (idx, wt) = bilinear_corners(u, v, w, h);
    (0..c)
        .map(|ch| {
            let m = &map[ch * h * w..(ch + 1) * h * w];
            (0..4).map(|i| wt[i] * m[idx[i]]).sum()
        })
        .collect()
}

/// Elementwise maximum over views.
pub fn fuse_views_max(per_view: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_view.first().ok_or_else(|| Error::InvalidArgument("no views to fuse".into()))?;
    if per_view.iter().any(|v| v.len() != first.len()) {
        return Err(Error::Shape("views carry different channel counts".into()));
    }
    let mut out = first.clone();
    for v in &per_view[1..] {
        for (o, x) in out.iter_mut().zip(v) {
            if *x > *o {
                *o = *x;
            }
        }
    }
    Ok(out)
}

/// `[f1 | f2 | f3 | f4]` with the exact widths of [`FEATURE_CHANNELS`].
pub fn concat_scales(f1: &[f64], f2: &[f64], f3: &[f64], f4: &[f64]) -> Result<Vec<f64>> {
    let got = [f1.len(), f2.len(), f3.len(), f4.len()];
    if got != FEATURE_CHANNELS {
        return Err(Error::Shape(format!("scale widths {got:?}, expected {FEATURE_CHANNELS:?}")));
    }
    Ok([f1, f2, f3, f4].concat())
}

/// Graph op: samples a `[M,C,H,W]` map at each point's projection in each
/// view and max-fuses over views, giving `[N,C]`. The gradient of each
/// output goes to the lowest-indexed view attaining the maximum.
pub fn fuse_map(g: &mut Graph, map: Var, proj: &ViewProjections) -> Result<Var> {
    let (m, c, h, w) = g.value(map).dims4();
    if m != proj.views() {
        return Err(Error::Shape(format!("{m} feature maps for {} views", proj.views())));
    }
    let n = proj.points();
    let hw = h * w;
    let taps: Vec<([usize; 4], [f64; 4])> = proj
        .uv
        .iter()
        .flat_map(|row| row.iter().map(|&[u, v]| bilinear_corners(u, v, w, h)))
        .collect();
    let data = g.value(map).data();
    let mut out = vec![0.0; n * c];
    let mut arg = vec![0u16; n * c];
    out.par_chunks_mut(c).zip(arg.par_chunks_mut(c)).enumerate().for_each(|(p, (orow, arow))| {
        for view in 0..m {
            let (idx, wt) = &taps[view * n + p];
            let base = view * c * hw;
            for ch in 0..c {
                let src = &data[base + ch * hw..base + (ch + 1) * hw];
                let s = wt[0] * src[idx[0]] + wt[1] * src[idx[1]] + wt[2] * src[idx[2]] + wt[3] * src[idx[3]];
                if view == 0 || s > orow[ch] {
                    orow[ch] = s;
                    arow[ch] = view as u16;
                }
            }
        }
    });
    Ok(g.push(
        Tensor::from_vec(&[n, c], out),
        &[map],
        Box::new(move |ctx, grads| {
            if !grads.wants(map) {
                return;
            }
            let d = grads.slot(map);
            for p in 0..n {
                for ch in 0..c {
                    let gout = ctx.grad[p * c + ch];
                    if gout == 0.0 {
                        continue;
                    }
                    let view = arg[p * c + ch] as usize;
                    let (idx, wt) = &taps[view * n + p];
                    let base = view * c * hw + ch * hw;
                    for i in 0..4 {
                        d[base + idx[i]] += wt[i] * gout;
                    }
                }
            }
        }),
    ))
}

/// Fused per-point features `[N, features.dim()]` in `[F1|F2|F3|F4]` order
/// restricted to the selected scales.
pub fn query_point_features(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    proj: &ViewProjections,
    features: FeatureSet,
) -> Result<Var> {
    let parts = features
        .scales()
        .iter()
        .map(|&s| fuse_map(g, pyramid.maps[s], proj))
        .collect::<Result<Vec<_>>>()?;
    let out = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) };
    let width = g.value(out).dims2().1;
    if width != features.dim() {
        return Err(Error::Shape(format!("fused width {width}, expected {}", features.dim())));
    }
    Ok(out)
}
