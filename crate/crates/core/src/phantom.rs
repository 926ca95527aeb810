//! Procedural test phantoms, rasterized with 2x2x2 supersampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, GridSpec, Result, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    /// Unit sphere of radius 0.6 (normalized units).
    Sphere,
    /// Unit cube of half-size 0.5.
    Cube,
    /// Seeded nested ellipsoidal shells with a few small inserts.
    Shells,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "cube" => Ok(Self::Cube),
            "shells" => Ok(Self::Shells),
            other => Err(Error::InvalidArgument(format!("unknown phantom kind `{other}`"))),
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    value: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Painter's-order layers: later layers overwrite earlier ones.
fn shell_layers(seed: u64) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let outer = [r(0.75, 0.9), r(0.6, 0.8), r(0.7, 0.9)];
    let scaled = |f: f64| [outer[0] * f, outer[1] * f, outer[2] * f];
    let mut layers = vec![
        Ellipsoid { center: [0.0; 3], semi: outer, value: r(0.2, 0.3) },
        Ellipsoid { center: [0.0; 3], semi: scaled(0.8), value: r(0.55, 0.7) },
        Ellipsoid { center: [0.0; 3], semi: scaled(0.62), value: r(0.3, 0.4) },
    ];
    let core_off = [r(-0.1, 0.1), r(-0.1, 0.1), r(-0.1, 0.1)];
    layers.push(Ellipsoid { center: core_off, semi: scaled(0.25), value: r(0.85, 1.0) });
    for _ in 0..3 {
        let c = [r(-0.35, 0.35), r(-0.3, 0.3), r(-0.35, 0.35)];
        let rad = r(0.06, 0.12);
        layers.push(Ellipsoid { center: c, semi: [rad; 3], value: r(0.7, 0.9) });
    }
    layers
}

fn value_at(kind: PhantomKind, layers: &[Ellipsoid], p: [f64; 3]) -> f64 {
    match kind {
        PhantomKind::Sphere => (p.iter().map(|c| c * c).sum::<f64>() <= 0.36) as u8 as f64,
        PhantomKind::Cube => p.iter().all(|c| c.abs() <= 0.5) as u8 as f64,
        PhantomKind::Shells => layers.iter().rev().find(|e| e.contains(p)).map_or(0.0, |e| e.value),
    }
}

/// Rasterizes a phantom onto `grid`, values in `[0,1]`. `seed` only affects
/// [`PhantomKind::Shells`].
pub fn generate(kind: PhantomKind, grid: GridSpec, seed: u64) -> Volume {
    let layers = shell_layers(seed);
    let d = grid.dims;
    // sub-voxel offsets in normalized units
    let half_step: [f64; 3] = std::array::from_fn(|a| if d[a] > 1 { 0.5 / (d[a] - 1) as f64 } else { 0.0 });
    Volume::from_fn(grid, |i, j, k| {
        let c = grid.voxel_center_normalized(i, j, k);
        let mut acc = 0.0;
        for s in 0..8 {
            let o = [(s & 1) as f64 - 0.5, ((s >> 1) & 1) as f64 - 0.5, ((s >> 2) & 1) as f64 - 0.5];
            let p = [c[0] + o[0] * half_step[0], c[1] + o[1] * half_step[1], c[2] + o[2] * half_step[2]];
            acc += value_at(kind, &layers, p);
        }
        acc / 8.0
    })
}

/// Cubic phantom of `size` voxels per side over a cube of `extent_mm`.
pub fn generate_cube_grid(kind: PhantomKind, size: usize, extent_mm: f64, seed: u64) -> Result<Volume> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!("phantom size {size} must be >= 2")));
    }
    Ok(generate(kind, GridSpec::covering(size, [extent_mm; 3])?, seed))
}
