//! Random training points with trilinear ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Volume};

/// How training points are placed in the volume.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum PointSampling {
    /// Uniform over `(-1,1)³`.
    #[default]
    Uniform,
    /// Uniform proposals accepted with probability `floor + (1-floor)*value`.
    ForegroundBiased { floor: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch {
    /// Normalized coordinates strictly inside `(-1,1)³`.
    pub coords: Vec<[f64; 3]>,
    pub gt_values: Vec<f64>,
    pub seed: u64,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Draws `n` points from `volume` and fills their ground truth by trilinear
/// interpolation.
pub fn sample_points(volume: &Volume, n: usize, seed: u64, mode: PointSampling) -> Result<PointBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n);
    let mut gt_values = Vec::with_capacity(n);
    while coords.len() < n {
        let p = [open_unit(&mut rng), open_unit(&mut rng), open_unit(&mut rng)];
        let v = volume.trilinear_sample(p);
        if let PointSampling::ForegroundBiased { floor } = mode {
            let accept = floor + (1.0 - floor) * v.clamp(0.0, 1.0);
            if rng.random::<f64>() >= accept {
                continue;
            }
        }
        coords.push(p);
        gt_values.push(v);
    }
    Ok(PointBatch { coords, gt_values, seed })
}

/// Uniform draw from the open interval `(-1, 1)`.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = rng.random::<f64>() * 2.0 - 1.0;
        if x > -1.0 {
            return x;
        }
    }
}
