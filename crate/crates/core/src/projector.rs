//! Line-integral forward projection by uniform ray marching, and the
//! voxel-driven backprojector used by the analytic and iterative baselines.

use rayon::prelude::*;

use crate::interp::bilinear;
use crate::{Error, GridSpec, Projection, Result, ScannerGeometry, Volume};

/// Half the smallest voxel spacing.
pub fn default_step_mm(grid: &GridSpec) -> f64 {
    grid.spacing_mm.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0
}

/// Entry and exit parameters of the ray `o + t*d` through the box
/// `[-half, half]` (slab method), or `None` when it misses.
pub fn ray_box(o: [f64; 3], d: [f64; 3], half: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < -half[a] || o[a] > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((-half[a] - o[a]) * inv, (half[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Source position and unit direction of the ray through the center of
/// detector pixel `(iu, iv)`, plus the source-to-pixel distance.
pub fn pixel_ray(geom: &ScannerGeometry, angle_deg: f64, iu: usize, iv: usize) -> ([f64; 3], [f64; 3], f64) {
    let [nu, nv] = geom.detector_pixels;
    let u = (iu as f64 + 0.5) / nu as f64;
    let v = (iv as f64 + 0.5) / nv as f64;
    let src = geom.source_position(angle_deg);
    let det = geom.detector_point_world(angle_deg, u, v);
    let d = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    (src, [d[0] / len, d[1] / len, d[2] / len], len)
}

/// Digitally reconstructed radiograph: each pixel holds the integral of the
/// volume along the source-to-pixel ray, by midpoint ray marching with
/// trilinear sampling inside the volume box.
pub fn render_drr(volume: &Volume, geom: &ScannerGeometry, angle_deg: f64, step_mm: f64) -> Result<Projection> {
    geom.validate()?;
    if !(step_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("ray step {step_mm} must be positive")));
    }
    let [nu, nv] = geom.detector_pixels;
    let half = volume.grid().box_half_extent_mm();
    let mut data = vec![0.0; nu * nv];
    data.par_chunks_mut(nu).enumerate().for_each(|(iv, row)| {
        for (iu, px) in row.iter_mut().enumerate() {
            let (src, dir, len) = pixel_ray(geom, angle_deg, iu, iv);
            let Some((t0, t1)) = ray_box(src, dir, half) else { continue };
            let (t0, t1) = (t0.max(0.0), t1.min(len));
            if t1 <= t0 {
                continue;
            }
            let n = ((t1 - t0) / step_mm).ceil().max(1.0) as usize;
            let h = (t1 - t0) / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let t = t0 + (k as f64 + 0.5) * h;
                acc += volume.sample_world([src[0] + t * dir[0], src[1] + t * dir[1], src[2] + t * dir[2]]);
            }
            *px = acc * h;
        }
    });
    Ok(Projection { width: nu, height: nv, data })
}

/// Per-voxel weighting applied by [`backproject`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    None,
    /// `(sid / depth)²`, with `depth` the voxel's distance from the source
    /// along the central ray.
    InverseSquare,
}

/// Voxel-driven backprojection: every voxel receives the bilinearly
/// interpolated detector value at its projection (times the weighting), or
/// zero when it projects outside the detector.
pub fn backproject(
    image: &Projection,
    geom: &ScannerGeometry,
    angle_deg: f64,
    grid: &GridSpec,
    weighting: Weighting,
) -> Result<Volume> {
    let mut out = Volume::zeros(*grid);
    backproject_into(out.data_mut(), image, geom, angle_deg, grid, weighting, 1.0)?;
    Ok(out)
}

/// Accumulating form of [`backproject`]: `acc += scale * backproject(..)`.
pub fn backproject_into(
    acc: &mut [f64],
    image: &Projection,
    geom: &ScannerGeometry,
    angle_deg: f64,
    grid: &GridSpec,
    weighting: Weighting,
    scale: f64,
) -> Result<()> {
    geom.validate()?;
    if [image.width, image.height] != geom.detector_pixels || image.data.len() != image.width * image.height {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{}, detector is {}x{}",
            image.width, image.height, geom.detector_pixels[0], geom.detector_pixels[1]
        )));
    }
    if acc.len() != grid.len() {
        return Err(Error::Shape(format!("accumulator has {} voxels, grid {}", acc.len(), grid.len())));
    }
    let [nx, ny, _] = grid.dims;
    let sid = geom.source_to_isocenter_mm;
    acc.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_center_mm(i, j, k);
                let Ok(dp) = geom.project_point(angle_deg, p) else { continue };
                if !dp.visible {
                    continue;
                }
                let w = match weighting {
                    Weighting::None => 1.0,
                    Weighting::InverseSquare => (sid / dp.depth_mm).powi(2),
                };
                slab[j * nx + i] += scale * w * bilinear(&image.data, image.width, image.height, dp.u, dp.v);
            }
        }
    });
    Ok(())
}
