//! Classical reconstructors: FDK filtered backprojection and SART.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::projector::{backproject_into, default_step_mm, render_drr, Weighting};
use crate::{Error, GridSpec, Projection, ProjectionSet, Result, ScannerGeometry, Volume};

/// Frequency-domain apodization of the ramp filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RampWindow {
    /// Plain Ram-Lak.
    #[default]
    None,
    Hann,
}

/// Frequency response of the band-limited Ram-Lak filter for rows of `n`
/// samples spaced `delta` apart, zero-padded to `len` (a power of two).
/// Built from the spatial kernel so the DC term is correct.
fn ramp_response(len: usize, delta: f64, window: RampWindow) -> Vec<Complex<f64>> {
    let mut k = vec![Complex::new(0.0, 0.0); len];
    k[0].re = 1.0 / (4.0 * delta);
    for n in (1..len / 2).step_by(2) {
        let val = -1.0 / ((n * n) as f64 * std::f64::consts::PI.powi(2) * delta);
        k[n].re = val;
        k[len - n].re = val;
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut k);
    if window == RampWindow::Hann {
        for (i, c) in k.iter_mut().enumerate() {
            let f = i.min(len - i) as f64 / len as f64;
            *c *= 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos());
        }
    }
    k
}

/// Cosine-weights and ramp-filters one view along detector rows. The result
/// lives on the virtual detector through the isocenter.
pub fn fdk_filter_view(image: &Projection, geom: &ScannerGeometry, window: RampWindow) -> Projection {
    let (nu, nv) = (image.width, image.height);
    let sdd = geom.source_to_detector_mm;
    let pitch = [geom.detector_size_mm[0] / nu as f64, geom.detector_size_mm[1] / nv as f64];
    let delta = pitch[0] * geom.source_to_isocenter_mm / sdd;
    let len = (2 * nu).next_power_of_two();
    let response = ramp_response(len, delta, window);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Projection::zeros(nu, nv);
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for iv in 0..nv {
        let v = (iv as f64 + 0.5 - nv as f64 / 2.0) * pitch[1];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for iu in 0..nu {
            let u = (iu as f64 + 0.5 - nu as f64 / 2.0) * pitch[0];
            let w = sdd / (sdd * sdd + u * u + v * v).sqrt();
            buf[iu].re = w * image.get(iu, iv);
        }
        fwd.process(&mut buf);
        for (c, h) in buf.iter_mut().zip(&response) {
            *c *= *h;
        }
        inv.process(&mut buf);
        for iu in 0..nu {
            out.data[iv * nu + iu] = buf[iu].re / len as f64;
        }
    }
    out
}

/// FDK reconstruction over a half scan with the plain ramp filter.
pub fn fdk_reconstruct(projections: &ProjectionSet, geom: &ScannerGeometry, grid: &GridSpec) -> Result<Volume> {
    fdk_reconstruct_with(projections, geom, grid, RampWindow::None)
}

pub fn fdk_reconstruct_with(
    projections: &ProjectionSet,
    geom: &ScannerGeometry,
    grid: &GridSpec,
    window: RampWindow,
) -> Result<Volume> {
    if projections.is_empty() {
        return Err(Error::InvalidArgument("FDK needs at least one view".into()));
    }
    projections.check_geometry(geom)?;
    let filtered: Vec<Projection> =
        projections.images.par_iter().map(|im| fdk_filter_view(im, geom, window)).collect();
    let scale = std::f64::consts::PI / projections.len() as f64;
    let mut out = Volume::zeros(*grid);
    for (img, &angle) in filtered.iter().zip(&projections.angles_deg) {
        backproject_into(out.data_mut(), img, geom, angle, grid, Weighting::InverseSquare, scale)?;
    }
    Ok(out)
}

/// SART from a zero start: for every view in turn,
/// `x += λ · B(r / L) / B(1)` where `r` is the projection residual, `L` the
/// per-ray intersection length and `B` the unweighted backprojector. Voxels
/// are clamped at zero after each update.
pub fn sart_reconstruct(
    projections: &ProjectionSet,
    geom: &ScannerGeometry,
    grid: &GridSpec,
    iterations: usize,
    relaxation: f64,
) -> Result<Volume> {
    sart_reconstruct_observed(projections, geom, grid, iterations, relaxation, |_, _| {})
}

/// [`sart_reconstruct`] calling `observe(iteration, &volume)` after each
/// full sweep over the views (iterations counted from 1).
pub fn sart_reconstruct_observed(
    projections: &ProjectionSet,
    geom: &ScannerGeometry,
    grid: &GridSpec,
    iterations: usize,
    relaxation: f64,
    mut observe: impl FnMut(usize, &Volume),
) -> Result<Volume> {
    if !(relaxation > 0.0 && relaxation <= 1.0) {
        return Err(Error::InvalidArgument(format!("relaxation {relaxation} outside (0, 1]")));
    }
    projections.check_geometry(geom)?;
    let mut x = Volume::zeros(*grid);
    if iterations == 0 {
        return Ok(x);
    }
    let step = default_step_mm(grid);
    let [nu, nv] = geom.detector_pixels;
    let ones_vol = Volume::from_fn(*grid, |_, _, _| 1.0);
    let ones_img = Projection { width: nu, height: nv, data: vec![1.0; nu * nv] };
    let guard = |d: f64| if d < 1e-8 { 1.0 } else { d };

    let mut ray_len = Vec::with_capacity(projections.len());
    let mut col_sum = Vec::with_capacity(projections.len());
    for &angle in &projections.angles_deg {
        let mut l = render_drr(&ones_vol, geom, angle, step)?;
        l.data.iter_mut().for_each(|d| *d = guard(*d));
        ray_len.push(l);
        let mut c = vec![0.0; grid.len()];
        backproject_into(&mut c, &ones_img, geom, angle, grid, Weighting::None, 1.0)?;
        c.iter_mut().for_each(|d| *d = guard(*d));
        col_sum.push(c);
    }

    let mut upd = vec![0.0; grid.len()];
    for it in 1..=iterations {
        for (vi, &angle) in projections.angles_deg.iter().enumerate() {
            let mut r = render_drr(&x, geom, angle, step)?;
            for ((ri, &mi), &li) in r.data.iter_mut().zip(&projections.images[vi].data).zip(&ray_len[vi].data) {
                *ri = (mi - *ri) / li;
            }
            upd.iter_mut().for_each(|u| *u = 0.0);
            backproject_into(&mut upd, &r, geom, angle, grid, Weighting::None, 1.0)?;
            for ((xi, &ui), &ci) in x.data_mut().iter_mut().zip(&upd).zip(&col_sum[vi]) {
                *xi = (*xi + relaxation * ui / ci).max(0.0);
            }
        }
        observe(it, &x);
    }
    Ok(x)
}

/// Forward-projects `volume` at every angle with the default step.
pub fn project_all(volume: &Volume, geom: &ScannerGeometry, angles_deg: &[f64]) -> Result<ProjectionSet> {
    let step = default_step_mm(volume.grid());
    let images = angles_deg.iter().map(|&a| render_drr(volume, geom, a, step)).collect::<Result<Vec<_>>>()?;
    ProjectionSet::new(angles_deg.to_vec(), images)
}
