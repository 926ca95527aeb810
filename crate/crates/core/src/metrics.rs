//! Image-quality metrics between volumes.
//!
//! SSIM is computed in 2D on every axial (`z`) slice and averaged over
//! slices.

use rayon::prelude::*;

use crate::{Error, Result, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("volumes are {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical volumes.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data range {data_range} must be positive")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Valid-mode separable filtering of a `w x h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(t, c)| c * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, c)| c * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `w x h` images.
pub fn ssim_2d(a: &[f64], b: &[f64], w: usize, h: usize, data_range: f64) -> Result<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "slice {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape(format!("images of {} and {} pixels, expected {}", a.len(), b.len(), w * h)));
    }
    let taps = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let e_aa = filter_valid(&aa, w, h, &taps);
    let e_bb = filter_valid(&bb, w, h, &taps);
    let e_ab = filter_valid(&ab, w, h, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Axial-slice SSIM averaged over `z`.
pub fn ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data range {data_range} must be positive")));
    }
    let [nx, ny, nz] = a.dims();
    let per_slice: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let s = k * nx * ny..(k + 1) * nx * ny;
            ssim_2d(&a.data()[s.clone()], &b.data()[s], nx, ny, data_range)
        })
        .collect::<Result<_>>()?;
    Ok(per_slice.iter().sum::<f64>() / nz as f64)
}
