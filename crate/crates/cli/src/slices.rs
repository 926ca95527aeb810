//! Orthogonal mid-slices of a volume as 8-bit grayscale PNGs.

use std::fs::File;
use std::io::BufWriter;

use anyhow::{Context, Result};
use cbct_core::Volume;

fn write_png(path: &str, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {path}"))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(pixels)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<prefix>_axial.png` (z mid-plane), `<prefix>_coronal.png`
/// (y mid-plane) and `<prefix>_sagittal.png` (x mid-plane); intensities are
/// clamped to [0,1]. Rows run from high to low z in the vertical slices.
pub fn write_slices(vol: &Volume, prefix: &str) -> Result<()> {
    let [nx, ny, nz] = vol.dims();
    let (cx, cy, cz) = (nx / 2, ny / 2, nz / 2);
    let axial: Vec<u8> = (0..ny).flat_map(|j| (0..nx).map(move |i| (i, j))).map(|(i, j)| to_byte(vol.get(i, j, cz))).collect();
    write_png(&format!("{prefix}_axial.png"), nx, ny, &axial)?;
    let coronal: Vec<u8> =
        (0..nz).rev().flat_map(|k| (0..nx).map(move |i| (i, k))).map(|(i, k)| to_byte(vol.get(i, cy, k))).collect();
    write_png(&format!("{prefix}_coronal.png"), nx, nz, &coronal)?;
    let sagittal: Vec<u8> =
        (0..nz).rev().flat_map(|k| (0..ny).map(move |j| (j, k))).map(|(j, k)| to_byte(vol.get(cx, j, k))).collect();
    write_png(&format!("{prefix}_sagittal.png"), ny, nz, &sagittal)?;
    Ok(())
}
