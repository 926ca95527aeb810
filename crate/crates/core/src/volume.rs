//! Attenuation volumes and the two-file `.vol` / `.raw` format.
//!
//! The `.vol` header is plain text:
//!
//! ```text
//! dims=64 64 64
//! spacing_mm=6.4 6.4 6.4
//! dtype=f32le
//! order=x-fastest
//! ```
//!
//! and the payload lives next to it with the `.raw` extension. Normalized
//! coordinates run over `[-1,1]³` with `±1` at the outermost voxel centers.

use std::path::{Path, PathBuf};

use crate::interp::trilinear;
use crate::{Error, Result};

/// Shape and physical spacing of a voxel grid centered on the isocenter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("grid dims {dims:?} must be positive")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing {spacing_mm:?} must be positive")));
        }
        Ok(Self { dims, spacing_mm })
    }

    /// Cubic grid of `n` voxels per side covering `extent_mm`.
    pub fn covering(n: usize, extent_mm: [f64; 3]) -> Result<Self> {
        Self::new([n; 3], [extent_mm[0] / n as f64, extent_mm[1] / n as f64, extent_mm[2] / n as f64])
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Half-distance between the outermost voxel centers, per axis. Maps
    /// normalized coordinates to world mm.
    pub fn center_half_extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0 * self.spacing_mm[a])
    }

    /// Half-size of the voxel-boundary box.
    pub fn box_half_extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 / 2.0 * self.spacing_mm[a])
    }

    pub fn voxel_center_mm(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let idx = [i, j, k];
        std::array::from_fn(|a| (idx[a] as f64 - (self.dims[a] as f64 - 1.0) / 2.0) * self.spacing_mm[a])
    }

    /// Normalized coordinate of a voxel center.
    pub fn voxel_center_normalized(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let idx = [i, j, k];
        std::array::from_fn(|a| {
            let n = self.dims[a];
            if n == 1 {
                0.0
            } else {
                2.0 * idx[a] as f64 / (n - 1) as f64 - 1.0
            }
        })
    }

    /// World position (mm) of a normalized coordinate.
    pub fn normalized_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let h = self.center_half_extent_mm();
        [p[0] * h[0], p[1] * h[1], p[2] * h[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!("grid {:?} needs {} voxels, got {}", grid.dims, grid.len(), data.len())));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, data: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.grid.spacing_mm
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Trilinear sample at a normalized coordinate, border clamped.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f64 {
        let d = self.grid.dims;
        let f = std::array::from_fn(|a| (p[a] + 1.0) * 0.5 * (d[a] as f64 - 1.0));
        trilinear(&self.data, d, f)
    }

    /// Trilinear sample at a world position (mm), border clamped.
    pub fn sample_world(&self, p: [f64; 3]) -> f64 {
        let d = self.grid.dims;
        let s = self.grid.spacing_mm;
        let f = std::array::from_fn(|a| p[a] / s[a] + (d[a] as f64 - 1.0) * 0.5);
        trilinear(&self.data, d, f)
    }

    /// `clamp((v - lo) / (hi - lo), 0, 1)` per voxel.
    pub fn normalized(&self, lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidArgument(format!("normalization needs hi > lo, got lo={lo} hi={hi}")));
        }
        let span = hi - lo;
        Ok(self.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
    }

    /// Writes `path` (`.vol` header) and the sibling `.raw` payload. Data is
    /// stored as `f32le` when every voxel is exactly representable in 32 bits,
    /// otherwise as `f64le`, so the round trip is always bit-exact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let lossless_f32 = self.data.iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
        let dtype = if lossless_f32 { "f32le" } else { "f64le" };
        let d = self.grid.dims;
        let s = self.grid.spacing_mm;
        let header = format!(
            "dims={} {} {}\nspacing_mm={} {} {}\ndtype={dtype}\norder=x-fastest\n",
            d[0], d[1], d[2], s[0], s[1], s[2]
        );
        let mut bytes = Vec::with_capacity(self.data.len() * if lossless_f32 { 4 } else { 8 });
        for &v in &self.data {
            if lossless_f32 {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, header)?;
        std::fs::write(raw_path(path), bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let (grid, dtype) = parse_header(&text)?;
        let bytes = std::fs::read(raw_path(path))?;
        let width = if dtype == "f32le" { 4 } else { 8 };
        let expected = grid.len() * width;
        if bytes.len() != expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        let data = if width == 4 {
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        } else {
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        Self::new(grid, data)
    }
}

/// `.raw` payload path belonging to a `.vol` header path.
pub fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn parse_header(text: &str) -> Result<(GridSpec, &'static str)> {
    let mut dims = None;
    let mut spacing = None;
    let mut dtype = None;
    let mut order = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(line, "expected key=value"))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "dims" => {
                let vals: Vec<usize> = v
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::format("dims", format!("bad count `{t}`"))))
                    .collect::<Result<_>>()?;
                let arr: [usize; 3] = vals.try_into().map_err(|_| Error::format("dims", "need three counts"))?;
                dims = Some(arr);
            }
            "spacing_mm" => {
                let vals: Vec<f64> = v
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::format("spacing_mm", format!("bad length `{t}`"))))
                    .collect::<Result<_>>()?;
                let arr: [f64; 3] = vals.try_into().map_err(|_| Error::format("spacing_mm", "need three lengths"))?;
                spacing = Some(arr);
            }
            "dtype" => {
                dtype = Some(match v {
                    "f32le" => "f32le",
                    "f64le" => "f64le",
                    other => return Err(Error::format("dtype", format!("unsupported `{other}`"))),
                })
            }
            "order" => {
                if v != "x-fastest" {
                    return Err(Error::format("order", format!("unsupported `{v}`")));
                }
                order = Some(());
            }
            other => return Err(Error::format(other, "unknown key")),
        }
    }
    let dims = dims.ok_or_else(|| Error::format("dims", "missing"))?;
    let spacing = spacing.ok_or_else(|| Error::format("spacing_mm", "missing"))?;
    let dtype = dtype.ok_or_else(|| Error::format("dtype", "missing"))?;
    order.ok_or_else(|| Error::format("order", "missing"))?;
    let grid = GridSpec::new(dims, spacing).map_err(|e| Error::format("dims", e.to_string()))?;
    Ok((grid, dtype))
}
