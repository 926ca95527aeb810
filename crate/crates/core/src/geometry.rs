//! Circular cone-beam acquisition geometry.
//!
//! World frame: isocenter at the origin, rotation about `z`. At gantry angle
//! `θ` the world is rotated by `-θ` into the gantry frame, where the source
//! sits at `(0, -sid, 0)` and the flat detector is the plane
//! `y = sdd - sid`, with `u` along `+x` and `v` along `+z`. Detector
//! coordinates are normalized to `[0,1]²` with `(0,0)` at the `(-u,-v)`
//! corner.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScannerGeometry {
    pub source_to_isocenter_mm: f64,
    pub source_to_detector_mm: f64,
    /// Physical detector size along `(u, v)`.
    pub detector_size_mm: [f64; 2],
    /// Pixel counts along `(u, v)`.
    pub detector_pixels: [usize; 2],
    /// Reconstruction region, centered on the isocenter.
    pub volume_extent_mm: [f64; 3],
}

impl Default for ScannerGeometry {
    /// 1000 mm source-isocenter, 1500 mm source-detector, 256² pixels of
    /// 3.6 mm, 409.6 mm cube. The detector is wide enough that every point
    /// of the cube projects inside it at every angle.
    fn default() -> Self {
        Self {
            source_to_isocenter_mm: 1000.0,
            source_to_detector_mm: 1500.0,
            detector_size_mm: [921.6, 921.6],
            detector_pixels: [256, 256],
            volume_extent_mm: [409.6, 409.6, 409.6],
        }
    }
}

/// Projection of a world point onto the detector of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorPoint {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
    /// Distance from the source along the central ray (gantry `y + sid`).
    pub depth_mm: f64,
}

const CFG_KEYS: [&str; 9] =
    ["sid_mm", "sdd_mm", "det_px_u", "det_px_v", "det_mm_u", "det_mm_v", "vol_mm_x", "vol_mm_y", "vol_mm_z"];

impl ScannerGeometry {
    pub fn validate(&self) -> Result<()> {
        let sid = self.source_to_isocenter_mm;
        let sdd = self.source_to_detector_mm;
        if !(sid > 0.0 && sdd > sid && sid.is_finite() && sdd.is_finite()) {
            return Err(Error::InvalidArgument(format!("need sdd > sid > 0, got sid={sid} sdd={sdd}")));
        }
        if self.detector_pixels.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!("detector pixels {:?} must be >= 2", self.detector_pixels)));
        }
        if self.detector_size_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("detector size {:?} must be > 0", self.detector_size_mm)));
        }
        if self.volume_extent_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("volume extent {:?} must be > 0", self.volume_extent_mm)));
        }
        Ok(())
    }

    pub fn magnification(&self) -> f64 {
        self.source_to_detector_mm / self.source_to_isocenter_mm
    }

    /// Pixel pitch along `(u, v)` in mm.
    pub fn pixel_pitch_mm(&self) -> [f64; 2] {
        [
            self.detector_size_mm[0] / self.detector_pixels[0] as f64,
            self.detector_size_mm[1] / self.detector_pixels[1] as f64,
        ]
    }

    /// Same physical detector sampled with a different pixel count.
    pub fn with_detector_pixels(&self, pixels: [usize; 2]) -> Self {
        Self { detector_pixels: pixels, ..self.clone() }
    }

    /// Source position in world coordinates at `angle_deg`.
    pub fn source_position(&self, angle_deg: f64) -> [f64; 3] {
        rotate_z([0.0, -self.source_to_isocenter_mm, 0.0], angle_deg)
    }

    /// World position of a normalized detector coordinate at `angle_deg`.
    pub fn detector_point_world(&self, angle_deg: f64, u: f64, v: f64) -> [f64; 3] {
        let x = (u - 0.5) * self.detector_size_mm[0];
        let y = self.source_to_detector_mm - self.source_to_isocenter_mm;
        let z = (v - 0.5) * self.detector_size_mm[1];
        rotate_z([x, y, z], angle_deg)
    }

    /// Perspective projection of world point `p` (mm) onto the detector.
    pub fn project_point(&self, angle_deg: f64, p: [f64; 3]) -> Result<DetectorPoint> {
        let q = rotate_z(p, -angle_deg);
        let sid = self.source_to_isocenter_mm;
        let depth = q[1] + sid;
        let tol = 1e-9 * sid;
        if depth.abs() <= tol && q[0].abs() <= tol && q[2].abs() <= tol {
            return Err(Error::DegenerateRay);
        }
        if depth <= 0.0 {
            return Err(Error::BehindSource);
        }
        let scale = self.source_to_detector_mm / depth;
        let u = q[0] * scale / self.detector_size_mm[0] + 0.5;
        let v = q[2] * scale / self.detector_size_mm[1] + 0.5;
        let visible = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
        Ok(DetectorPoint { u, v, visible, depth_mm: depth })
    }

    /// Serializes as the flat `key=value` `geom.cfg` text.
    pub fn to_cfg_string(&self) -> String {
        let vals = self.cfg_values();
        let mut s = String::new();
        for (k, v) in CFG_KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn cfg_values(&self) -> [String; 9] {
        [
            self.source_to_isocenter_mm.to_string(),
            self.source_to_detector_mm.to_string(),
            self.detector_pixels[0].to_string(),
            self.detector_pixels[1].to_string(),
            self.detector_size_mm[0].to_string(),
            self.detector_size_mm[1].to_string(),
            self.volume_extent_mm[0].to_string(),
            self.volume_extent_mm[1].to_string(),
            self.volume_extent_mm[2].to_string(),
        ]
    }

    pub fn parse_cfg(text: &str) -> Result<Self> {
        let mut vals: [Option<String>; 9] = Default::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(line, "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = CFG_KEYS.iter().position(|&c| c == k).ok_or_else(|| Error::format(k, "unknown key"))?;
            vals[slot] = Some(v.to_string());
        }
        let get = |i: usize| vals[i].clone().ok_or_else(|| Error::format(CFG_KEYS[i], "missing"));
        let f = |i: usize| -> Result<f64> { get(i)?.parse().map_err(|_| Error::format(CFG_KEYS[i], "not a number")) };
        let n = |i: usize| -> Result<usize> { get(i)?.parse().map_err(|_| Error::format(CFG_KEYS[i], "not a count")) };
        let g = Self {
            source_to_isocenter_mm: f(0)?,
            source_to_detector_mm: f(1)?,
            detector_pixels: [n(2)?, n(3)?],
            detector_size_mm: [f(4)?, f(5)?],
            volume_extent_mm: [f(6)?, f(7)?, f(8)?],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_cfg(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_cfg_string())?;
        Ok(())
    }
}

/// Rotates `p` by `angle_deg` counter-clockwise about the `z` axis.
pub fn rotate_z(p: [f64; 3], angle_deg: f64) -> [f64; 3] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewAngleSet {
    pub angles_deg: Vec<f64>,
    pub seed: u64,
}

impl ViewAngleSet {
    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }
}

/// `m` angles drawn uniformly from `[0, 180)`, sorted ascending.
pub fn sample_view_angles(m: usize, seed: u64) -> Result<ViewAngleSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angles: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 180.0).collect();
    angles.sort_by(f64::total_cmp);
    Ok(ViewAngleSet { angles_deg: angles, seed })
}

/// `m` equally spaced angles `0, 180/m, ...`.
pub fn equiangular_view_angles(m: usize) -> Result<ViewAngleSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    Ok(ViewAngleSet { angles_deg: (0..m).map(|i| 180.0 * i as f64 / m as f64).collect(), seed: 0 })
}
