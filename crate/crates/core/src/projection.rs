//! Detector images and projection sets on disk.
//!
//! A projection set directory holds `angles.txt` (one angle per line,
//! decimal degrees) and `view_0000.raw ...`, each a little-endian `f32`
//! image stored u-fastest. Image dimensions come from the geometry.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result, ScannerGeometry};

/// One detector image, u-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Projection {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, iu: usize, iv: usize) -> f64 {
        self.data[iv * self.width + iu]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub angles_deg: Vec<f64>,
    pub images: Vec<Projection>,
}

impl ProjectionSet {
    pub fn new(angles_deg: Vec<f64>, images: Vec<Projection>) -> Result<Self> {
        if angles_deg.len() != images.len() {
            return Err(Error::Shape(format!("{} angles for {} images", angles_deg.len(), images.len())));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.width != first.width || im.height != first.height) {
                return Err(Error::Shape("projection images differ in size".into()));
            }
        }
        Ok(Self { angles_deg, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Checks image sizes against the detector of `geom`.
    pub fn check_geometry(&self, geom: &ScannerGeometry) -> Result<()> {
        for im in &self.images {
            if [im.width, im.height] != geom.detector_pixels {
                return Err(Error::InvalidArgument(format!(
                    "projection is {}x{}, geometry detector is {}x{}",
                    im.width, im.height, geom.detector_pixels[0], geom.detector_pixels[1]
                )));
            }
        }
        Ok(())
    }

    /// Every image divided by the largest value of the whole set, so the set
    /// lies in `[0,1]` (returned unchanged if that maximum is not positive).
    pub fn normalized(&self) -> Self {
        let max = self.images.iter().map(Projection::max).fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            return self.clone();
        }
        let images = self
            .images
            .iter()
            .map(|im| Projection { data: im.data.iter().map(|v| (v / max).max(0.0)).collect(), ..im.clone() })
            .collect();
        Self { angles_deg: self.angles_deg.clone(), images }
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut angles = String::new();
        for a in &self.angles_deg {
            let _ = writeln!(angles, "{a}");
        }
        std::fs::write(dir.join("angles.txt"), angles)?;
        for (i, im) in self.images.iter().enumerate() {
            let mut bytes = Vec::with_capacity(im.data.len() * 4);
            for &v in &im.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            std::fs::write(dir.join(view_name(i)), bytes)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>, geom: &ScannerGeometry) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("angles.txt"))?;
        let angles: Vec<f64> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| l.parse().map_err(|_| Error::format(format!("angles.txt:{}", i + 1), "not a number")))
            .collect::<Result<_>>()?;
        let [w, h] = geom.detector_pixels;
        let mut images = Vec::with_capacity(angles.len());
        for i in 0..angles.len() {
            let bytes = std::fs::read(dir.join(view_name(i)))?;
            if bytes.len() != w * h * 4 {
                return Err(Error::Truncated { expected: w * h * 4, found: bytes.len() });
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            images.push(Projection { width: w, height: h, data });
        }
        Self::new(angles, images)
    }
}

pub fn view_name(i: usize) -> String {
    format!("view_{i:04}.raw")
}
