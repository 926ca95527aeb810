//! Sweeps over the sampled-point count, the neighbor count and the feature
//! scales, one trained model per value under a shared seed.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cbct_core::metrics::{psnr, ssim};
use cbct_core::ScannerGeometry;

use crate::config::TrainConfig;
use crate::model::Model;
use crate::reconstruct::{reconstruct, Neighbors, DEFAULT_CHUNK};
use crate::trainer::{Dataset, Scan, Trainer};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    NPoints,
    K,
    Features,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_points" | "points" => Ok(AblationAxis::NPoints),
            "k" => Ok(AblationAxis::K),
            "features" => Ok(AblationAxis::Features),
            _ => Err(Error::InvalidArgument(format!("unknown ablation axis '{s}' (n_points, k, features)"))),
        }
    }
}

impl AblationAxis {
    /// The default grid for this axis.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::NPoints => &["5000", "10000", "20000"],
            AblationAxis::K => &["3", "6", "9", "15"],
            AblationAxis::Features => &["f4", "f4+f3", "f4+f3+f2", "full"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            AblationAxis::NPoints => cfg.set("points", value)?,
            AblationAxis::K => cfg.set("k", value)?,
            AblationAxis::Features => cfg.set("features", value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR and SSIM (data range 1) of reconstructions of `scans`.
pub fn evaluate(model: &Model, geom: &ScannerGeometry, scans: &[Scan], neighbors: Neighbors) -> Result<(f64, f64)> {
    if scans.is_empty() {
        return Err(Error::InvalidArgument("no scans to evaluate".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for scan in scans {
        let rec = reconstruct(model, &scan.projections, geom, scan.volume.grid(), DEFAULT_CHUNK, neighbors)?;
        p += psnr(&rec, &scan.volume, 1.0)?;
        s += ssim(&rec, &scan.volume, 1.0)?;
    }
    Ok((p / scans.len() as f64, s / scans.len() as f64))
}

/// Trains and evaluates one model per value. Evaluation uses the test
/// split, or the training scans when the test split is empty.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    base: &TrainConfig,
    geom: &ScannerGeometry,
    data: &Dataset,
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<Vec<AblationRow>> {
    let eval_scans = if data.test.is_empty() { &data.train } else { &data.test };
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cfg = axis.apply(base, value)?;
        let mut trainer = Trainer::new(cfg, geom.clone())?;
        trainer.fit(&data.train, |step, loss, _| {
            progress(value, step, loss);
            Ok(())
        })?;
        let (p, s) = evaluate(&trainer.model, geom, eval_scans, trainer.cfg.neighbors())?;
        rows.push(AblationRow { value: value.clone(), psnr: p, ssim: s });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("value,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.value, r.psnr, r.ssim);
    }
    s
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ablation_csv(rows))?;
    Ok(())
}
