//! Training configuration as a flat `key=value` text file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cbct_core::phantom::PhantomKind;
use cbct_core::{PointSampling, ScannerGeometry};

use crate::model::{ModelConfig, ModelVariant};
use crate::reconstruct::Neighbors;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Views per scan.
    pub views: usize,
    /// Points sampled per scan and step.
    pub points: usize,
    pub epochs: usize,
    /// Scans per optimizer step; their losses are averaged.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Side of the generated phantoms, in voxels.
    pub volume_size: usize,
    pub phantom: PhantomKind,
    pub train_scans: usize,
    pub val_scans: usize,
    pub test_scans: usize,
    pub equiangular: bool,
    pub sampling: PointSampling,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Point draws per training scan used to re-estimate the head's batch
    /// norm statistics with the final weights; 0 keeps the moving averages.
    pub bn_recalibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            views: 6,
            points: 10_000,
            epochs: 400,
            batch_size: 2,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            seed: 0,
            volume_size: 64,
            phantom: PhantomKind::Shells,
            train_scans: 20,
            val_scans: 2,
            test_scans: 5,
            equiangular: false,
            sampling: PointSampling::Uniform,
            max_steps: 0,
            checkpoint_every: 0,
            bn_recalibration: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad value '{value}' for key '{key}'"))),
    }
}

fn phantom_name(kind: PhantomKind) -> &'static str {
    match kind {
        PhantomKind::Sphere => "sphere",
        PhantomKind::Cube => "cube",
        PhantomKind::Shells => "shells",
    }
}

impl TrainConfig {
    /// Number of optimizer steps for `scans` training scans.
    pub fn total_steps(&self, scans: usize) -> u64 {
        let per_epoch = scans.div_ceil(self.batch_size.max(1)) as u64;
        let total = per_epoch * self.epochs as u64;
        if self.max_steps > 0 {
            total.min(self.max_steps)
        } else {
            total
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.views == 0 {
            return bad("views must be at least 1");
        }
        if self.points == 0 {
            return bad("points must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if self.volume_size < 2 || self.train_scans == 0 {
            return bad("volume_size must be >= 2 and train_scans >= 1");
        }
        if self.model.variant == ModelVariant::Trans2 {
            self.model.pointtrans.validate()?;
            if self.model.pointtrans.k > self.points {
                return bad("k exceeds the number of sampled points");
            }
        }
        Ok(())
    }

    /// The acquisition geometry with the detector resized to the encoder's
    /// input size.
    pub fn geometry(&self, base: &ScannerGeometry) -> ScannerGeometry {
        let s = self.model.encoder.image_size;
        base.with_detector_pixels([s, s])
    }

    /// Inference neighborhoods grouped at the training sample count.
    pub fn neighbors(&self) -> Neighbors {
        Neighbors::Sampled { size: self.points, seed: self.seed }
    }

    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let p = &m.pointtrans;
        let sampling = match self.sampling {
            PointSampling::Uniform => "uniform".to_string(),
            PointSampling::ForegroundBiased { floor } => format!("foreground:{floor}"),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("model", m.variant.to_string()),
            ("views", self.views.to_string()),
            ("points", self.points.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", e.image_size.to_string()),
            ("volume_size", self.volume_size.to_string()),
            ("phantom", phantom_name(self.phantom).to_string()),
            ("train_scans", self.train_scans.to_string()),
            ("val_scans", self.val_scans.to_string()),
            ("test_scans", self.test_scans.to_string()),
            ("equiangular", self.equiangular.to_string()),
            ("sampling", sampling),
            ("features", m.features.to_string()),
            ("layers", p.layers.to_string()),
            ("k", p.k.to_string()),
            ("heads", p.heads.to_string()),
            ("model_dim", p.model_dim.to_string()),
            ("ffn_dim", p.ffn_dim.to_string()),
            ("sigma", p.sigma.to_string()),
            ("pe_hidden", p.pe_hidden.to_string()),
            ("norm", p.norm.to_string()),
            ("encoder_stem", e.stem_width.to_string()),
            (
                "encoder_widths",
                e.stage_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("encoder_blocks", e.blocks.to_string()),
            ("encoder_heads", e.heads.to_string()),
            ("encoder_mlp", e.mlp_width.to_string()),
            ("head_hidden", m.head_hidden.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("bn_recalibration", self.bn_recalibration.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model" => m.variant = value.parse()?,
            "views" => self.views = parse(key, value)?,
            "points" => self.points = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => m.encoder.image_size = parse(key, value)?,
            "volume_size" => self.volume_size = parse(key, value)?,
            "phantom" => self.phantom = value.parse().map_err(Error::Core)?,
            "train_scans" => self.train_scans = parse(key, value)?,
            "val_scans" => self.val_scans = parse(key, value)?,
            "test_scans" => self.test_scans = parse(key, value)?,
            "equiangular" => self.equiangular = parse_bool(key, value)?,
            "sampling" => {
                self.sampling = match value.split_once(':') {
                    None if value == "uniform" => PointSampling::Uniform,
                    None if value == "foreground" => PointSampling::ForegroundBiased { floor: 0.1 },
                    Some(("foreground", f)) => PointSampling::ForegroundBiased { floor: parse(key, f)? },
                    _ => return Err(Error::InvalidArgument(format!("bad value '{value}' for key 'sampling'"))),
                }
            }
            "features" => m.features = value.parse()?,
            "layers" => m.pointtrans.layers = parse(key, value)?,
            "k" => m.pointtrans.k = parse(key, value)?,
            "heads" => m.pointtrans.heads = parse(key, value)?,
            "model_dim" => m.pointtrans.model_dim = parse(key, value)?,
            "ffn_dim" => m.pointtrans.ffn_dim = parse(key, value)?,
            "sigma" => m.pointtrans.sigma = parse(key, value)?,
            "pe_hidden" => m.pointtrans.pe_hidden = parse(key, value)?,
            "norm" => m.pointtrans.norm = value.parse()?,
            "encoder_stem" => m.encoder.stem_width = parse(key, value)?,
            "encoder_widths" => {
                let w: Vec<usize> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                m.encoder.stage_widths = w
                    .try_into()
                    .map_err(|_| Error::InvalidArgument("encoder_widths needs three values".into()))?;
            }
            "encoder_blocks" => m.encoder.blocks = parse(key, value)?,
            "encoder_heads" => m.encoder.heads = parse(key, value)?,
            "encoder_mlp" => m.encoder.mlp_width = parse(key, value)?,
            "head_hidden" => m.head_hidden = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "bn_recalibration" => self.bn_recalibration = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; keys in `ignore` are passed over.
    pub fn parse_kv(text: &str, ignore: &[&str]) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if ignore.contains(&k) {
                continue;
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_kv(&std::fs::read_to_string(path)?, &[])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }
}
