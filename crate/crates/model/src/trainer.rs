//! Synthetic scans and the optimization loop.

use std::collections::HashMap;

use cbct_core::baselines::project_all;
use cbct_core::geometry::equiangular_view_angles;
use cbct_core::phantom::generate_cube_grid;
use cbct_core::{sample_points, sample_view_angles, ProjectionSet, ScannerGeometry, Volume};
use cbct_nn::optim::{AdamW, AdamWConfig};
use cbct_nn::{Gradients, Graph, ParamId, Tensor};

use crate::config::TrainConfig;
use crate::fusion::model_coords;
use crate::model::Model;
use crate::{Error, Result};

/// SplitMix64 finalizer over a combination of stream identifiers.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ground-truth volume with its acquired views.
#[derive(Clone, Debug)]
pub struct Scan {
    pub volume: Volume,
    pub projections: ProjectionSet,
    /// Normalized `[M,1,H,W]` view stack.
    pub views: Tensor,
}

impl Scan {
    pub fn new(volume: Volume, projections: ProjectionSet) -> Result<Self> {
        let views = Model::view_tensor(&projections)?;
        Ok(Self { volume, projections, views })
    }

    /// Renders DRRs of `volume` at `angles_deg`.
    pub fn simulate(volume: Volume, geom: &ScannerGeometry, angles_deg: &[f64]) -> Result<Self> {
        let projections = project_all(&volume, geom, angles_deg)?;
        Self::new(volume, projections)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Scan>,
    pub val: Vec<Scan>,
    pub test: Vec<Scan>,
}

/// Procedural phantoms with simulated views, split train/val/test. Every
/// scan has its own phantom seed and (unless equiangular) its own angles.
pub fn synthetic_dataset(cfg: &TrainConfig, geom: &ScannerGeometry) -> Result<Dataset> {
    let make = |split: u64, count: usize| -> Result<Vec<Scan>> {
        (0..count)
            .map(|i| {
                let s = derive_seed(cfg.seed, split, i as u64);
                let vol = generate_cube_grid(cfg.phantom, cfg.volume_size, geom.volume_extent_mm[0], s)?;
                let angles = if cfg.equiangular {
                    equiangular_view_angles(cfg.views)?
                } else {
                    sample_view_angles(cfg.views, s)?
                };
                Scan::simulate(vol, geom, &angles.angles_deg)
            })
            .collect()
    };
    Ok(Dataset { train: make(1, cfg.train_scans)?, val: make(2, cfg.val_scans)?, test: make(3, cfg.test_scans)? })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub geom: ScannerGeometry,
    pub model: Model,
    opt: AdamW,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Trainer {
    /// Fresh model from `cfg.seed`. `geom` must have the encoder's detector
    /// size.
    pub fn new(cfg: TrainConfig, geom: ScannerGeometry) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        Self::resume(cfg, geom, model, 0)
    }

    /// Continues from an existing model at step `step` (optimizer moments
    /// start from zero).
    pub fn resume(cfg: TrainConfig, geom: ScannerGeometry, model: Model, step: u64) -> Result<Self> {
        let s = cfg.model.encoder.image_size;
        if geom.detector_pixels != [s, s] {
            return Err(Error::InvalidArgument(format!(
                "detector is {}x{} but the encoder expects {s}x{s}",
                geom.detector_pixels[0], geom.detector_pixels[1]
            )));
        }
        let opt = AdamW::new(AdamWConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() });
        Ok(Self { cfg, geom, model, opt, step })
    }

    /// Loss and gradients of one scan with the point draw `seed`.
    fn scan_pass(&self, scan: &Scan, seed: u64) -> Result<(f64, Gradients, Option<cbct_nn::BatchStats>)> {
        let batch = sample_points(&scan.volume, self.cfg.points, seed, self.cfg.sampling)?;
        let grid = scan.volume.grid();
        let coords: Vec<[f64; 3]> =
            batch.coords.iter().map(|&p| model_coords(&self.geom, grid.normalized_to_world(p))).collect();
        let nb = self.model.neighborhood(&coords)?;
        let mut g = Graph::new();
        let pyramid = self.model.encode(&mut g, &scan.views)?;
        let pred = self.model.predict(&mut g, &pyramid, &self.geom, &scan.projections.angles_deg, &coords, nb.as_ref())?;
        let loss = g.mse(pred.values, &batch.gt_values);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss);
        Ok((value, grads, pred.batch_stats))
    }

    /// One optimizer step over `batch`; returns the averaged loss.
    pub fn train_step(&mut self, batch: &[&Scan]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut acc: HashMap<ParamId, Vec<f64>> = HashMap::new();
        let mut loss = 0.0;
        let mut stats = Vec::new();
        for (b, scan) in batch.iter().enumerate() {
            let seed = derive_seed(self.cfg.seed, self.step + 1, b as u64);
            let (l, grads, s) = self.scan_pass(scan, seed)?;
            loss += scale * l;
            Gradients::add_scaled_params(&mut acc, &grads, scale);
            stats.extend(s);
        }
        let grad_norm = acc.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, lr: self.cfg.learning_rate, grad_norm });
        }
        let mut ids: Vec<ParamId> = acc.keys().copied().collect();
        ids.sort();
        self.opt.step(&mut self.model.store, ids.iter().map(|id| (*id, acc[id].as_slice())));
        for s in &stats {
            self.model.head.update_running_stats(&mut self.model.store, s);
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs `cfg.total_steps` steps over `scans`, cycling through them in
    /// order, `batch_size` at a time. `on_step(step, loss, trainer)` runs
    /// after every step; returning an error stops training.
    pub fn fit(
        &mut self,
        scans: &[Scan],
        mut on_step: impl FnMut(u64, f64, &Trainer) -> Result<()>,
    ) -> Result<Vec<f64>> {
        if scans.is_empty() {
            return Err(Error::InvalidArgument("no training scans".into()));
        }
        let total = self.cfg.total_steps(scans.len());
        let bs = self.cfg.batch_size.min(scans.len());
        let per_epoch = scans.len().div_ceil(bs) as u64;
        let mut losses = Vec::new();
        while self.step < total {
            let slot = (self.step % per_epoch) as usize;
            let batch: Vec<&Scan> = scans[slot * bs..((slot + 1) * bs).min(scans.len())].iter().collect();
            let loss = self.train_step(&batch)?;
            losses.push(loss);
            on_step(self.step, loss, self)?;
        }
        self.recalibrate_batch_norm(scans, self.cfg.bn_recalibration)?;
        Ok(losses)
    }

    /// Replaces the head's running statistics with the average batch
    /// statistics of `passes` point draws per scan under the current
    /// weights. Does nothing when `passes` is 0.
    pub fn recalibrate_batch_norm(&mut self, scans: &[Scan], passes: usize) -> Result<()> {
        if passes == 0 || scans.is_empty() {
            return Ok(());
        }
        let hidden = self.cfg.model.head_hidden;
        let mut mean = vec![0.0; hidden];
        let mut var = vec![0.0; hidden];
        let mut n = 0.0;
        for p in 0..passes {
            for (b, scan) in scans.iter().enumerate() {
                // stream 0 is never used by training steps
                let seed = derive_seed(self.cfg.seed, 0, (p * scans.len() + b) as u64);
                let batch = sample_points(&scan.volume, self.cfg.points, seed, self.cfg.sampling)?;
                let grid = scan.volume.grid();
                let coords: Vec<[f64; 3]> =
                    batch.coords.iter().map(|&q| model_coords(&self.geom, grid.normalized_to_world(q))).collect();
                let nb = self.model.neighborhood(&coords)?;
                let mut g = Graph::new();
                let pyramid = self.model.encode(&mut g, &scan.views)?;
                let pred =
                    self.model.predict(&mut g, &pyramid, &self.geom, &scan.projections.angles_deg, &coords, nb.as_ref())?;
                let stats = pred.batch_stats.ok_or_else(|| Error::InvalidArgument("no batch statistics".into()))?;
                for (m, s) in mean.iter_mut().zip(&stats.mean) {
                    *m += s;
                }
                for (v, s) in var.iter_mut().zip(stats.unbiased_var()) {
                    *v += s;
                }
                n += 1.0;
            }
        }
        let head = &self.model.head;
        let store = &mut self.model.store;
        store.get_mut(head.running_mean).data_mut().iter_mut().zip(&mean).for_each(|(r, m)| *r = m / n);
        store.get_mut(head.running_var).data_mut().iter_mut().zip(&var).for_each(|(r, v)| *r = v / n);
        Ok(())
    }
}
