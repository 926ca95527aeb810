use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cbct_core::baselines::{fdk_reconstruct_with, sart_reconstruct, RampWindow};
use cbct_core::geometry::equiangular_view_angles;
use cbct_core::metrics::{psnr, ssim};
use cbct_core::phantom::generate_cube_grid;
use cbct_core::projector::{default_step_mm, render_drr};
use cbct_core::{sample_view_angles, GridSpec, ProjectionSet, ScannerGeometry, Volume};
use cbct_model::ablation::{run_ablation, write_ablation_csv, AblationAxis};
use cbct_model::checkpoint::{load_checkpoint, save_checkpoint, BlobDtype};
use cbct_model::trainer::{synthetic_dataset, Scan, Trainer};
use cbct_model::{Neighbors, TrainConfig};

use crate::slices::write_slices;
use crate::{
    AblateArgs, BaselineArgs, DrrArgs, EvalArgs, GridArgs, Method, NeighborMode, PhantomArgs, ReconstructArgs, TrainArgs,
};

const GEOM_FILE: &str = "geom.cfg";
const LOG_EVERY: u64 = 10;

fn load_geom(path: Option<&Path>) -> Result<ScannerGeometry> {
    match path {
        Some(p) => ScannerGeometry::load(p).with_context(|| format!("reading geometry {}", p.display())),
        None => Ok(ScannerGeometry::default()),
    }
}

/// Geometry of a projection directory: `--geom` if given, else the
/// directory's own `geom.cfg`.
fn projection_geom(dir: &Path, geom: Option<&Path>) -> Result<ScannerGeometry> {
    let own = dir.join(GEOM_FILE);
    match geom {
        Some(p) => load_geom(Some(p)),
        None if own.exists() => load_geom(Some(&own)),
        None => bail!("{} has no {GEOM_FILE}; pass --geom", dir.display()),
    }
}

fn load_projections(dir: &Path, geom: &ScannerGeometry) -> Result<ProjectionSet> {
    ProjectionSet::load_dir(dir, geom).with_context(|| format!("reading projections from {}", dir.display()))
}

fn load_volume(path: &Path) -> Result<Volume> {
    Volume::load(path).with_context(|| format!("reading volume {}", path.display()))
}

fn output_grid(args: &GridArgs, geom: &ScannerGeometry, default_size: usize) -> Result<GridSpec> {
    if let Some(p) = &args.like {
        return Ok(*load_volume(p)?.grid());
    }
    Ok(GridSpec::covering(args.size.unwrap_or(default_size), geom.volume_extent_mm)?)
}

fn train_config(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn save_volume(vol: &Volume, out: &Path) -> Result<()> {
    ensure_parent(out)?;
    vol.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let vol = generate_cube_grid(a.kind, a.size, a.extent_mm, a.seed)?;
    save_volume(&vol, &a.out)
}

pub fn drr(a: DrrArgs) -> Result<()> {
    let mut geom = load_geom(a.geom.as_deref())?;
    if let Some(p) = a.pixels {
        geom = geom.with_detector_pixels([p, p]);
        geom.validate()?;
    }
    let vol = load_volume(&a.volume)?;
    let angles = if a.equiangular { equiangular_view_angles(a.views)? } else { sample_view_angles(a.views, a.seed)? };
    let step = a.step_mm.unwrap_or_else(|| default_step_mm(vol.grid()));
    let images = angles
        .angles_deg
        .iter()
        .map(|&ang| render_drr(&vol, &geom, ang, step))
        .collect::<cbct_core::Result<Vec<_>>>()?;
    let set = ProjectionSet::new(angles.angles_deg.clone(), images)?;
    set.save_dir(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    geom.save(a.out.join(GEOM_FILE))?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(a.config.as_deref(), &a.overrides, a.seed)?;
    let base = load_geom(a.geom.as_deref())?;
    let geom = cfg.geometry(&base);
    let scans = match (&a.volume, &a.projections) {
        (Some(v), Some(dir)) => {
            let pgeom = projection_geom(dir, a.geom.as_deref())?;
            if pgeom.detector_pixels != geom.detector_pixels {
                bail!(
                    "projections are {}x{} but image_size is {}",
                    pgeom.detector_pixels[0],
                    pgeom.detector_pixels[1],
                    cfg.model.encoder.image_size
                );
            }
            let proj = load_projections(dir, &pgeom)?;
            vec![Scan::new(load_volume(v)?, proj)?]
        }
        _ => synthetic_dataset(&cfg, &geom)?.train,
    };
    std::fs::create_dir_all(&a.out)?;
    cfg.save(a.out.join("train.cfg"))?;
    let dtype = BlobDtype::from_env();
    let total = cfg.total_steps(scans.len());
    let mut log = String::from("step,loss\n");
    let mut trainer = Trainer::new(cfg.clone(), geom)?;
    let out = a.out.clone();
    trainer.fit(&scans, |step, loss, tr| {
        log.push_str(&format!("{step},{loss}\n"));
        if step % LOG_EVERY == 0 || step == total {
            eprintln!("step {step}/{total} loss {loss:.6}");
        }
        if tr.cfg.checkpoint_every > 0 && step % tr.cfg.checkpoint_every == 0 {
            save_checkpoint(&tr.model, &tr.cfg, step, dtype, out.join(format!("ckpt_{step:06}.ckpt")))?;
        }
        Ok(())
    })?;
    std::fs::write(a.out.join("loss.csv"), log)?;
    save_checkpoint(&trainer.model, &cfg, trainer.step, dtype, a.out.join("model.ckpt"))?;
    Ok(())
}

fn save_result(vol: &Volume, out: &Path, slices: Option<&str>) -> Result<()> {
    save_volume(vol, out)?;
    if let Some(prefix) = slices {
        write_slices(vol, prefix)?;
    }
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let (model, meta) = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let geom = projection_geom(&a.projections, a.geom.as_deref())?;
    let proj = load_projections(&a.projections, &geom)?;
    let grid = output_grid(&a.grid, &geom, meta.config.volume_size)?;
    let neighbors = match a.neighbors {
        NeighborMode::Sampled => meta.config.neighbors(),
        NeighborMode::Grid => Neighbors::Grid,
    };
    let vol = cbct_model::reconstruct(&model, &proj, &geom, &grid, a.chunk, neighbors)?;
    save_result(&vol, &a.out, a.slices.as_deref())
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    let geom = projection_geom(&a.projections, a.geom.as_deref())?;
    let proj = load_projections(&a.projections, &geom)?;
    let grid = output_grid(&a.grid, &geom, 64)?;
    let vol = match a.method {
        Method::Fdk => {
            let window = if a.hann { RampWindow::Hann } else { RampWindow::None };
            fdk_reconstruct_with(&proj, &geom, &grid, window)?
        }
        Method::Sart => sart_reconstruct(&proj, &geom, &grid, a.iters, a.relax)?,
    };
    save_result(&vol, &a.out, a.slices.as_deref())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_volume(&a.pred)?;
    let gt = load_volume(&a.gt)?;
    let p = psnr(&pred, &gt, a.range)?;
    let s = ssim(&pred, &gt, a.range)?;
    println!("psnr_db={p:.6} ssim={s:.6}");
    eprintln!("note: ssim is the mean of per-axial-slice 2D SSIM (11x11 Gaussian window, sigma 1.5)");
    if let Some(csv) = &a.csv {
        ensure_parent(csv)?;
        let fresh = !csv.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(csv)?;
        if fresh {
            writeln!(f, "label,psnr_db,ssim")?;
        }
        let label = a.label.clone().unwrap_or_else(|| a.pred.display().to_string());
        writeln!(f, "{label},{p:.6},{s:.6}")?;
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    let cfg = train_config(a.config.as_deref(), &a.overrides, a.seed)?;
    let values = if a.values.is_empty() { axis.default_values() } else { a.values.clone() };
    let geom = cfg.geometry(&load_geom(a.geom.as_deref())?);
    let data = synthetic_dataset(&cfg, &geom)?;
    let rows = run_ablation(axis, &values, &cfg, &geom, &data, |value, step, loss| {
        if step % LOG_EVERY == 0 {
            eprintln!("[{value}] step {step} loss {loss:.6}");
        }
    })?;
    for r in &rows {
        eprintln!("{} psnr_db={:.4} ssim={:.4}", r.value, r.psnr, r.ssim);
    }
    ensure_parent(&a.out)?;
    write_ablation_csv(&rows, &a.out)?;
    Ok(())
}
