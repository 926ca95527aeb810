//! Desk-scale training criteria.

use std::path::{Path, PathBuf};
use std::process::Command;

use cbct_core::baselines::sart_reconstruct;
use cbct_core::metrics::{psnr, ssim};
use cbct_core::ScannerGeometry;
use cbct_model::ablation::AblationAxis;
use cbct_model::trainer::{synthetic_dataset, Trainer};
use cbct_model::{reconstruct, ModelVariant, TrainConfig};

use crate::{ensure, Outcome};

/// `--set` overrides for the two-epoch smoke pipeline.
pub const SMOKE_OVERRIDES: &[&str] = &[
    "image_size=32",
    "encoder_stem=4",
    "encoder_widths=8,16,32",
    "encoder_blocks=1",
    "encoder_heads=2",
    "encoder_mlp=32",
    "model_dim=16",
    "ffn_dim=32",
    "pe_hidden=16",
    "head_hidden=16",
    "points=256",
    "epochs=2",
    "batch_size=1",
];

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("acceptance output directory");
    dir
}

#[derive(Clone, Debug)]
pub struct OverfitRun {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sart_psnr: f64,
    pub sart_ssim: f64,
}

impl OverfitRun {
    fn reduction(&self) -> f64 {
        self.initial_loss / self.final_loss
    }
}

/// Results shared between criteria of one harness run.
#[derive(Default)]
pub struct Shared {
    trans2: Option<OverfitRun>,
}

fn desk_config() -> Result<TrainConfig, String> {
    TrainConfig::load(workspace_file("configs/desk_overfit.cfg")).map_err(|e| e.to_string())
}

/// Trains `variant` on the single desk phantom and compares its
/// reconstruction with 50 SART iterations from the same views. The initial
/// loss is the mean of the first 10 steps, the final loss the mean of the
/// last 50.
fn overfit_run(variant: ModelVariant) -> Result<OverfitRun, String> {
    let e = |e: cbct_model::Error| e.to_string();
    let mut cfg = desk_config()?;
    cfg.set("model", &variant.to_string()).map_err(e)?;
    let geom = cfg.geometry(&ScannerGeometry::default());
    let data = synthetic_dataset(&cfg, &geom).map_err(e)?;
    ensure!(data.train.len() == 1, "desk config must hold one training scan");
    let scan = &data.train[0];
    let mut trainer = Trainer::new(cfg.clone(), geom.clone()).map_err(e)?;
    let log = out_dir().join(format!("overfit_{variant}.csv"));
    let mut csv = String::from("step,loss\n");
    let losses = trainer
        .fit(&data.train, |step, loss, _| {
            csv.push_str(&format!("{step},{loss}\n"));
            if step % 100 == 0 {
                eprintln!("  {variant} step {step} loss {loss:.6}");
            }
            Ok(())
        })
        .map_err(e)?;
    let _ = std::fs::write(&log, csv);
    ensure!(losses.len() >= 60 && losses.len() <= 2000, "{} steps outside the protocol", losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let rec = reconstruct(&trainer.model, &scan.projections, &geom, scan.volume.grid(), cbct_model::reconstruct::DEFAULT_CHUNK, cfg.neighbors())
        .map_err(e)?;
    let sart = sart_reconstruct(&scan.projections, &geom, scan.volume.grid(), 50, 0.5).map_err(|e| e.to_string())?;
    let m = |a, b| -> Result<(f64, f64), String> {
        Ok((psnr(a, b, 1.0).map_err(|e| e.to_string())?, ssim(a, b, 1.0).map_err(|e| e.to_string())?))
    };
    let (p, s) = m(&rec, &scan.volume)?;
    let (sp, ss) = m(&sart, &scan.volume)?;
    Ok(OverfitRun {
        steps: losses.len(),
        initial_loss: mean(&losses[..10]),
        final_loss: mean(&losses[losses.len() - 50..]),
        psnr: p,
        ssim: s,
        sart_psnr: sp,
        sart_ssim: ss,
    })
}

fn trans2(shared: &mut Shared) -> Result<OverfitRun, String> {
    if shared.trans2.is_none() {
        shared.trans2 = Some(overfit_run(ModelVariant::Trans2)?);
    }
    Ok(shared.trans2.clone().unwrap())
}

fn describe(r: &OverfitRun) -> String {
    format!(
        "{} steps, loss {:.5} -> {:.6} ({:.1}x), PSNR {:.2} dB / SSIM {:.4} vs SART-50 {:.2} dB / {:.4}",
        r.steps,
        r.initial_loss,
        r.final_loss,
        r.reduction(),
        r.psnr,
        r.ssim,
        r.sart_psnr,
        r.sart_ssim
    )
}

pub fn overfit(shared: &mut Shared) -> Outcome {
    let r = trans2(shared)?;
    ensure!(r.reduction() >= 10.0 && r.psnr > r.sart_psnr, "{}", describe(&r));
    Ok(describe(&r))
}

pub fn variants(shared: &mut Shared) -> Outcome {
    let t2 = trans2(shared)?;
    let t1 = overfit_run(ModelVariant::Trans)?;
    let order = if t2.psnr > t1.psnr { "Trans2 > Trans" } else { "Trans2 <= Trans" };
    let detail = format!("Trans2 {:.2} dB, Trans {:.2} dB, SART-50 {:.2} dB ({order})", t2.psnr, t1.psnr, t2.sart_psnr);
    ensure!(t2.psnr > t2.sart_psnr && t1.psnr > t1.sart_psnr, "{detail}");
    Ok(detail)
}

/// Runs `scbct ablate` over each axis's default grid and checks the CSVs.
pub fn ablation(_: &mut Shared) -> Outcome {
    let dir = out_dir();
    let config = workspace_file("configs/desk_ablation.cfg");
    let mut report = Vec::new();
    for axis in [AblationAxis::NPoints, AblationAxis::K, AblationAxis::Features] {
        let name = match axis {
            AblationAxis::NPoints => "n_points",
            AblationAxis::K => "k",
            AblationAxis::Features => "features",
        };
        let csv = dir.join(format!("ablation_{name}.csv"));
        let out = Command::new(env!("CARGO_BIN_EXE_scbct"))
            .args(["ablate", "--axis", name, "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&csv)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "ablate {name}: {}", String::from_utf8_lossy(&out.stderr).trim());
        let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
        let lines: Vec<&str> = text.lines().collect();
        let values = axis.default_values();
        ensure!(lines.first() == Some(&"value,psnr,ssim"), "{name}: bad header");
        ensure!(lines.len() == values.len() + 1, "{name}: {} rows for {} values", lines.len() - 1, values.len());
        for (line, value) in lines[1..].iter().zip(&values) {
            let fields: Vec<&str> = line.split(',').collect();
            ensure!(fields.len() == 3 && fields[0] == value, "{name}: bad row '{line}'");
            let nums: Vec<f64> = fields[1..].iter().filter_map(|f| f.parse().ok()).collect();
            ensure!(nums.len() == 2 && nums.iter().all(|x| x.is_finite()), "{name}: bad row '{line}'");
        }
        eprintln!("{text}");
        report.push(format!("{name}: {}", lines[1..].join(" ")));
    }
    Ok(report.join("; "))
}
