//! `scbct`: phantoms, DRR simulation, training, reconstruction, baselines,
//! evaluation and ablations for sparse-view CBCT.

mod commands;
mod slices;

use std::path::PathBuf;
use std::process::ExitCode;

use cbct_core::phantom::PhantomKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "scbct", version, about = "Sparse-view CBCT reconstruction toolkit")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural phantom volume.
    Phantom(PhantomArgs),
    /// Render digitally reconstructed radiographs of a volume.
    Drr(DrrArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dense voxel grid.
    Reconstruct(ReconstructArgs),
    /// Classical reconstruction (FDK or SART).
    Baseline(BaselineArgs),
    /// PSNR and SSIM of a reconstruction against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate one model per value of an ablation axis.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, value_parser = parse_phantom)]
    kind: PhantomKind,
    /// Voxels per side.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Side of the volume in mm.
    #[arg(long, default_value_t = 409.6)]
    extent_mm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DrrArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Geometry file; the built-in default geometry when omitted.
    #[arg(long)]
    geom: Option<PathBuf>,
    /// Override the detector resolution (square).
    #[arg(long)]
    pixels: Option<usize>,
    #[arg(long, default_value_t = 6)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evenly spaced angles instead of seeded random ones.
    #[arg(long)]
    equiangular: bool,
    /// Ray-marching step in mm (default: half the smallest voxel spacing).
    #[arg(long)]
    step_mm: Option<f64>,
    /// Output directory (views, angles.txt and geom.cfg).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (`key=value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    geom: Option<PathBuf>,
    /// Train on this ground-truth volume (with --projections) instead of
    /// the synthetic dataset.
    #[arg(long, requires = "projections")]
    volume: Option<PathBuf>,
    #[arg(long, requires = "volume")]
    projections: Option<PathBuf>,
    /// Run directory for the checkpoint, loss log and config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Output grid: same as this volume.
    #[arg(long, conflicts_with = "size")]
    like: Option<PathBuf>,
    /// Output grid: this many voxels per side over the geometry's extent.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    projections: PathBuf,
    /// Geometry file; `<projections>/geom.cfg` when omitted.
    #[arg(long)]
    geom: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Points evaluated per chunk (at most 65536).
    #[arg(long, default_value_t = cbct_model::reconstruct::DEFAULT_CHUNK)]
    chunk: usize,
    /// Neighbor search for the point transformer: within random groups of
    /// the training sample count, or over the whole grid.
    #[arg(long, value_enum, default_value_t = NeighborMode::Sampled)]
    neighbors: NeighborMode,
    /// Write axial/coronal/sagittal PNGs as `<prefix>_axial.png` etc.
    #[arg(long)]
    slices: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum NeighborMode {
    Sampled,
    Grid,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Fdk,
    Sart,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    projections: PathBuf,
    #[arg(long)]
    geom: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// SART iterations.
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// SART relaxation in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    relax: f64,
    /// Apply a Hann window to the FDK ramp filter.
    #[arg(long)]
    hann: bool,
    #[arg(long)]
    slices: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Intensity range for PSNR/SSIM.
    #[arg(long, default_value_t = 1.0)]
    range: f64,
    /// Append `label,psnr_db,ssim` to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// n_points, k or features.
    #[arg(long)]
    axis: String,
    /// Comma-separated values; the standard grid of the axis when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    geom: Option<PathBuf>,
    /// Results CSV (`value,psnr,ssim`).
    #[arg(long)]
    out: PathBuf,
}

fn parse_phantom(s: &str) -> Result<PhantomKind, String> {
    s.parse().map_err(|_| format!("unknown phantom '{s}' (sphere, cube, shells)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Drr(a) => commands::drr(a),
        Command::Train(a) => commands::train(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
