//! The quick criteria: oracles, physics and the determinism smoke run.

use std::path::Path;
use std::process::Command;

use cbct_core::baselines::{project_all, sart_reconstruct_observed};
use cbct_core::geometry::equiangular_view_angles;
use cbct_core::interp::{bilinear, trilinear};
use cbct_core::phantom::{generate, PhantomKind};
use cbct_core::projector::{backproject, default_step_mm, pixel_ray, render_drr, Weighting};
use cbct_core::{GridSpec, Projection, ScannerGeometry, Volume};
use cbct_model::encoder::{FEATURE_CHANNELS, FUSED_DIM};
use cbct_model::fusion::{fuse_map, project_points};
use cbct_model::head::Head;
use cbct_model::pointtrans::{
    coords_tensor, gaussian_weights, knn, neighbor_attention_core, NeighborAttention, Neighborhood, PositionalEncoding,
};
use cbct_model::{Model, ModelConfig};
use cbct_nn::gradcheck::{check_params, rel_error, sample_entries};
use cbct_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::desk::Shared;
use crate::{ensure, oracles, Outcome};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn shape_contract(_: &mut Shared) -> Outcome {
    let model = Model::new(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let sum: usize = FEATURE_CHANNELS.iter().sum();
    ensure!(sum == 464 && FUSED_DIM == 464, "channels {FEATURE_CHANNELS:?} sum to {sum}");
    ensure!(model.feature_dim() == 464, "fused width {}", model.feature_dim());
    ensure!(model.head.in_dim() == 464, "head input {}", model.head.in_dim());
    Ok(format!("fused width {} = {FEATURE_CHANNELS:?}", model.feature_dim()))
}

pub fn gaussian_bias(_: &mut Shared) -> Outcome {
    let mut worst: f64 = 0.0;
    for sigma in [0.05, 0.3, 1.0, 7.5] {
        let d = [0.0, sigma, 2.0 * sigma];
        let got = gaussian_weights(&d, sigma).map_err(|e| e.to_string())?;
        for (w, want) in got.iter().zip([1.0, (-0.5f64).exp(), (-2.0f64).exp()]) {
            worst = worst.max((w - want).abs());
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e}"))
}

pub fn attention(_: &mut Shared) -> Outcome {
    let mut r = rng(3);
    let (n, d, heads, k) = (64, 16, 4, 3);
    let pts = random_points(&mut r, n);
    let nb = Neighborhood::build(&pts, k, 0.3).map_err(|e| e.to_string())?;
    let (q, kt, v) = (random_tensor(&mut r, &[n, d]), random_tensor(&mut r, &[n, d]), random_tensor(&mut r, &[n, d]));
    let mut g = Graph::eval();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(kt.clone()), g.input(v.clone()));
    let out = neighbor_attention_core(&mut g, qv, kv, vv, &nb, heads).map_err(|e| e.to_string())?;
    let (oracle, _) = oracles::dense_attention(&q, &kt, &v, &nb, heads);
    let dev = max_abs_diff(g.value(out).data(), &oracle);
    ensure!(dev <= 1e-10, "output deviates by {dev:e}");

    let mut store = ParamStore::new();
    let layer = NeighborAttention::new(&mut store, &mut r, "a", d, heads).map_err(|e| e.to_string())?;
    let x = random_tensor(&mut r, &[n, d]);
    let probs = layer.probabilities(&store, &x, &nb).map_err(|e| e.to_string())?;
    let row_err = probs.chunks(k).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure!(row_err <= 1e-6, "softmax rows sum off by {row_err:e}");
    Ok(format!("max deviation {dev:.1e}, row sum error {row_err:.1e}"))
}

/// Relative error of the input gradient of `build` against central
/// differences, over every input entry.
fn input_check<F>(store: &ParamStore, x: &Tensor, h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = build(&mut g, store, xv);
    let analytic = g.backward(out).wrt(xv).expect("input gradient");
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let xv = g.leaf(t);
        let out = build(&mut g, store, xv);
        g.value(out).data()[0]
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let numeric = (eval(p) - eval(m)) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric, 1e-6));
    }
    worst
}

pub fn gradients(_: &mut Shared) -> Outcome {
    const TOL: f64 = 1e-4;
    let mut r = rng(4);
    let mut report = Vec::new();

    // max fusion over three views of a 4-channel 6x6 map
    let geom = ScannerGeometry::default().with_detector_pixels([6, 6]);
    let world: Vec<[f64; 3]> = (0..12).map(|_| std::array::from_fn(|_| r.random_range(-120.0..120.0))).collect();
    let proj = project_points(&geom, &[0.0, 50.0, 130.0], &world).map_err(|e| e.to_string())?;
    let map = random_tensor(&mut r, &[3, 4, 6, 6]);
    let probe = random_tensor(&mut r, &[12, 4]);
    let e = input_check(&ParamStore::new(), &map, 1e-6, |g, _, m| {
        let f = fuse_map(g, m, &proj).unwrap();
        g.dot_const(f, &probe)
    });
    ensure!(e < TOL, "fusion: {e:e}");
    report.push(("fusion", e));

    let mut store = ParamStore::new();
    let pe = PositionalEncoding::new(&mut store, &mut r, "pe", 8, 12);
    let pts = random_points(&mut r, 32);
    let probe = random_tensor(&mut r, &[32, 12]);
    let rep = check_params(&store, &sample_entries(&store, 200), 1e-5, 1e-6, |g, s| {
        let c = g.input(coords_tensor(&pts));
        let o = pe.forward(g, s, c);
        g.dot_const(o, &probe)
    });
    ensure!(rep.passes(TOL), "positional encoding: {rep:?}");
    report.push(("positional encoding", rep.max_rel_error));

    let mut store = ParamStore::new();
    let attn = NeighborAttention::new(&mut store, &mut r, "a", 8, 2).map_err(|e| e.to_string())?;
    let nb = Neighborhood::build(&random_points(&mut r, 32), 3, 0.4).map_err(|e| e.to_string())?;
    let x = random_tensor(&mut r, &[32, 8]);
    let probe = random_tensor(&mut r, &[32, 8]);
    let build = |g: &mut Graph, s: &ParamStore, xv| {
        let o = attn.forward(g, s, xv, &nb).unwrap();
        g.dot_const(o, &probe)
    };
    // softmax is shift invariant, so key biases get an exactly zero gradient
    let key_bias = store.id("a.k.bias").expect("key bias");
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = build(&mut g, &store, xv);
    let kb = g.backward(out).param(key_bias).map_or(0.0, |t| t.iter().map(|v| v.abs()).fold(0.0, f64::max));
    ensure!(kb < 1e-12, "key bias gradient {kb:e}");
    let entries: Vec<_> = sample_entries(&store, 40).into_iter().filter(|(id, _)| *id != key_bias).collect();
    let rep = check_params(&store, &entries, 1e-5, 1e-6, |g, s| {
        let xv = g.input(x.clone());
        build(g, s, xv)
    });
    ensure!(rep.passes(TOL), "attention parameters: {rep:?}");
    let e = input_check(&store, &x, 1e-5, build);
    ensure!(e < TOL, "attention input: {e:e}");
    report.push(("attention", rep.max_rel_error.max(e)));

    let mut store = ParamStore::new();
    let head = Head::new(&mut store, &mut r, 10, 8);
    let x = random_tensor(&mut r, &[24, 10]);
    let gt: Vec<f64> = (0..24).map(|i| (i % 5) as f64 / 5.0).collect();
    let build = |g: &mut Graph, s: &ParamStore, xv| {
        let (o, _) = head.forward(g, s, xv).unwrap();
        g.mse(o, &gt)
    };
    let rep = check_params(&store, &sample_entries(&store, 100), 1e-5, 1e-6, |g, s| {
        let xv = g.input(x.clone());
        build(g, s, xv)
    });
    ensure!(rep.passes(TOL), "head parameters: {rep:?}");
    let e = input_check(&store, &x, 1e-5, build);
    ensure!(e < TOL, "head input: {e:e}");
    report.push(("head", rep.max_rel_error.max(e)));

    Ok(report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "))
}

pub fn knn_oracle(_: &mut Shared) -> Outcome {
    let mut r = rng(5);
    let random = random_points(&mut r, 2000);
    // a coarse lattice gives equal distances and coincident points
    let lattice: Vec<[f64; 3]> =
        (0..2000).map(|_| std::array::from_fn(|_| r.random_range(0..10) as f64 * 0.125 - 0.5)).collect();
    for (label, pts) in [("random", &random), ("lattice", &lattice)] {
        for k in [3, 6, 9, 15] {
            let g = knn(pts, k).map_err(|e| e.to_string())?;
            let (idx, dist) = oracles::brute_knn(pts, k);
            ensure!(g.indices == idx, "{label} k={k}: neighbor indices differ");
            let dev = max_abs_diff(&g.distances, &dist);
            ensure!(dev <= 1e-12, "{label} k={k}: distances differ by {dev:e}");
        }
    }
    Ok("N'=2000, k in {3,6,9,15}, random and tied lattice points".into())
}

pub fn interpolation(_: &mut Shared) -> Outcome {
    let mut r = rng(6);
    let (w, h) = (13, 9);
    let map: Vec<f64> = (0..w * h).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut bi: f64 = 0.0;
    for _ in 0..1000 {
        let (u, v) = (r.random_range(-0.1..1.1), r.random_range(-0.1..1.1));
        bi = bi.max((bilinear(&map, w, h, u, v) - oracles::bilinear(&map, w, h, u, v)).abs());
    }
    let dims = [7, 8, 9];
    let data: Vec<f64> = (0..7 * 8 * 9).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tri: f64 = 0.0;
    for _ in 0..1000 {
        let f: [f64; 3] = std::array::from_fn(|a| r.random_range(-0.5..dims[a] as f64 - 0.5));
        tri = tri.max((trilinear(&data, dims, f) - oracles::trilinear(&data, dims, f)).abs());
    }
    ensure!(bi <= 1e-12, "bilinear deviates by {bi:e}");
    ensure!(tri <= 1e-12, "trilinear deviates by {tri:e}");
    Ok(format!("bilinear {bi:.1e}, trilinear {tri:.1e} over 1000 queries each"))
}

pub fn projector(_: &mut Shared) -> Outcome {
    let e = |e: cbct_core::Error| e.to_string();
    // central ray through a unit-density cube
    let g = ScannerGeometry::default().with_detector_pixels([33, 33]);
    let grid = GridSpec::covering(16, [409.6; 3]).map_err(e)?;
    let ones = Volume::from_fn(grid, |_, _, _| 1.0);
    let mut chord_err: f64 = 0.0;
    for angle in [0.0, 27.0, 90.0] {
        let img = render_drr(&ones, &g, angle, default_step_mm(&grid)).map_err(e)?;
        let (o, d, len) = pixel_ray(&g, angle, 16, 16);
        let want = oracles::clipped_chord(o, d, len, grid.box_half_extent_mm());
        chord_err = chord_err.max((img.get(16, 16) - want).abs() / want);
    }
    ensure!(chord_err < 0.01, "central chord off by {:.3}%", 100.0 * chord_err);

    // <A v, y> against <v, Aᵀ y> on 16³
    let g = ScannerGeometry::default().with_detector_pixels([32, 32]);
    let mut r = rng(7);
    let pitch = g.pixel_pitch_mm();
    let dx = grid.spacing_mm[0];
    let mag = g.magnification();
    let scale = dx * dx * dx / (pitch[0] * pitch[1]) * mag * mag;
    let mut adj_err: f64 = 0.0;
    for angle in [0.0, 45.0, 120.0] {
        let v = Volume::from_fn(grid, |_, _, _| r.random::<f64>());
        let y = Projection { width: 32, height: 32, data: (0..1024).map(|_| r.random::<f64>()).collect() };
        let av = render_drr(&v, &g, angle, default_step_mm(&grid)).map_err(e)?;
        let lhs: f64 = av.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let bt = backproject(&y, &g, angle, &grid, Weighting::InverseSquare).map_err(e)?;
        let rhs: f64 = scale * v.data().iter().zip(bt.data()).map(|(a, b)| a * b).sum::<f64>();
        adj_err = adj_err.max((lhs - rhs).abs() / lhs.abs());
    }
    ensure!(adj_err < 0.05, "adjointness off by {:.2}%", 100.0 * adj_err);

    let a = Volume::from_fn(grid, |_, _, _| r.random::<f64>());
    let b = Volume::from_fn(grid, |_, _, _| r.random::<f64>());
    let combo = Volume::new(grid, a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 0.5 * y).collect()).map_err(e)?;
    let step = default_step_mm(&grid);
    let (pa, pb, pc) = (
        render_drr(&a, &g, 33.0, step).map_err(e)?,
        render_drr(&b, &g, 33.0, step).map_err(e)?,
        render_drr(&combo, &g, 33.0, step).map_err(e)?,
    );
    let mut lin: f64 = 0.0;
    for i in 0..pa.data.len() {
        let want = 2.0 * pa.data[i] - 0.5 * pb.data[i];
        lin = lin.max((pc.data[i] - want).abs() / pa.data[i].abs().max(1.0));
    }
    ensure!(lin < 1e-6, "linearity off by {lin:e}");
    Ok(format!(
        "chord {:.3}%, adjointness {:.2}%, linearity {lin:.1e}",
        100.0 * chord_err,
        100.0 * adj_err
    ))
}

pub fn sart(_: &mut Shared) -> Outcome {
    let e = |e: cbct_core::Error| e.to_string();
    let g = ScannerGeometry::default().with_detector_pixels([16, 16]);
    let grid = GridSpec::covering(16, g.volume_extent_mm).map_err(e)?;
    let truth = generate(PhantomKind::Shells, grid, 21);
    let angles = equiangular_view_angles(36).map_err(e)?.angles_deg;
    let proj = project_all(&truth, &g, &angles).map_err(e)?;
    let iterations = 10;
    let mats: Vec<_> = angles.iter().map(|&a| oracles::view_matrices(&g, &grid, a)).collect();
    let measured: Vec<Vec<f64>> = proj.images.iter().map(|im| im.data.clone()).collect();
    let reference = oracles::dense_sart(&mats, &measured, iterations, 0.5);

    let rel = |x: &[f64]| {
        let d: Vec<f64> = x.iter().zip(truth.data()).map(|(a, b)| a - b).collect();
        oracles::norm(&d) / oracles::norm(truth.data())
    };
    let mut errors = Vec::new();
    let mut worst_ref: f64 = 0.0;
    let out = sart_reconstruct_observed(&proj, &g, &grid, iterations, 0.5, |it, v| {
        let want = &reference[it - 1];
        let scale = want.iter().cloned().fold(0.0, f64::max).max(1e-12);
        worst_ref = worst_ref.max(max_abs_diff(v.data(), want) / scale);
        errors.push(rel(v.data()));
    })
    .map_err(e)?;
    ensure!(worst_ref < 1e-8, "iterates differ from the dense reference by {worst_ref:e}");
    ensure!(errors.windows(2).all(|w| w[1] < w[0]), "relative error not strictly decreasing: {errors:?}");

    let initial = oracles::norm(&measured.concat());
    let now = project_all(&out, &g, &angles).map_err(e)?;
    let residual: Vec<f64> = now.images.iter().zip(&proj.images).flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x - y)).collect();
    let ratio = oracles::norm(&residual) / initial;
    ensure!(ratio < 0.1, "residual ratio {ratio:.4}");
    Ok(format!(
        "rel error {:.4} -> {:.4}, residual ratio {ratio:.4}, reference deviation {worst_ref:.1e}",
        errors[0],
        errors[iterations - 1]
    ))
}

const SCBCT: &str = env!("CARGO_BIN_EXE_scbct");

fn scbct(args: &[&str]) -> Result<(), String> {
    let out = Command::new(SCBCT).args(args).env("SCBCT_DETERMINISTIC", "1").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("scbct {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn smoke_run(dir: &Path) -> Result<(String, Vec<u8>), String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    scbct(&["phantom", "--kind", "shells", "--size", "16", "--seed", "1", "--out", &p("gt.vol")])?;
    scbct(&["drr", "--volume", &p("gt.vol"), "--pixels", "32", "--views", "6", "--seed", "2", "--out", &p("proj")])?;
    let (gt, proj, run) = (p("gt.vol"), p("proj"), p("run"));
    let mut train = vec!["train", "--volume", &gt, "--projections", &proj, "--seed", "3", "--out", &run];
    for kv in crate::desk::SMOKE_OVERRIDES {
        train.extend(["--set", kv]);
    }
    scbct(&train)?;
    let ckpt = dir.join("run/model.ckpt").to_string_lossy().into_owned();
    scbct(&["reconstruct", "--checkpoint", &ckpt, "--projections", &p("proj"), "--like", &p("gt.vol"), "--out", &p("rec.vol")])?;
    scbct(&["eval", "--pred", &p("rec.vol"), "--gt", &p("gt.vol")])?;
    let log = std::fs::read_to_string(dir.join("run/loss.csv")).map_err(|e| e.to_string())?;
    let raw = std::fs::read(dir.join("rec.raw")).map_err(|e| e.to_string())?;
    Ok((log, raw))
}

pub fn determinism(_: &mut Shared) -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (log_a, rec_a) = smoke_run(a.path())?;
    let (log_b, rec_b) = smoke_run(b.path())?;
    let steps = log_a.lines().count().saturating_sub(1);
    ensure!(steps >= 2, "loss log has {steps} steps");
    ensure!(log_a == log_b, "loss logs differ");
    ensure!(rec_a == rec_b, "reconstructions differ");
    Ok(format!("{steps} logged steps and {} reconstruction bytes identical", rec_a.len()))
}
