//! Fast invariant suite behind `humangs selftest`.

use std::path::PathBuf;

use gradtape::{Graph, Session, Tensor};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{desk_scene, read_scene, write_scene, SceneSpec};
use crate::geometry::CameraModel;
use crate::networks::{sample_volume, FeatureVolume, NetConfig, SparseConvNet};
use crate::objective::{psnr_from_mse, stage1_loss, stage2_loss, LossWeights};
use crate::pipeline::{Checkpoint, TrainConfig};
use crate::rasterizer::{gradient_check_with, probe_weights, GaussianSet, RasterConfig};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random well-conditioned Gaussians in front of an identity camera.
pub fn random_gaussians(seed: u64, n: usize) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GaussianSet::default();
    for _ in 0..n {
        let z = rng.random_range(2.0..4.0);
        let pos = Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = Vector3::from_fn(|_, _| rng.random_range(0.15..0.5));
        let color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
        g.push(pos, q.map(|v| v / qn), scale, rng.random_range(0.2..0.9), color);
    }
    g
}

/// Square identity-pose pinhole camera with focal length equal to its size.
pub fn unit_camera(size: usize) -> CameraModel {
    let s = size as f64;
    CameraModel::pinhole(s, s, s / 2.0, s / 2.0, Matrix3::identity(), Vector3::zeros(), size, size).expect("valid camera")
}

/// Finite-difference check of the rasterizer backward pass.
pub fn gradient_check_max_error(seed: u64, n: usize, config: &RasterConfig) -> crate::error::Result<f64> {
    let cam = unit_camera(16);
    let g = random_gaussians(seed, n);
    Ok(gradient_check_with(&g, &cam, 1e-4, &probe_weights(16, 16, 1.0), config)?.max_rel_error)
}

/// Independent tent-function interpolation over every occupied cell.
pub fn brute_force_sample(vol: &FeatureVolume, features: &Tensor, p: &Vector3<f64>) -> Vec<f64> {
    let c = features.shape()[1];
    let mut out = vec![0.0; c];
    let u = vol.grid_coord(p);
    let (lo, hi) = vol.bounds;
    if (0..3).any(|k| u[k] < lo[k] as f64 || u[k] > hi[k] as f64) {
        return out;
    }
    for (cell, &row) in &vol.cells {
        let w: f64 = (0..3).map(|k| (1.0 - (u[k] - cell[k] as f64).abs()).max(0.0)).product();
        if w > 0.0 {
            for (o, f) in out.iter_mut().zip(&features.data()[row * c..(row + 1) * c]) {
                *o += w * *f as f64;
            }
        }
    }
    out
}

/// Largest deviation of `sample_volume` from the brute-force oracle over
/// `queries` random points around a random cloud.
pub fn trilinear_max_error(seed: u64, queries: usize) -> crate::error::Result<f64> {
    let cfg = NetConfig { sparse_widths: [4, 4, 4, 4], ..NetConfig::default() };
    let store_seed = seed;
    let mut store = gradtape::ParamStore::new(store_seed);
    let net = SparseConvNet::new(&mut store, "probe", 3, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vector3<f64>> = (0..400).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15))).collect();
    let feats = Tensor::new(&[pts.len(), 3], (0..pts.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
    let s = Session::new(&store);
    let vol = net.build_volume(&s, &pts, s.constant(feats))?;
    let q: Vec<Vector3<f64>> = (0..queries).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2))).collect();
    let got = s.value(sample_volume(&s, &vol, &q));
    let table = s.value(vol.features);
    let c = table.shape()[1];
    let mut worst: f64 = 0.0;
    for (i, p) in q.iter().enumerate() {
        for (k, want) in brute_force_sample(&vol, &table, p).into_iter().enumerate() {
            worst = worst.max((got.data()[i * c + k] as f64 - want).abs());
        }
    }
    Ok(worst)
}

fn scratch_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("humangs-selftest-{}-{tag}", std::process::id()))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Run every check; `inject_fault` corrupts the rasterizer backward pass
/// (negative control).
pub fn run(inject_fault: bool) -> Vec<CheckResult> {
    let raster = RasterConfig { inject_gradient_fault: inject_fault, ..RasterConfig::default() };
    vec![
        check("rasterizer-gradients", || {
            let mut worst: f64 = 0.0;
            for seed in 0..3 {
                worst = worst.max(gradient_check_max_error(seed, 8, &raster).map_err(|e| e.to_string())?);
            }
            ensure(worst < 1e-3, format!("max relative error {worst:.2e} (limit 1e-3)"))
        }),
        check("trilinear-oracle", || {
            let e = trilinear_max_error(5, 1000).map_err(|e| e.to_string())?;
            ensure(e < 1e-5, format!("max abs error {e:.2e} over 1000 queries (limit 1e-5)"))
        }),
        check("project-unproject", || {
            let cam = CameraModel::look_at(Vector3::new(0.3, -0.2, 1.5), Vector3::zeros(), Vector3::y(), 90.0, 48, 48).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let p = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
                let (px, z) = cam.project_point(&p);
                worst = worst.max((cam.unproject_pixel(px.x, px.y, z) - p).norm() / p.norm().max(1e-9));
            }
            ensure(worst < 1e-6, format!("max relative error {worst:.2e}"))
        }),
        check("loss-arithmetic", || {
            let w = LossWeights::default();
            let (a, b) = (stage1_loss([1.0; 5], &w), stage2_loss([1.0; 3], &w));
            let p = psnr_from_mse(0.01);
            ensure((a - 2.2).abs() < 1e-12 && (b - 1.1).abs() < 1e-12 && (p - 20.0).abs() < 1e-9, format!("stage1 {a}, stage2 {b}, psnr {p}"))
        }),
        check("scene-round-trip", || {
            let dir = scratch_dir("scene");
            let scene = desk_scene(&SceneSpec::random(2), 2, 16, "selftest").map_err(|e| e.to_string())?;
            write_scene(&scene, &dir).map_err(|e| e.to_string())?;
            let back = read_scene(&dir).map_err(|e| e.to_string());
            let _ = std::fs::remove_dir_all(&dir);
            ensure(back? == scene, "write then read is the identity".into())
        }),
        check("checkpoint-round-trip", || {
            let dir = scratch_dir("ckpt");
            let cfg = TrainConfig { iterations: 0, ..TrainConfig::desk() };
            let ck = Checkpoint::initial(&cfg).map_err(|e| e.to_string())?;
            ck.save(&dir).map_err(|e| e.to_string())?;
            let back = Checkpoint::load(&dir).map_err(|e| e.to_string());
            let _ = std::fs::remove_dir_all(&dir);
            let back = back?;
            ensure(
                back.params_bytes() == ck.params_bytes() && back.optimizer.to_bytes() == ck.optimizer.to_bytes(),
                "parameters and optimizer state byte-identical".into(),
            )
        }),
        check("tape-determinism", || {
            let g = Graph::new();
            let x = g.constant(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]));
            let y = g.sum(g.square(g.relu(x)));
            ensure(g.value(y).item() == 10.25, "relu-square-sum evaluates exactly".into())
        }),
    ]
}
