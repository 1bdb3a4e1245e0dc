use std::path::Path;
use std::process::{Command, Output};

fn humangs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_humangs")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &[&str] = &[
    "--iterations", "3", "--refiner_pretrain_iters", "1", "--unet_widths", "[8,8,8]", "--sparse_widths", "[4,4,4,4]",
    "--spd_channels", "8", "--head_hidden", "16", "--offset_hidden", "16", "--log_every", "0",
];

fn gen(cwd: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", out, "--scenes", "2", "--views", "4", "--sources", "2", "--size", "16", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&humangs(&args, cwd));
}

#[test]
fn gen_data_layout_determinism_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "a", &["--misalign", "2"]);
    gen(t.path(), "b", &["--misalign", "2"]);
    for s in ["scene_000", "scene_001"] {
        let views = std::fs::read_dir(t.path().join("a").join(s)).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(views, 4);
    }
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(t.path().join("a/manifest.json")).unwrap()).unwrap();
    let d = m[0]["template_surface_distance_m"].as_f64().unwrap();
    // A rigid 2 cm shift keeps every point within 2 cm of the surface.
    assert!(d > 0.005 && d <= 0.02, "{d}");
}

#[test]
fn usage_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(humangs(&["gen-data", "--out", "x", "--frobnicate"], t.path()).status.code(), Some(1));
    assert_eq!(humangs(&["train", "--stage", "2", "--data", "x", "--out", "y"], t.path()).status.code(), Some(1));
    assert_eq!(humangs(&["train", "--stage", "1", "--data", "x", "--out", "y", "--no_such_key", "1"], t.path()).status.code(), Some(1));
    assert_eq!(humangs(&["dance"], t.path()).status.code(), Some(1));
    // Missing data directory is an I/O failure.
    assert_eq!(humangs(&["train", "--stage", "1", "--data", "missing", "--out", "y"], t.path()).status.code(), Some(3));
}

#[test]
fn train_resume_render_eval() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    gen(p, "d", &[]);
    let mut a = vec!["train", "--stage", "1", "--data", "d", "--out", "ck"];
    a.extend_from_slice(TINY);
    ok(&humangs(&a, p));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ck/manifest.json")).unwrap()).unwrap();
    assert_eq!((m["stage"].as_u64(), m["iteration"].as_u64()), (Some(1), Some(3)));
    assert_eq!(std::fs::read_to_string(p.join("ck/loss.csv")).unwrap().lines().count(), 4);

    // Resume to a larger total.
    ok(&humangs(&["train", "--stage", "1", "--data", "d", "--out", "ck", "--resume", "ck", "--iterations", "5"], p));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ck/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["iteration"].as_u64(), Some(5));

    let mut a = vec!["train", "--stage", "2", "--data", "d", "--out", "ck2", "--stage1", "ck"];
    a.extend_from_slice(TINY);
    ok(&humangs(&a, p));
    let m2: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ck2/manifest.json")).unwrap()).unwrap();
    assert_eq!(m2["stage"].as_u64(), Some(2));
    assert_eq!(m2["stage1_checksum"], m["stage1_checksum"]);

    let bad = humangs(&["render", "--ckpt", "ck2", "--scene", "d/scene_000", "--target-view", "4", "--out", "r.png"], p);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("0..=3"));

    ok(&humangs(&["render", "--ckpt", "ck2", "--scene", "d/scene_000", "--target-view", "3", "--out", "r.png", "--dump-intermediates"], p));
    let img = humangs::dataio::decode_png(&p.join("r.png")).unwrap();
    assert_eq!((img.width, img.height), (16, 16));
    let template = humangs::dataio::read_ply(&p.join("r_template_points.ply")).unwrap();
    let prior = humangs::dataio::read_ply(&p.join("r_prior_points.ply")).unwrap();
    assert_eq!(prior.len(), template.len() * 8);
    assert!(p.join("r_coarse.png").is_file() && p.join("r_final_points.ply").is_file());

    ok(&humangs(&["eval", "--ckpt", "ck2", "--data", "d", "--out", "report.json"], p));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("report.json")).unwrap()).unwrap();
    let rows = rep["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        for k in ["scene", "view", "psnr", "ssim"] {
            assert!(r.get(k).is_some());
        }
    }
    let mean = rows.iter().map(|r| r["psnr"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!((rep["mean_psnr"].as_f64().unwrap() - mean).abs() < 1e-9);

    ok(&humangs(&["eval", "--identity", "--data", "d", "--out", "id.json"], p));
    let id: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("id.json")).unwrap()).unwrap();
    assert!(id["rows"].as_array().unwrap().iter().all(|r| r["ssim"].as_f64() == Some(1.0)));
}

#[test]
fn selftest_passes_and_catches_an_injected_fault() {
    let t = tempfile::tempdir().unwrap();
    let out = humangs(&["selftest"], t.path());
    let text = ok(&out);
    for name in ["rasterizer-gradients", "trilinear-oracle", "scene-round-trip", "checkpoint-round-trip"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.contains("PASS")), "{name}\n{text}");
    }
    let bad = humangs(&["selftest", "--inject-grad-fault"], t.path());
    assert_ne!(bad.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&bad.stdout).lines().any(|l| l.starts_with("rasterizer-gradients") && l.contains("FAIL")));
}
