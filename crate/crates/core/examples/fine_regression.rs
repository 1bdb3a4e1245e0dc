//! Untrained coarse-to-fine pass: prior points, pixel-wise points, offsets
//! and the fine render of a held-out view.
//!
//! cargo run --release --example fine_regression

use humangs::dataio::{desk_scene, SceneSpec};
use humangs::networks::ModelParams;
use humangs::objective::psnr;
use humangs::pipeline::{infer, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = TrainConfig::desk();
    let scene = desk_scene(&SceneSpec::random(2), 4, 48, "demo")?;
    let model = ModelParams::new(&cfg.net, 0)?;
    let k = scene.held_out_views[0];
    let inf = infer(&model, &cfg, &scene, &scene.views[k].camera)?;
    let max_offset = inf.fine.offsets.iter().map(|d| d.amax()).fold(0.0, f64::max);
    println!("template {} -> prior {} points", scene.template.len(), inf.prior.prior_points.len());
    println!("pixel-wise {} points, max |offset| {max_offset:.4} m (bound {})", inf.fine.pixelwise_points.len(), cfg.net.delta_max);
    let gt = &scene.views[k].image;
    println!(
        "view {k}: coarse {:.2} dB, fine {:.2} dB, {:.2} s",
        psnr(&inf.coarse_render.color_image(), gt)?,
        psnr(&inf.fine_render.color_image(), gt)?,
        inf.seconds
    );
    Ok(())
}
