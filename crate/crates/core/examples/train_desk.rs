//! Overfit both stages on one desk scene and report fit, held-out PSNR and
//! geometry diagnostics.
//!
//! cargo run --release --example train_desk -- [STAGE1_ITERS] [STAGE2_ITERS] [MISALIGN_CM] [SOURCES]

use humangs::dataio::{desk_scene, Misalignment, SceneSpec};
use humangs::objective::psnr;
use humangs::pipeline::{diagnostics, infer, train_stage1, train_stage2, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let arg = |i: usize, d: f64| std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(d);
    let (it1, it2, cm, nsrc) = (arg(1, 2000.0) as usize, arg(2, 1000.0) as usize, arg(3, 0.0), arg(4, 4.0) as usize);
    let noise = if cm > 0.0 { 5.0 } else { 0.0 };
    let spec = SceneSpec { misalignment: Misalignment::translation_cm(cm, noise, 3), ..SceneSpec::random(1) };
    let mut scene = desk_scene(&spec, 4, 48, "desk")?;
    if nsrc == 2 {
        scene = scene.with_sources(&[0, 2])?;
    }
    let held = scene.held_out_views[0];
    let data = vec![scene.clone()];
    let t = std::time::Instant::now();

    let cfg = TrainConfig { iterations: 0, refiner_pretrain_iters: it1 / 10, ..TrainConfig::desk() };
    let mut ck = Checkpoint::initial(&cfg)?;
    let step = (it1 / 4).max(1);
    while ck.iteration < it1 {
        ck.config.iterations = (ck.iteration + step).min(it1);
        train_stage1(&mut ck, &data, None)?;
        let d = diagnostics(&ck.model, &cfg, &scene)?;
        let inf = infer(&ck.model, &cfg, &scene, &scene.views[held].camera)?;
        println!(
            "stage 1 iter {:5}: source PSNR {:.2}, held-out coarse {:.2} dB, depth err template {:.4} refined {:.4}, chamfer template {:.4} prior {:.4} ({:.0} s)",
            ck.iteration,
            d.source_coarse_psnr,
            psnr(&inf.coarse_render.color_image(), &scene.views[held].image)?,
            d.template_depth_error,
            d.refined_depth_error,
            d.template_chamfer.unwrap_or(f64::NAN),
            d.prior_chamfer.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
    }
    let cfg2 = TrainConfig { stage: 2, iterations: 0, ..cfg.clone() };
    let mut ck2 = Checkpoint::stage2_from(&cfg2, &ck)?;
    let step = (it2 / 4).max(1);
    while ck2.iteration < it2 {
        ck2.config.iterations = (ck2.iteration + step).min(it2);
        train_stage2(&mut ck2, &data, None)?;
        let inf = infer(&ck2.model, &cfg2, &scene, &scene.views[held].camera)?;
        let gt = &scene.views[held].image;
        println!(
            "stage 2 iter {:5}: held-out coarse {:.2} dB, fine {:.2} dB ({:.0} s)",
            ck2.iteration,
            psnr(&inf.coarse_render.color_image(), gt)?,
            psnr(&inf.fine_render.color_image(), gt)?,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
