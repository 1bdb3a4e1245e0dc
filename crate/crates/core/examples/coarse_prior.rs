//! Run the prior stage once: densify the template, regress coarse Gaussians,
//! render a target view and backpropagate an image loss.
//!
//! cargo run --release --example coarse_prior -- [full|desk]

use std::time::Instant;

use gradtape::Session;
use humangs::dataio::{desk_scene, SceneSpec};
use humangs::networks::{ModelParams, NetConfig};
use humangs::objective::l1_loss_var;
use humangs::prior::{predict_prior_vars, PriorConfig};
use humangs::rasterizer::{render_vars, RasterConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "desk".into());
    let net = if preset == "full" { NetConfig::default() } else { humangs::pipeline::desk_net_config() };
    let scene = desk_scene(&SceneSpec::random(1), 4, 48, "demo")?;
    let model = ModelParams::new(&net, 0)?;
    println!("{preset} preset: {} parameters", model.store.num_scalars());
    for _ in 0..2 {
        let t = Instant::now();
        let s = Session::new(&model.store);
        let prior = predict_prior_vars(&s, &model, &scene, &PriorConfig::default())?;
        let t_fwd = t.elapsed();
        let target = &scene.views[5];
        let out = render_vars(&s, &prior.coarse, &target.camera, &RasterConfig::default())?;
        let loss = l1_loss_var(&s, out.color, &target.image.to_tensor())?;
        let t_render = t.elapsed();
        let grads = s.backward(loss);
        report_zero(&model, &grads);
        let nonzero = grads.iter().filter(|g| g.as_ref().is_some_and(|g| g.sq_norm() > 0.0)).count();
        println!(
            "{} gaussians, loss {:.4}, forward {:?}, +render {:?}, total {:?}, {nonzero} params with gradient",
            s.shape(prior.positions)[0],
            s.value(loss).item(),
            t_fwd,
            t_render,
            t.elapsed()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn report_zero(model: &ModelParams, grads: &[Option<gradtape::Tensor>]) {
    for id in model.store.ids_with_prefix("s1.") {
        let g = grads[id.0].as_ref();
        if !g.is_some_and(|g| g.sq_norm() > 0.0) {
            println!("no gradient: {}", model.store.name(id));
        }
    }
}
