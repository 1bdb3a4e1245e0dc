//! Generate a desk-scale capsule-body scene, write it to disk and read it back.
//!
//! cargo run --example synthetic_scene -- [OUT_DIR]

use humangs::dataio::{desk_scene, mean_surface_distance, read_scene, write_scene, Misalignment, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example_scene".into());
    let spec = SceneSpec { misalignment: Misalignment::translation_cm(2.0, 5.0, 3), ..SceneSpec::random(1) };
    let scene = desk_scene(&spec, 4, 48, "demo")?;
    write_scene(&scene, out.as_ref())?;
    let back = read_scene(out.as_ref())?;
    for (a, b) in back.views.iter().zip(&scene.views) {
        assert_eq!(a.image, b.image, "image");
        assert_eq!(a.mask, b.mask, "mask");
        assert_eq!(a.depth, b.depth, "depth");
        assert_eq!(a.camera, b.camera, "camera");
    }
    assert_eq!(back, scene);
    let fg: Vec<usize> = scene.views.iter().map(|v| v.mask_bools().iter().filter(|m| **m).count()).collect();
    println!("wrote {} views to {out}", scene.views.len());
    println!("foreground pixels per view: {fg:?}");
    println!("sources {:?}, held out {:?}", scene.source_views, scene.held_out_views);
    println!("template: {} points, mean distance to surface {:.4} m", scene.template.len(), mean_surface_distance(&spec, &scene.template.positions));
    Ok(())
}
