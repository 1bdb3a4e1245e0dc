//! Finite-difference check of the rasterizer backward pass, per attribute.
//!
//! cargo run --release --example gradient_check -- [GAUSSIANS]

use humangs::rasterizer::{gradient_check, RasterConfig};
use humangs::selftest::{random_gaussians, unit_camera};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map_or(Ok(8), |a| a.parse())?;
    let cam = unit_camera(16);
    for seed in 0..3 {
        let g = random_gaussians(seed, n);
        let r = gradient_check(&g, &cam, 1e-4)?;
        let [pos, rot, scale, opacity, color] = r.per_attribute;
        println!(
            "seed {seed}: max rel err {:.2e} (position {pos:.1e}, rotation {rot:.1e}, scale {scale:.1e}, opacity {opacity:.1e}, color {color:.1e}), {} checked, {} skipped",
            r.max_rel_error, r.checked, r.skipped
        );
    }
    let out = humangs::rasterizer::rasterize_with_state(&random_gaussians(0, n), &cam, &RasterConfig::default())?;
    println!("{} pixel contributions at 16x16", out.contribution_count());
    Ok(())
}
