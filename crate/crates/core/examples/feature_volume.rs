//! Build a sparse feature volume over a template and compare trilinear
//! lookups against a brute-force oracle.
//!
//! cargo run --release --example feature_volume

use gradtape::{ParamStore, Session, Tensor};
use humangs::dataio::SceneSpec;
use humangs::networks::{sample_volume, voxelize, SparseConvNet};
use humangs::selftest::brute_force_sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let template = SceneSpec::random(3).template();
    let net_cfg = humangs::pipeline::desk_net_config();
    let vox = voxelize(&template.positions, net_cfg.voxel_size);
    println!("{} template points in {} voxels of {} m", template.len(), vox.coords.len(), net_cfg.voxel_size);

    let mut store = ParamStore::new(0);
    let net = SparseConvNet::new(&mut store, "demo", 3, &net_cfg);
    let s = Session::new(&store);
    let feats = Tensor::new(&[template.len(), 3], template.positions.iter().flat_map(|p| p.iter().map(|&c| c as f32)).collect());
    let vol = net.build_volume(&s, &template.positions, s.constant(feats))?;
    println!("fused grid: {} cells x {} channels", vol.cells.len(), net.fused_channels());

    let got = s.value(sample_volume(&s, &vol, &template.positions));
    let table = s.value(vol.features);
    let c = table.shape()[1];
    let mut worst: f64 = 0.0;
    for (i, p) in template.positions.iter().enumerate() {
        for (k, want) in brute_force_sample(&vol, &table, p).into_iter().enumerate() {
            worst = worst.max((got.data()[i * c + k] as f64 - want).abs());
        }
    }
    println!("max deviation from the oracle at {} queries: {worst:.2e}", template.len());
    Ok(())
}
