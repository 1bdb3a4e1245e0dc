#![allow(dead_code)]

use humangs::dataio::{ring_scene, MultiViewSample, SceneSpec};
use humangs::networks::NetConfig;
use humangs::pipeline::TrainConfig;

/// Narrow networks for fast tests.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        unet_widths: [8, 8, 8],
        image_feature_channels: 8,
        depth_feature_channels: 8,
        sparse_widths: [4, 4, 4, 4],
        spd_channels: 8,
        head_hidden: 16,
        offset_hidden: 16,
        semantic_dim: 16,
        ..NetConfig::default()
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig { iterations: 4, refiner_pretrain_iters: 1, log_every: 0, net: tiny_net(), ..TrainConfig::desk() }
}

/// 16x16 scene, four ring views, two of them inputs, 64 template points.
pub fn tiny_scene(seed: u64) -> MultiViewSample {
    let spec = SceneSpec { template_points: 64, ..SceneSpec::random(seed) };
    ring_scene(&spec, 4, 2, 16, &format!("tiny{seed}")).unwrap()
}
