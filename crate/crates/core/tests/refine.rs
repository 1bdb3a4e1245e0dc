mod common;

use common::{tiny_net, tiny_scene};
use humangs::error::Error;
use humangs::geometry::{CameraModel, DepthMap};
use humangs::networks::ModelParams;
use humangs::prior::{predict_prior_points, PriorConfig};
use humangs::rasterizer::RasterConfig;
use humangs::refine::{coarse_depths, pixelwise_points, regress_fine, FineConfig};
use nalgebra::Vector3;

fn gt_depths(scene: &humangs::dataio::MultiViewSample) -> (Vec<DepthMap>, Vec<CameraModel>, Vec<Vec<bool>>) {
    let views: Vec<_> = scene.sources().collect();
    (
        views.iter().map(|v| v.depth.clone().unwrap()).collect(),
        views.iter().map(|v| v.camera.clone()).collect(),
        views.iter().map(|v| v.mask_bools()).collect(),
    )
}

#[test]
fn pixelwise_count_is_valid_masked_pixels() {
    let scene = tiny_scene(3);
    let (depths, cams, masks) = gt_depths(&scene);
    let (pts, origins) = pixelwise_points(&depths, &cams, &masks, 1).unwrap();
    let want: usize = depths.iter().zip(&masks).map(|(d, m)| d.validity().iter().zip(m).filter(|(a, b)| **a && **b).count()).sum();
    assert_eq!(pts.len(), want);
    assert_eq!(origins.len(), want);
    let (coarse, _) = pixelwise_points(&depths, &cams, &masks, 2).unwrap();
    assert!(coarse.len() < want && coarse.len() * 5 > want);
}

#[test]
fn pixelwise_points_reproject_to_their_pixels_and_lie_on_the_surface() {
    let scene = tiny_scene(4);
    let (depths, cams, masks) = gt_depths(&scene);
    let (pts, origins) = pixelwise_points(&depths, &cams, &masks, 1).unwrap();
    let parts = scene.spec.as_ref().unwrap().body_parts();
    for (p, &(slot, pix)) in pts.positions.iter().zip(&origins) {
        let w = cams[slot].width();
        let (px, z) = cams[slot].project_point(p);
        let center = (pix as f64 % w as f64 + 0.5, (pix / w) as f64 + 0.5);
        assert!((px.x - center.0).abs() < 0.5 && (px.y - center.1).abs() < 0.5);
        assert!((z - depths[slot].values()[pix] as f64).abs() < 1e-5);
        // Ground-truth depth lifts onto the analytic surface (f32 depth).
        assert!(humangs::dataio::union_sdf(&parts, p).abs() < 1e-4);
    }
}

#[test]
fn empty_masks_are_reported() {
    let scene = tiny_scene(5);
    let (depths, cams, masks) = gt_depths(&scene);
    let none: Vec<Vec<bool>> = masks.iter().map(|m| vec![false; m.len()]).collect();
    assert!(matches!(pixelwise_points(&depths, &cams, &none, 1), Err(Error::NoForeground)));
}

#[test]
fn final_points_are_pixelwise_plus_bounded_offsets() {
    let scene = tiny_scene(6);
    let net = tiny_net();
    let model = ModelParams::new(&net, 2).unwrap();
    let pcfg = PriorConfig::default();
    let raster = RasterConfig::default();
    let prior = predict_prior_points(&model, &scene, &pcfg).unwrap();
    let target = &scene.views[scene.held_out_views[0]].camera;
    let fine = regress_fine(&model, &scene, &prior, &pcfg, &FineConfig::default(), &raster, target).unwrap();
    let n = fine.pixelwise_points.len();
    assert!(n > 0);
    assert_eq!(fine.final_points.len(), n);
    assert_eq!(fine.fine_gaussians.len(), n);
    assert_eq!(fine.fine_gaussians.positions, fine.final_points.positions);
    fine.fine_gaussians.validate().unwrap();
    let mut moved = 0;
    for ((p, d), g) in fine.pixelwise_points.positions.iter().zip(&fine.offsets).zip(&fine.final_points.positions) {
        assert!(d.iter().all(|c| c.abs() <= net.delta_max + 1e-7));
        // Sum carried out in f32 on the tape.
        assert!((p + d - g).abs().max() < 1e-6);
        moved += (d.norm() > 0.0) as usize;
    }
    assert!(moved > 0);
    // Pixel-wise points come from the coarse depths rendered into each view.
    let rendered = coarse_depths(&prior.coarse_gaussians, &scene.source_cameras(), &raster).unwrap();
    assert_eq!(rendered, fine.coarse_depths);
    let rt = fine.rendered_target.as_ref().unwrap();
    assert_eq!((rt.width, rt.height), (16, 16));

    let zero = regress_fine(&model, &scene, &prior, &pcfg, &FineConfig { zero_offsets: true, ..FineConfig::default() }, &raster, target)
        .unwrap();
    assert_eq!(zero.final_points.positions, zero.pixelwise_points.positions);
    assert!(zero.offsets.iter().all(|d| *d == Vector3::zeros()));
}
