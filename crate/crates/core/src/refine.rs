//! Coarse-to-fine regression: render depth from the coarse Gaussians,
//! refine and unproject it to pixel-wise points, correct them with learned
//! offsets and regress one fine Gaussian per point.

use std::rc::Rc;

use gradtape::{Graph, Session, Tensor, Var};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataio::MultiViewSample;
use crate::error::{Error, Result};
use crate::geometry::{visibility_weights, CameraModel, DepthMap, FeaturePointCloud};
use crate::networks::{sample_volume, ModelParams, RefinedDepth};
use crate::prior::{pixel_features_var, PriorConfig, PriorResult};
use crate::rasterizer::{rasterize_with_state, render_vars, GaussianSet, GaussianVars, RasterConfig, RenderOutput};

/// Non-learned knobs of the fine stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineConfig {
    /// Unproject every `stride`-th pixel row and column.
    pub unproject_stride: usize,
    /// Ablation: force all offsets to zero.
    pub zero_offsets: bool,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self { unproject_stride: 1, zero_offsets: false }
    }
}

/// Expected depth of the coarse Gaussians in each camera; pixels whose
/// alpha does not exceed the threshold are invalid.
pub fn coarse_depths(coarse: &GaussianSet, cams: &[CameraModel], raster: &RasterConfig) -> Result<Vec<DepthMap>> {
    cams.iter().map(|c| Ok(rasterize_with_state(coarse, c, raster)?.output().depth_map())).collect()
}

/// Pixel-wise points on a tape: the union over views of every valid,
/// in-mask pixel unprojected at its refined depth. Gradients reach the
/// refined depths.
pub struct PixelwiseVars {
    /// `[N, 3]`.
    pub positions: Var,
    /// `(source slot, flat pixel index)` of each point.
    pub origins: Vec<(usize, usize)>,
}

pub fn pixelwise_points_var(g: &Graph, refined: &[RefinedDepth], cams: &[CameraModel], masks: &[Vec<bool>], stride: usize) -> Result<PixelwiseVars> {
    if refined.len() != cams.len() || masks.len() != cams.len() {
        return Err(Error::Shape("pixel-wise points need one depth, camera and mask per view".into()));
    }
    let stride = stride.max(1);
    let mut parts = Vec::new();
    let mut origins = Vec::new();
    for (v, ((r, cam), mask)) in refined.iter().zip(cams).zip(masks).enumerate() {
        let (w, h) = (r.width, r.height);
        if mask.len() != w * h {
            return Err(Error::Shape(format!("mask of {} pixels for a {w}x{h} depth", mask.len())));
        }
        let depth = g.value(r.depth);
        let mut idx = Vec::new();
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                let i = y * w + x;
                if r.valid[i] && mask[i] && depth.data()[i] > 0.0 {
                    idx.push(i);
                }
            }
        }
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let center = cam.center();
        let mut rays = Vec::with_capacity(3 * n);
        let mut centers = Vec::with_capacity(3 * n);
        for &i in &idx {
            let ray = cam.ray_world((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            rays.extend(ray.iter().map(|&c| c as f32));
            centers.extend(center.iter().map(|&c| c as f32));
        }
        let z = g.gather_rows(g.reshape(r.depth, &[w * h, 1]), Rc::new(idx.clone()));
        let z3 = g.concat(&[z, z, z], 1);
        let pts = g.add_const(g.mul_const(z3, Rc::new(Tensor::new(&[n, 3], rays))), &Tensor::new(&[n, 3], centers));
        parts.push(pts);
        origins.extend(idx.into_iter().map(|i| (v, i)));
    }
    if parts.is_empty() {
        return Err(Error::NoForeground);
    }
    let positions = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
    Ok(PixelwiseVars { positions, origins })
}

/// Plain-value pixel-wise points with per-point `(source slot, pixel)`.
pub fn pixelwise_points(depths: &[DepthMap], cams: &[CameraModel], masks: &[Vec<bool>], stride: usize) -> Result<(FeaturePointCloud, Vec<(usize, usize)>)> {
    let g = Graph::new();
    let refined: Vec<RefinedDepth> = depths
        .iter()
        .map(|d| RefinedDepth {
            depth: g.constant(Tensor::new(&[1, d.height(), d.width()], d.values().to_vec())),
            valid: d.validity().to_vec(),
            features: g.constant(Tensor::zeros(&[1, d.height(), d.width()])),
            width: d.width(),
            height: d.height(),
        })
        .collect();
    let pw = pixelwise_points_var(&g, &refined, cams, masks, stride)?;
    Ok((FeaturePointCloud::from_positions_tensor(&g.value(pw.positions)), pw.origins))
}

/// Offsets for `queries` from the latent volume built over the prior
/// points and their features: `[N, 3]`, each component within
/// `delta_max`.
pub fn latent_offsets_var(s: &Session, model: &ModelParams, prior: &PriorResult, queries: &[Vector3<f64>]) -> Result<Var> {
    let q = prior.prior_points.features.as_ref().ok_or_else(|| Error::InvalidInput("prior points carry no features".into()))?;
    let vol = model.latent_volume_net.build_volume(s, &prior.prior_points.positions, s.constant(q.clone()))?;
    model.offset_head.forward(s, sample_volume(s, &vol, queries))
}

/// The fine stage on a tape.
pub struct FineVars {
    pub coarse_depths: Vec<DepthMap>,
    pub refined: Vec<RefinedDepth>,
    pub pixelwise: PixelwiseVars,
    /// `[N, 3]`.
    pub offsets: Var,
    /// `[N, 3]`, pixel-wise positions plus offsets.
    pub final_positions: Var,
    pub fine: GaussianVars,
}

/// Detached fine-stage outputs.
#[derive(Clone, Debug)]
pub struct FineResult {
    pub pixelwise_points: FeaturePointCloud,
    pub offsets: Vec<Vector3<f64>>,
    pub final_points: FeaturePointCloud,
    pub fine_gaussians: GaussianSet,
    pub coarse_depths: Vec<DepthMap>,
    pub refined_coarse_depths: Vec<DepthMap>,
    pub rendered_target: Option<RenderOutput>,
}

impl FineVars {
    pub fn detach(&self, g: &Graph) -> FineResult {
        let to_vecs = |v: Var| FeaturePointCloud::from_positions_tensor(&g.value(v)).positions;
        FineResult {
            pixelwise_points: FeaturePointCloud::new(to_vecs(self.pixelwise.positions)),
            offsets: to_vecs(self.offsets),
            final_points: FeaturePointCloud::new(to_vecs(self.final_positions)),
            fine_gaussians: self.fine.to_set(g),
            coarse_depths: self.coarse_depths.clone(),
            refined_coarse_depths: self.refined.iter().map(|r| r.to_depth_map(g)).collect(),
            rendered_target: None,
        }
    }
}

/// Fine stage given a (frozen) prior result.
pub fn regress_fine_vars(
    s: &Session,
    model: &ModelParams,
    sample: &MultiViewSample,
    prior: &PriorResult,
    prior_cfg: &PriorConfig,
    cfg: &FineConfig,
    raster: &RasterConfig,
) -> Result<FineVars> {
    let cams = sample.source_cameras();
    let coarse = coarse_depths(&prior.coarse_gaussians, &cams, raster)?;
    let refined = sample
        .sources()
        .zip(&coarse)
        .map(|(v, d)| model.fine_refiner.forward(s, d, &v.image.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Vec<bool>> = sample.sources().map(|v| v.mask_bools()).collect();
    let pixelwise = pixelwise_points_var(s, &refined, &cams, &masks, cfg.unproject_stride)?;
    let p_prime = FeaturePointCloud::from_positions_tensor(&s.value(pixelwise.positions));
    let n = p_prime.len();
    let offsets = if cfg.zero_offsets {
        s.constant(Tensor::zeros(&[n, 3]))
    } else {
        latent_offsets_var(s, model, prior, &p_prime.positions)?
    };
    let final_positions = s.add(pixelwise.positions, offsets);
    let final_points = FeaturePointCloud::from_positions_tensor(&s.value(final_positions));

    let refined_maps: Vec<DepthMap> = refined.iter().map(|r| r.to_depth_map(s)).collect();
    let vis = visibility_weights(&final_points, &cams, &refined_maps, prior_cfg.visibility_tau)?;
    let image_maps: Vec<Var> = match &model.fine_extractor {
        Some(ex) => sample.sources().map(|v| ex.forward(s, s.constant(v.image.to_tensor()))).collect::<Result<_>>()?,
        None => prior.image_features.iter().map(|f| s.constant(f.values.clone())).collect(),
    };
    let depth_maps: Vec<Var> = refined.iter().map(|r| r.features).collect();
    let f_depth = pixel_features_var(s, &final_points.positions, &depth_maps, &cams, &vis)?;
    let f_image = pixel_features_var(s, &final_points.positions, &image_maps, &cams, &vis)?;
    let head = model.fine_head.forward(s, s.concat(&[f_depth, f_image], 1))?;
    let fine = GaussianVars {
        positions: final_positions,
        rotations: head.rotations,
        scales: head.scales,
        opacities: head.opacities,
        colors: head.colors,
    };
    Ok(FineVars { coarse_depths: coarse, refined, pixelwise, offsets, final_positions, fine })
}

/// Detached fine stage rendered into `target`.
#[allow(clippy::too_many_arguments)]
pub fn regress_fine(
    model: &ModelParams,
    sample: &MultiViewSample,
    prior: &PriorResult,
    prior_cfg: &PriorConfig,
    cfg: &FineConfig,
    raster: &RasterConfig,
    target: &CameraModel,
) -> Result<FineResult> {
    let s = Session::new(&model.store);
    let vars = regress_fine_vars(&s, model, sample, prior, prior_cfg, cfg, raster)?;
    let rendered = render_vars(&s, &vars.fine, target, raster)?;
    let mut out = vars.detach(&s);
    out.rendered_target = Some(rendered.output);
    Ok(out)
}
