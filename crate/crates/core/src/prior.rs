//! Image-aligned prior points: lift the sparse template to dense points
//! and regress coarse Gaussians on them.

use std::rc::Rc;

use gradtape::{Graph, Session, SparseRows, Tensor, Var};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataio::MultiViewSample;
use crate::error::{Error, Result};
use crate::geometry::{
    splat_template_depth, unproject_with_pixels, visibility_weights, CameraModel, DepthMap, FeaturePointCloud, VisibilityWeights,
    DEFAULT_VISIBILITY_TAU, NEAR_PLANE,
};
use crate::networks::{sample_volume, FeatureMap, ModelParams, RefinedDepth, SparseConvNet};
use crate::rasterizer::{GaussianSet, GaussianVars};

/// Non-learned knobs of the prior stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Disk radius (pixels) used to splat template points into depth maps.
    pub splat_radius_px: f64,
    /// Depth-consistency bandwidth of the visibility weights (meters).
    pub visibility_tau: f64,
    /// Weigh views for the dense points against the refined depths rather
    /// than the template depths.
    pub prior_visibility_from_refined: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { splat_radius_px: 1.5, visibility_tau: DEFAULT_VISIBILITY_TAU, prior_visibility_from_refined: true }
    }
}

/// Bilinear weights of one point over a `[H * W]` image, pixel centers at
/// `+0.5`; corners outside the image are dropped.
fn bilinear_taps(cam: &CameraModel, p: &Vector3<f64>, weight: f64, base: usize, row: &mut Vec<(u32, f32)>) {
    if weight == 0.0 {
        return;
    }
    let (px, z) = cam.project_point(p);
    if !(z > NEAR_PLANE) || !cam.contains_pixel(&px) {
        return;
    }
    let (w, h) = (cam.width() as i64, cam.height() as i64);
    let (x, y) = (px.x - 0.5, px.y - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
            let wt = weight * wx * wy;
            if wt != 0.0 && xi >= 0 && yi >= 0 && xi < w && yi < h {
                row.push(((base + (yi * w + xi) as usize) as u32, wt as f32));
            }
        }
    }
}

/// Visibility-weighted bilinear samples of per-view `[C, H, W]` feature
/// maps at `points`: `[N, C]`. Sampling locations are constants.
pub fn pixel_features_var(g: &Graph, points: &[Vector3<f64>], maps: &[Var], cams: &[CameraModel], vis: &VisibilityWeights) -> Result<Var> {
    if maps.len() != cams.len() || vis.views != cams.len() || vis.points != points.len() {
        return Err(Error::Shape(format!(
            "{} maps, {} cameras, visibility {}x{} for {} points",
            maps.len(),
            cams.len(),
            vis.views,
            vis.points,
            points.len()
        )));
    }
    let mut flat = Vec::with_capacity(maps.len());
    let mut offsets = Vec::with_capacity(maps.len());
    let mut total = 0;
    let mut channels = None;
    for (m, cam) in maps.iter().zip(cams) {
        let s = g.shape(*m);
        if s.len() != 3 || s[1] != cam.height() || s[2] != cam.width() || channels.is_some_and(|c| c != s[0]) {
            return Err(Error::Shape(format!("feature map {s:?} for a {}x{} camera", cam.width(), cam.height())));
        }
        channels = Some(s[0]);
        offsets.push(total);
        total += s[1] * s[2];
        flat.push(g.transpose(g.reshape(*m, &[s[0], s[1] * s[2]])));
    }
    let rows = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut row = Vec::with_capacity(4 * cams.len());
            for (v, cam) in cams.iter().enumerate() {
                bilinear_taps(cam, p, vis.get(v, i), offsets[v], &mut row);
            }
            row
        })
        .collect();
    let stacked = if flat.len() == 1 { flat[0] } else { g.concat(&flat, 0) };
    Ok(g.spmm(Rc::new(SparseRows { cols: total, rows }), stacked))
}

/// Plain-value [`pixel_features_var`].
pub fn pixel_features(points: &FeaturePointCloud, maps: &[FeatureMap], cams: &[CameraModel], vis: &VisibilityWeights) -> Result<Tensor> {
    let g = Graph::new();
    let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.values.clone())).collect();
    let out = pixel_features_var(&g, &points.positions, &vars, cams, vis)?;
    Ok((*g.value(out)).clone())
}

/// Unproject refined depths (valid pixels) together with their depth
/// features into one featured cloud: positions and `[N, C]` features.
pub fn unproject_featured(g: &Graph, refined: &[RefinedDepth], cams: &[CameraModel]) -> Result<(Vec<Vector3<f64>>, Var)> {
    let mut positions = Vec::new();
    let mut parts = Vec::new();
    for (r, cam) in refined.iter().zip(cams) {
        let dm = r.to_depth_map(g);
        let pts = unproject_with_pixels(&dm, cam, 1);
        if pts.is_empty() {
            continue;
        }
        let c = g.shape(r.features)[0];
        let per_pixel = g.transpose(g.reshape(r.features, &[c, r.width * r.height]));
        parts.push(g.gather_rows(per_pixel, Rc::new(pts.iter().map(|(i, _)| *i).collect())));
        positions.extend(pts.into_iter().map(|(_, p)| p));
    }
    if positions.is_empty() {
        return Err(Error::NoGeometryEvidence);
    }
    let feats = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
    Ok((positions, feats))
}

/// Voxel-level features: build a feature volume from the unprojected
/// refined depths and sample it at `queries`: `[N, fused]`.
pub fn voxel_features_var(
    s: &Session,
    net: &SparseConvNet,
    refined: &[RefinedDepth],
    cams: &[CameraModel],
    queries: &[Vector3<f64>],
) -> Result<Var> {
    let (positions, feats) = unproject_featured(s, refined, cams)?;
    let vol = net.build_volume(s, &positions, feats)?;
    Ok(sample_volume(s, &vol, queries))
}

/// Everything the prior stage produces, still on the tape.
pub struct PriorVars {
    pub template_depths: Vec<DepthMap>,
    pub refined: Vec<RefinedDepth>,
    /// Per source view `[C, H, W]`.
    pub image_features: Vec<Var>,
    /// `[N * r1 * r2, 3]`.
    pub positions: Var,
    /// `[N * r1 * r2, C_q]`.
    pub point_features: Var,
    pub coarse: GaussianVars,
}

/// Detached prior-stage outputs.
#[derive(Clone, Debug)]
pub struct PriorResult {
    /// Dense points with their SPD features.
    pub prior_points: FeaturePointCloud,
    pub coarse_gaussians: GaussianSet,
    pub template_depths: Vec<DepthMap>,
    pub refined_template_depths: Vec<DepthMap>,
    pub depth_features: Vec<FeatureMap>,
    pub image_features: Vec<FeatureMap>,
}

impl PriorVars {
    pub fn detach(&self, g: &Graph, sample: &MultiViewSample) -> PriorResult {
        let pos = g.value(self.positions);
        let prior_points = FeaturePointCloud {
            positions: FeaturePointCloud::from_positions_tensor(&pos).positions,
            features: Some((*g.value(self.point_features)).clone()),
        };
        PriorResult {
            prior_points,
            coarse_gaussians: self.coarse.to_set(g),
            template_depths: self.template_depths.clone(),
            refined_template_depths: self.refined.iter().map(|r| r.to_depth_map(g)).collect(),
            depth_features: self
                .refined
                .iter()
                .zip(&sample.source_views)
                .map(|(r, &k)| FeatureMap { values: (*g.value(r.features)).clone(), view_index: k })
                .collect(),
            image_features: self
                .image_features
                .iter()
                .zip(&sample.source_views)
                .map(|(f, &k)| FeatureMap { values: (*g.value(*f)).clone(), view_index: k })
                .collect(),
        }
    }
}

/// Template depth per source view.
pub fn template_depths(sample: &MultiViewSample, cfg: &PriorConfig) -> Result<Vec<DepthMap>> {
    sample.sources().map(|v| splat_template_depth(&sample.template, &v.camera, cfg.splat_radius_px)).collect()
}

/// Refine each template depth with the coarse-stage refiner.
pub fn refine_template_depths(s: &Session, model: &ModelParams, sample: &MultiViewSample, depths: &[DepthMap]) -> Result<Vec<RefinedDepth>> {
    sample.sources().zip(depths).map(|(v, d)| model.refiner.forward(s, d, &v.image.to_tensor())).collect()
}

/// Full prior stage on a tape.
pub fn predict_prior_vars(s: &Session, model: &ModelParams, sample: &MultiViewSample, cfg: &PriorConfig) -> Result<PriorVars> {
    sample.validate()?;
    let cams = sample.source_cameras();
    let template = &sample.template;
    let depths = template_depths(sample, cfg)?;
    let refined = refine_template_depths(s, model, sample, &depths)?;
    let image_features =
        sample.sources().map(|v| model.extractor.forward(s, s.constant(v.image.to_tensor()))).collect::<Result<Vec<_>>>()?;

    let vis = visibility_weights(template, &cams, &depths, cfg.visibility_tau)?;
    let f_p = pixel_features_var(s, &template.positions, &image_features, &cams, &vis)?;
    let f_v = voxel_features_var(s, &model.volume_net, &refined, &cams, &template.positions)?;
    let context = s.concat(&[f_p, f_v], 1);
    let dense = model.spd.forward(s, s.constant(template.positions_tensor()), context, &template.centroid())?;

    let dense_points = FeaturePointCloud::from_positions_tensor(&s.value(dense.positions));
    let vis_depths: Vec<DepthMap> =
        if cfg.prior_visibility_from_refined { refined.iter().map(|r| r.to_depth_map(s)).collect() } else { depths.clone() };
    let vis_dense = visibility_weights(&dense_points, &cams, &vis_depths, cfg.visibility_tau)?;
    let f_po = pixel_features_var(s, &dense_points.positions, &image_features, &cams, &vis_dense)?;
    let head = model.coarse_head.forward(s, s.concat(&[dense.features, f_po], 1))?;
    let coarse = GaussianVars {
        positions: dense.positions,
        rotations: head.rotations,
        scales: head.scales,
        opacities: head.opacities,
        colors: head.colors,
    };
    Ok(PriorVars { template_depths: depths, refined, image_features, positions: dense.positions, point_features: dense.features, coarse })
}

/// Detached prior stage with the current parameters.
pub fn predict_prior_points(model: &ModelParams, sample: &MultiViewSample, cfg: &PriorConfig) -> Result<PriorResult> {
    let s = Session::new(&model.store);
    let vars = predict_prior_vars(&s, model, sample, cfg)?;
    Ok(vars.detach(&s, sample))
}
