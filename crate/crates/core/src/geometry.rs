//! Cameras, projection, depth maps, point clouds and multi-view visibility.
//!
//! Conventions: world frame is right-handed; a camera looks down its own +z
//! axis with +x right and +y down in the image. Pixel `(i, j)` covers
//! `[i, i + 1) x [j, j + 1)` in continuous pixel coordinates, so its center
//! sits at `(i + 0.5, j + 0.5)`. Depth always means camera-frame z.

use gradtape::Tensor;
use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Points closer than this (camera z, meters) count as behind the camera.
pub const NEAR_PLANE: f64 = 1e-3;

/// Calibrated pinhole camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
    width: usize,
    height: usize,
}

impl CameraModel {
    /// Validates that `intrinsics` is upper-triangular with positive focal
    /// lengths and that the rotation block of `extrinsics` (world-to-camera)
    /// is a proper rotation.
    pub fn new(intrinsics: Matrix3<f64>, extrinsics: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        let k = &intrinsics;
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!("image size {width}x{height}")));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidCamera("intrinsics must be upper-triangular with K[2,2] = 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let e = &extrinsics;
        if e[(3, 0)] != 0.0 || e[(3, 1)] != 0.0 || e[(3, 2)] != 0.0 || e[(3, 3)] != 1.0 {
            return Err(Error::InvalidCamera("extrinsics bottom row must be [0 0 0 1]".into()));
        }
        let r: Matrix3<f64> = extrinsics.fixed_view::<3, 3>(0, 0).into();
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera("rotation block is not orthonormal with det +1".into()));
        }
        if !intrinsics.iter().chain(extrinsics.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite entries".into()));
        }
        Ok(Self { intrinsics, extrinsics, width, height })
    }

    /// Pinhole camera from focal lengths, principal point and a
    /// world-to-camera rotation/translation.
    #[allow(clippy::too_many_arguments)]
    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(k, e, width, height)
    }

    /// Camera at `eye` looking at `target`, with world `up` projecting to
    /// image-up. Principal point at the image center.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::InvalidCamera("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the viewing direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::pinhole(focal, focal, width as f64 / 2.0, height as f64 / 2.0, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// World direction of the optical axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation().row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Continuous pixel coordinates and camera depth of a world point.
    pub fn project_point(&self, p: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let c = self.to_camera(p);
        let k = &self.intrinsics;
        let u = (k[(0, 0)] * c.x + k[(0, 1)] * c.y) / c.z + k[(0, 2)];
        let v = k[(1, 1)] * c.y / c.z + k[(1, 2)];
        (Vector2::new(u, v), c.z)
    }

    /// World point at camera depth `z` along the ray through pixel coordinate
    /// `(u, v)`.
    pub fn unproject_pixel(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        self.to_world(&(self.ray_camera(u, v) * z))
    }

    /// Camera-frame ray through `(u, v)` scaled to unit depth.
    pub fn ray_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vector3::new(x, y, 1.0)
    }

    /// World-frame ray through `(u, v)` scaled to unit camera depth.
    pub fn ray_world(&self, u: f64, v: f64) -> Vector3<f64> {
        self.rotation().transpose() * self.ray_camera(u, v)
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// The same camera after the whole world is moved by `offset`.
    pub fn translated_world(&self, offset: &Vector3<f64>) -> CameraModel {
        let mut e = self.extrinsics;
        let t = self.translation() - self.rotation() * offset;
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        CameraModel { extrinsics: e, ..self.clone() }
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> CameraModel {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        CameraModel { intrinsics: k, extrinsics: self.extrinsics, width, height }
    }
}

/// Per-pixel depth with a validity mask. Invalid entries store 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height], valid: vec![false; width * height] }
    }

    /// Entries that are non-positive or non-finite become invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!("{} depth values for {width}x{height}", values.len())));
        }
        let valid: Vec<bool> = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        let values = values.into_iter().zip(&valid).map(|(v, &ok)| if ok { v } else { 0.0 }).collect();
        Ok(Self { width, height, values, valid })
    }

    /// Values with an explicit mask. Masked-in entries must be positive and
    /// finite.
    pub fn with_mask(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!("depth buffers do not match {width}x{height}")));
        }
        let mut out = Self { width, height, values, valid };
        for i in 0..out.values.len() {
            if out.valid[i] {
                if !(out.values[i].is_finite() && out.values[i] > 0.0) {
                    return Err(Error::InvalidInput(format!("valid depth entry {} is {}", i, out.values[i])));
                }
            } else {
                out.values[i] = 0.0;
            }
        }
        Ok(out)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Depth at the pixel containing continuous coordinate `px`.
    pub fn sample_nearest(&self, px: &Vector2<f64>) -> Option<f32> {
        if px.x < 0.0 || px.y < 0.0 {
            return None;
        }
        let (x, y) = (px.x.floor() as usize, px.y.floor() as usize);
        if x >= self.width || y >= self.height {
            return None;
        }
        self.get(x, y)
    }

    /// Drop validity wherever `keep` is false.
    pub fn masked(&self, keep: &[bool]) -> DepthMap {
        let mut out = self.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.valid[i] = false;
                out.values[i] = 0.0;
            }
        }
        out
    }

    /// Whether every valid entry is positive and finite.
    pub fn check_invariants(&self) -> bool {
        self.values.len() == self.width * self.height
            && self.valid.len() == self.values.len()
            && self
                .values
                .iter()
                .zip(&self.valid)
                .all(|(v, &ok)| if ok { v.is_finite() && *v > 0.0 } else { *v == 0.0 })
    }
}

/// World-frame points with optional per-point features (`[N, C]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeaturePointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub features: Option<Tensor>,
}

impl FeaturePointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        Self { positions, features: None }
    }

    pub fn with_features(positions: Vec<Vector3<f64>>, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != positions.len() {
            return Err(Error::Shape(format!(
                "{} points but features of shape {:?}",
                positions.len(),
                features.shape()
            )));
        }
        Ok(Self { positions, features: Some(features) })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn check_invariants(&self) -> bool {
        self.positions.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.features.as_ref().is_none_or(|f| f.rank() == 2 && f.dim(0) == self.positions.len())
    }

    /// Positions as an `[N, 3]` tensor.
    pub fn positions_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.len(), 3],
            self.positions.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        )
    }

    pub fn from_positions_tensor(t: &Tensor) -> Self {
        let n = t.dim(0);
        Self::new((0..n).map(|i| {
            let r = t.row(i);
            Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64)
        }).collect())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.is_empty() {
            return Vector3::zeros();
        }
        self.positions.iter().sum::<Vector3<f64>>() / self.len() as f64
    }

    /// Axis-aligned bounds `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }
}

/// Result of [`project`].
#[derive(Clone, Debug)]
pub struct Projection {
    pub pixels: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
}

impl Projection {
    /// Whether point `i` lies in front of the near plane.
    pub fn in_front(&self, i: usize) -> bool {
        self.depths[i] > NEAR_PLANE
    }
}

/// Project every point. Points behind the camera keep their (negative)
/// depth; callers filter with [`Projection::in_front`].
pub fn project(points: &FeaturePointCloud, cam: &CameraModel) -> Projection {
    let (pixels, depths) = points.positions.iter().map(|p| cam.project_point(p)).unzip();
    Projection { pixels, depths }
}

/// One world point per valid pixel center, visiting every `stride`-th row
/// and column.
pub fn unproject(depth: &DepthMap, cam: &CameraModel, stride: usize) -> FeaturePointCloud {
    FeaturePointCloud::new(unproject_with_pixels(depth, cam, stride).into_iter().map(|(_, p)| p).collect())
}

/// Like [`unproject`], also returning the flat pixel index of each point.
pub fn unproject_with_pixels(depth: &DepthMap, cam: &CameraModel, stride: usize) -> Vec<(usize, Vector3<f64>)> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..depth.height()).step_by(stride) {
        for x in (0..depth.width()).step_by(stride) {
            if let Some(z) = depth.get(x, y) {
                out.push((y * depth.width() + x, cam.unproject_pixel(x as f64 + 0.5, y as f64 + 0.5, z as f64)));
            }
        }
    }
    out
}

/// Z-buffered disk splat: every point in front of the camera covers the
/// pixels whose centers lie within `radius_px` of its projection.
pub fn splat_template_depth(points: &FeaturePointCloud, cam: &CameraModel, radius_px: f64) -> Result<DepthMap> {
    if points.is_empty() {
        return Err(Error::EmptyTemplate);
    }
    if !(radius_px > 0.0) {
        return Err(Error::InvalidInput(format!("splat radius {radius_px} must be positive")));
    }
    let (w, h) = (cam.width(), cam.height());
    let mut zbuf = vec![f32::INFINITY; w * h];
    let r2 = radius_px * radius_px;
    for p in &points.positions {
        let (px, z) = cam.project_point(p);
        if !(z > NEAR_PLANE) || !px.x.is_finite() || !px.y.is_finite() {
            continue;
        }
        let x0 = (px.x - radius_px - 0.5).ceil().max(0.0);
        let x1 = (px.x + radius_px - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (px.y - radius_px - 0.5).ceil().max(0.0);
        let y1 = (px.y + radius_px - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let dx = x as f64 + 0.5 - px.x;
                let dy = y as f64 + 0.5 - px.y;
                if dx * dx + dy * dy <= r2 {
                    let slot = &mut zbuf[y * w + x];
                    *slot = slot.min(z as f32);
                }
            }
        }
    }
    let valid: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();
    let values = zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect();
    DepthMap::with_mask(w, h, values, valid)
}

/// Normalized per-view, per-point visibility weights (`[M, N]`, row-major by
/// view).
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityWeights {
    pub views: usize,
    pub points: usize,
    pub weights: Vec<f64>,
}

impl VisibilityWeights {
    #[inline]
    pub fn get(&self, view: usize, point: usize) -> f64 {
        self.weights[view * self.points + point]
    }

    /// Weights of one view as an `[N, 1]` tensor.
    pub fn view_column(&self, view: usize) -> Tensor {
        Tensor::new(
            &[self.points, 1],
            self.weights[view * self.points..(view + 1) * self.points].iter().map(|&w| w as f32).collect(),
        )
    }

    pub fn check_invariants(&self, tol: f64) -> bool {
        (0..self.points).all(|i| {
            let col: Vec<f64> = (0..self.views).map(|m| self.get(m, i)).collect();
            col.iter().all(|w| (0.0..=1.0 + tol).contains(w)) && (col.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Default depth-consistency bandwidth (meters).
pub const DEFAULT_VISIBILITY_TAU: f64 = 0.02;

/// Gaussian depth-consistency test against each view's depth map:
/// `exp(-(z - D(u))^2 / (2 tau^2))` when the point projects inside the image
/// onto a valid depth pixel in front of the near plane, else 0; normalized
/// over views, with a uniform fallback for points no view sees.
pub fn visibility_weights(
    points: &FeaturePointCloud,
    cams: &[CameraModel],
    view_depths: &[DepthMap],
    tau: f64,
) -> Result<VisibilityWeights> {
    if cams.len() != view_depths.len() {
        return Err(Error::Shape(format!("{} cameras but {} depth maps", cams.len(), view_depths.len())));
    }
    if cams.is_empty() {
        return Err(Error::InvalidInput("visibility needs at least one view".into()));
    }
    let (m, n) = (cams.len(), points.len());
    let mut weights = vec![0.0f64; m * n];
    for (v, (cam, depth)) in cams.iter().zip(view_depths).enumerate() {
        for (i, p) in points.positions.iter().enumerate() {
            let (px, z) = cam.project_point(p);
            if !(z > NEAR_PLANE) || !cam.contains_pixel(&px) {
                continue;
            }
            if let Some(d) = depth.sample_nearest(&px) {
                let r = z - d as f64;
                weights[v * n + i] = (-r * r / (2.0 * tau * tau)).exp();
            }
        }
    }
    for i in 0..n {
        let total: f64 = (0..m).map(|v| weights[v * n + i]).sum();
        for v in 0..m {
            let w = &mut weights[v * n + i];
            *w = if total > 0.0 { *w / total } else { 1.0 / m as f64 };
        }
    }
    Ok(VisibilityWeights { views: m, points: n, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam(w: usize, h: usize, c: f64) -> CameraModel {
        CameraModel::pinhole(100.0, 100.0, c, c, Matrix3::identity(), Vector3::zeros(), w, h).unwrap()
    }

    #[test]
    fn principal_point_projection() {
        let (px, z) = cam(64, 64, 32.0).project_point(&Vector3::new(0.0, 0.0, 2.0));
        assert_eq!((px.x, px.y, z), (32.0, 32.0, 2.0));
    }

    #[test]
    fn off_axis_projection() {
        let (px, _) = cam(64, 64, 32.0).project_point(&Vector3::new(0.1, 0.0, 1.0));
        assert_relative_eq!(px.x, 42.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged_not_dropped() {
        let pts = FeaturePointCloud::new(vec![Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, 1.0)]);
        let proj = project(&pts, &cam(8, 8, 4.0));
        assert_eq!(proj.pixels.len(), 2);
        assert!(!proj.in_front(0));
        assert!(proj.in_front(1));
        assert!(proj.depths[0] < 0.0);
    }

    #[test]
    fn rejects_bad_cameras() {
        let k = Matrix3::new(100.0, 0.0, 4.0, 1.0, 100.0, 4.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(k, Matrix4::identity(), 8, 8).is_err());
        let k = Matrix3::new(-1.0, 0.0, 4.0, 0.0, 100.0, 4.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(k, Matrix4::identity(), 8, 8).is_err());
        let mut e = Matrix4::identity();
        e[(0, 0)] = -1.0;
        let k = Matrix3::new(100.0, 0.0, 4.0, 0.0, 100.0, 4.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(k, e, 8, 8).is_err(), "reflection must be rejected");
    }

    #[test]
    fn unproject_all_invalid_is_empty() {
        assert!(unproject(&DepthMap::invalid(8, 8), &cam(8, 8, 4.0), 1).is_empty());
    }

    #[test]
    fn unproject_principal_pixel() {
        let c = cam(5, 5, 2.5);
        let mut vals = vec![0.0; 25];
        vals[2 * 5 + 2] = 3.0;
        let d = DepthMap::from_values(5, 5, vals).unwrap();
        let pts = unproject(&d, &c, 1);
        assert_eq!(pts.len(), 1);
        assert_relative_eq!(pts.positions[0], Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn unproject_stride_subsamples() {
        let d = DepthMap::from_values(6, 6, vec![1.0; 36]).unwrap();
        assert_eq!(unproject(&d, &cam(6, 6, 3.0), 2).len(), 9);
    }

    #[test]
    fn splat_single_point_covers_3x3() {
        let c = cam(64, 64, 32.5);
        let pts = FeaturePointCloud::new(vec![Vector3::new(0.0, 0.0, 2.0)]);
        let d = splat_template_depth(&pts, &c, 1.5).unwrap();
        assert_eq!(d.valid_count(), 9);
        for y in 31..=33 {
            for x in 31..=33 {
                assert_eq!(d.get(x, y), Some(2.0));
            }
        }
    }

    #[test]
    fn splat_z_buffer_keeps_nearest() {
        let c = cam(64, 64, 32.5);
        let pts = FeaturePointCloud::new(vec![Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.0, 0.0, 1.0)]);
        let d = splat_template_depth(&pts, &c, 1.5).unwrap();
        assert_eq!(d.get(32, 32), Some(1.0));
        assert_eq!(d.get(31, 33), Some(1.0));
    }

    #[test]
    fn splat_empty_template_errors() {
        let err = splat_template_depth(&FeaturePointCloud::default(), &cam(8, 8, 4.0), 2.0).unwrap_err();
        assert_eq!(err.to_string(), "empty template");
    }

    #[test]
    fn visibility_single_view_sees_point() {
        let c0 = cam(16, 16, 8.0);
        // Second camera looks away from the point.
        let away = CameraModel::pinhole(
            100.0,
            100.0,
            8.0,
            8.0,
            Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0)),
            Vector3::zeros(),
            16,
            16,
        )
        .unwrap();
        let pts = FeaturePointCloud::new(vec![Vector3::new(0.0, 0.0, 2.0)]);
        let depths = vec![DepthMap::from_values(16, 16, vec![2.0; 256]).unwrap(), DepthMap::from_values(16, 16, vec![2.0; 256]).unwrap()];
        let w = visibility_weights(&pts, &[c0, away], &depths, DEFAULT_VISIBILITY_TAU).unwrap();
        assert_relative_eq!(w.get(0, 0), 1.0);
        assert_relative_eq!(w.get(1, 0), 0.0);
    }

    #[test]
    fn visibility_uniform_fallback_and_mismatch() {
        let c = cam(8, 8, 4.0);
        let pts = FeaturePointCloud::new(vec![Vector3::new(0.0, 0.0, -2.0)]);
        let d = DepthMap::invalid(8, 8);
        let w = visibility_weights(&pts, &[c.clone(), c.clone(), c.clone()], &[d.clone(), d.clone(), d.clone()], 0.02).unwrap();
        for v in 0..3 {
            assert_relative_eq!(w.get(v, 0), 1.0 / 3.0);
        }
        assert!(visibility_weights(&pts, &[c.clone(), c], &[d], 0.02).is_err());
    }
}
