//! Differentiable 3D Gaussian splatting on the CPU.
//!
//! Every Gaussian is projected through the local perspective Jacobian (EWA
//! splatting), sorted globally by camera depth and composited front to back
//! per pixel. The forward pass records each (Gaussian, pixel) contribution so
//! the backward pass can walk them in reverse without dividing by
//! `1 - alpha`; fully opaque splats are therefore differentiable too.
//!
//! Arithmetic is `f64` throughout so finite differences can check it tightly.

use std::rc::Rc;

use gradtape::{Graph, Tensor, Var};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, NEAR_PLANE};
use crate::imagebuf::Image;

/// Rotation matrix of a (not necessarily unit) quaternion `[w, x, y, z]`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(s)^2 R^T` for a unit quaternion rotation and positive scales.
pub fn build_covariance(rotation: &[f64; 4], scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidInput(format!("scales must be positive, got {scale:?}")));
    }
    let qn = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(qn > 0.0) || !qn.is_finite() {
        return Err(Error::InvalidInput("zero or non-finite quaternion".into()));
    }
    let m = quat_to_rotation(rotation) * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Attribute bundle of `N` Gaussians.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vector3<f64>>,
    /// Quaternions `[w, x, y, z]`.
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector3<f64>, rotation: [f64; 4], scale: Vector3<f64>, opacity: f64, color: Vector3<f64>) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.scales.push(scale);
        self.opacities.push(opacity);
        self.colors.push(color);
    }

    fn lengths_agree(&self) -> bool {
        let n = self.len();
        self.rotations.len() == n && self.scales.len() == n && self.opacities.len() == n && self.colors.len() == n
    }

    /// Checks unit quaternions (1e-5), positive scales, opacities and colors in
    /// `[0, 1]` and finite positions.
    pub fn validate(&self) -> Result<()> {
        if !self.lengths_agree() {
            return Err(Error::Shape("gaussian attribute arrays differ in length".into()));
        }
        for i in 0..self.len() {
            let q = &self.rotations[i];
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!("gaussian {i}: quaternion norm {qn}")));
            }
            if !self.scales[i].iter().all(|&s| s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!("gaussian {i}: non-positive scale")));
            }
            if !(0.0..=1.0).contains(&self.opacities[i]) {
                return Err(Error::InvalidInput(format!("gaussian {i}: opacity {}", self.opacities[i])));
            }
            if !self.colors[i].iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidInput(format!("gaussian {i}: color out of range")));
            }
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("gaussian {i}: non-finite position")));
            }
        }
        Ok(())
    }

    /// The same set with every position moved by `offset`.
    pub fn translated(&self, offset: &Vector3<f64>) -> GaussianSet {
        GaussianSet { positions: self.positions.iter().map(|p| p + offset).collect(), ..self.clone() }
    }
}

/// Renderer constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    /// Added to the diagonal of every projected 2D covariance (pixels^2).
    pub low_pass: f64,
    /// Screen-space half extent of a splat, in standard deviations.
    pub extent_sigmas: f64,
    /// Pixels with alpha at or below this are invalid in the depth output.
    pub alpha_threshold: f64,
    /// Floor on alpha when normalizing expected depth.
    pub depth_eps: f64,
    /// Deliberately corrupt the scale gradient. Only used as a negative
    /// control for the gradient checker.
    pub inject_gradient_fault: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { low_pass: 0.3, extent_sigmas: 3.0, alpha_threshold: 0.2, depth_eps: 1e-8, inject_gradient_fault: false }
    }
}

/// Rendered color, alpha and expected depth (planar, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]`.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha_threshold: f64,
}

impl RenderOutput {
    pub fn validity(&self) -> Vec<bool> {
        self.alpha.iter().map(|&a| a > self.alpha_threshold).collect()
    }

    pub fn color_image(&self) -> Image {
        Image { channels: 3, height: self.height, width: self.width, data: self.color.iter().map(|&v| v as f32).collect() }
    }

    pub fn alpha_image(&self) -> Image {
        Image { channels: 1, height: self.height, width: self.width, data: self.alpha.iter().map(|&v| v as f32).collect() }
    }

    /// Expected depth restricted to valid pixels.
    pub fn depth_map(&self) -> DepthMap {
        let valid: Vec<bool> = self
            .alpha
            .iter()
            .zip(&self.depth)
            .map(|(&a, &d)| a > self.alpha_threshold && d > 0.0 && d.is_finite())
            .collect();
        let values = self.depth.iter().map(|&d| d as f32).collect();
        DepthMap::with_mask(self.width, self.height, values, valid).expect("validity mask built from the values")
    }
}

/// Upstream gradients of a scalar loss with respect to a [`RenderOutput`].
#[derive(Clone, Debug)]
pub struct RenderGrads {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { color: vec![0.0; 3 * n], alpha: vec![0.0; n], depth: vec![0.0; n] }
    }
}

/// Gradients with respect to every Gaussian attribute. Quaternion gradients
/// are taken with respect to the raw (unnormalized) quaternion.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl GaussianGrads {
    fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
        }
    }

    /// Flattened in attribute order: positions, rotations, scales,
    /// opacities, colors.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.positions.iter().flat_map(|v| v.iter().copied()));
        out.extend(self.rotations.iter().flat_map(|q| q.iter().copied()));
        out.extend(self.scales.iter().flat_map(|v| v.iter().copied()));
        out.extend(self.opacities.iter().copied());
        out.extend(self.colors.iter().flat_map(|v| v.iter().copied()));
        out
    }
}

/// Per-Gaussian screen-space quantities.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    cam_point: Vector3<f64>,
    mean: Vector2<f64>,
    /// Inverse of the dilated 2D covariance.
    conic: Matrix2<f64>,
    rotation: Matrix3<f64>,
    covariance: Matrix3<f64>,
    /// `J W`.
    jw: Matrix2x3,
}

type Matrix2x3 = nalgebra::Matrix2x3<f64>;

#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: u32,
    pixel: u32,
    alpha: f64,
    transmittance: f64,
    gauss: f64,
}

/// Saved forward state for [`backward`].
pub struct RenderState {
    splats: Vec<Splat>,
    contributions: Vec<Contribution>,
    output: RenderOutput,
    config: RasterConfig,
}

impl RenderState {
    pub fn output(&self) -> &RenderOutput {
        &self.output
    }

    /// Number of (Gaussian, pixel) pairs that were blended.
    pub fn contribution_count(&self) -> usize {
        self.contributions.len()
    }

    /// Blended pixel count per Gaussian, in input order. Changes in this
    /// signature mark discontinuities of the renderer.
    pub fn footprint_signature(&self, n: usize) -> Vec<u32> {
        let mut sig = vec![0u32; n];
        for c in &self.contributions {
            sig[self.splats[c.splat as usize].index] += 1;
        }
        sig
    }
}

fn jacobian(cam: &CameraModel, t: &Vector3<f64>) -> Matrix2x3 {
    let (fx, fy, sk) = (cam.fx(), cam.fy(), cam.skew());
    let (x, y, z) = (t.x, t.y, t.z);
    let z2 = z * z;
    Matrix2x3::new(fx / z, sk / z, -(fx * x + sk * y) / z2, 0.0, fy / z, -fy * y / z2)
}

/// Render with default settings after validating the set.
pub fn rasterize(g: &GaussianSet, cam: &CameraModel) -> Result<RenderOutput> {
    g.validate()?;
    Ok(rasterize_with_state(g, cam, &RasterConfig::default())?.output)
}

/// Forward pass keeping what [`backward`] needs. Does not validate attribute
/// ranges (quaternions are normalized internally); only requires a nonempty
/// set with consistent array lengths.
pub fn rasterize_with_state(g: &GaussianSet, cam: &CameraModel, config: &RasterConfig) -> Result<RenderState> {
    if g.is_empty() {
        return Err(Error::NoGaussians);
    }
    if !g.lengths_agree() {
        return Err(Error::Shape("gaussian attribute arrays differ in length".into()));
    }
    let (w, h) = (cam.width(), cam.height());
    let rot_w = cam.rotation();
    let mut splats = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let t = cam.to_camera(&g.positions[i]);
        if !(t.z > NEAR_PLANE) {
            continue;
        }
        let rotation = quat_to_rotation(&g.rotations[i]);
        let m = rotation * Matrix3::from_diagonal(&g.scales[i]);
        let covariance = m * m.transpose();
        let jw = jacobian(cam, &t) * rot_w;
        let mut cov2 = jw * covariance * jw.transpose();
        cov2[(0, 0)] += config.low_pass;
        cov2[(1, 1)] += config.low_pass;
        let Some(conic) = cov2.try_inverse() else { continue };
        let (mean, _) = cam.project_point(&g.positions[i]);
        if !mean.x.is_finite() || !mean.y.is_finite() || !conic.iter().all(|v| v.is_finite()) {
            continue;
        }
        splats.push(Splat { index: i, cam_point: t, mean, conic, rotation, covariance, jw });
    }
    splats.sort_by(|a, b| a.cam_point.z.total_cmp(&b.cam_point.z).then(a.index.cmp(&b.index)));

    let npix = w * h;
    let mut trans = vec![1.0f64; npix];
    let mut color = vec![0.0f64; 3 * npix];
    let mut depth_num = vec![0.0f64; npix];
    let mut contributions = Vec::new();
    for (si, s) in splats.iter().enumerate() {
        let cov2 = s.conic.try_inverse().unwrap_or(Matrix2::identity());
        let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
        let det = cov2.determinant();
        let lambda = mid + (mid * mid - det).max(0.1).sqrt();
        let radius = (config.extent_sigmas * lambda.sqrt()).ceil();
        let x0 = (s.mean.x - radius - 0.5).ceil().max(0.0);
        let x1 = (s.mean.x + radius - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (s.mean.y - radius - 0.5).ceil().max(0.0);
        let y1 = (s.mean.y + radius - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let i = s.index;
        let (a, b, c) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
        let op = g.opacities[i];
        let col = g.colors[i];
        for py in y0 as usize..=y1 as usize {
            for px in x0 as usize..=x1 as usize {
                let dx = px as f64 + 0.5 - s.mean.x;
                let dy = py as f64 + 0.5 - s.mean.y;
                let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
                let gauss = power.min(0.0).exp();
                let alpha = op * gauss;
                let p = py * w + px;
                let t = trans[p];
                let wgt = alpha * t;
                color[p] += col.x * wgt;
                color[npix + p] += col.y * wgt;
                color[2 * npix + p] += col.z * wgt;
                depth_num[p] += s.cam_point.z * wgt;
                contributions.push(Contribution { splat: si as u32, pixel: p as u32, alpha, transmittance: t, gauss });
                trans[p] = t * (1.0 - alpha);
            }
        }
    }
    let alpha: Vec<f64> = trans.iter().map(|t| 1.0 - t).collect();
    let depth = depth_num.iter().zip(&alpha).map(|(n, a)| n / a.max(config.depth_eps)).collect();
    Ok(RenderState {
        splats,
        contributions,
        output: RenderOutput { width: w, height: h, color, alpha, depth, alpha_threshold: config.alpha_threshold },
        config: *config,
    })
}

/// Gradients of a scalar loss with respect to the Gaussian attributes, given
/// its gradient with respect to the rendered images.
pub fn backward(state: &RenderState, g: &GaussianSet, cam: &CameraModel, up: &RenderGrads) -> GaussianGrads {
    let out = &state.output;
    let npix = out.width * out.height;
    let eps = state.config.depth_eps;
    // Depth = N / max(A, eps): fold its gradient into per-pixel gradients on
    // the depth numerator and on alpha.
    let mut d_num = vec![0.0f64; npix];
    let mut d_alpha = up.alpha.clone();
    for p in 0..npix {
        let a = out.alpha[p];
        if a > eps {
            d_num[p] = up.depth[p] / a;
            d_alpha[p] -= up.depth[p] * out.depth[p] / a;
        } else {
            d_num[p] = up.depth[p] / eps;
        }
    }

    let ns = state.splats.len();
    let mut d_mean = vec![Vector2::<f64>::zeros(); ns];
    let mut d_conic = vec![[0.0f64; 3]; ns];
    let mut d_depth = vec![0.0f64; ns];
    let mut grads = GaussianGrads::zeros(g.len());
    // Weighted sum of everything composited behind the current splat.
    let mut behind = vec![0.0f64; npix];
    for c in state.contributions.iter().rev() {
        let s = &state.splats[c.splat as usize];
        let i = s.index;
        let p = c.pixel as usize;
        let col = g.colors[i];
        let z = s.cam_point.z;
        let shade = up.color[p] * col.x + up.color[npix + p] * col.y + up.color[2 * npix + p] * col.z + d_alpha[p] + d_num[p] * z;
        let wgt = c.alpha * c.transmittance;
        grads.colors[i] += Vector3::new(up.color[p], up.color[npix + p], up.color[2 * npix + p]) * wgt;
        d_depth[c.splat as usize] += d_num[p] * wgt;
        let da = c.transmittance * (shade - behind[p]);
        behind[p] = shade * c.alpha + (1.0 - c.alpha) * behind[p];

        grads.opacities[i] += da * c.gauss;
        let dpower = da * g.opacities[i] * c.gauss;
        let dx = (p % out.width) as f64 + 0.5 - s.mean.x;
        let dy = (p / out.width) as f64 + 0.5 - s.mean.y;
        let (ca, cb, cc) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
        d_mean[c.splat as usize] += Vector2::new(ca * dx + cb * dy, cb * dx + cc * dy) * dpower;
        let dc = &mut d_conic[c.splat as usize];
        dc[0] += -0.5 * dx * dx * dpower;
        dc[1] += -dx * dy * dpower;
        dc[2] += -0.5 * dy * dy * dpower;
    }

    let rot_w = cam.rotation();
    let (fx, fy, sk) = (cam.fx(), cam.fy(), cam.skew());
    for (si, s) in state.splats.iter().enumerate() {
        let i = s.index;
        // Conic = inverse(cov2): dL/dcov2 = -Q G Q with G the symmetric
        // gradient on Q.
        let gq = Matrix2::new(d_conic[si][0], 0.5 * d_conic[si][1], 0.5 * d_conic[si][1], d_conic[si][2]);
        let g_cov2 = -(s.conic * gq * s.conic);
        let g_cov3 = s.jw.transpose() * g_cov2 * s.jw;
        let g_jw = 2.0 * g_cov2 * s.jw * s.covariance;
        let g_j = g_jw * rot_w.transpose();

        let t = s.cam_point;
        let (x, y, z) = (t.x, t.y, t.z);
        let (z2, z3) = (z * z, z * z * z);
        let mut g_t = Vector3::zeros();
        // Projection u = (fx x + sk y)/z + cx, v = fy y/z + cy.
        let dm = d_mean[si];
        g_t.x += dm.x * fx / z;
        g_t.y += dm.x * sk / z + dm.y * fy / z;
        g_t.z += -dm.x * (fx * x + sk * y) / z2 - dm.y * fy * y / z2;
        g_t.z += d_depth[si];
        // Jacobian entries.
        g_t.z += g_j[(0, 0)] * (-fx / z2) + g_j[(0, 1)] * (-sk / z2) + g_j[(1, 1)] * (-fy / z2);
        g_t.x += g_j[(0, 2)] * (-fx / z2);
        g_t.y += g_j[(0, 2)] * (-sk / z2) + g_j[(1, 2)] * (-fy / z2);
        g_t.z += g_j[(0, 2)] * (2.0 * (fx * x + sk * y) / z3) + g_j[(1, 2)] * (2.0 * fy * y / z3);
        grads.positions[i] += rot_w.transpose() * g_t;

        // Covariance = M M^T with M = R S.
        let g_sym = 0.5 * (g_cov3 + g_cov3.transpose());
        let sc = g.scales[i];
        let m = s.rotation * Matrix3::from_diagonal(&sc);
        let g_m = 2.0 * g_sym * m;
        let mut g_s = Vector3::zeros();
        for j in 0..3 {
            g_s[j] = (0..3).map(|r| s.rotation[(r, j)] * g_m[(r, j)]).sum();
        }
        if state.config.inject_gradient_fault {
            g_s *= 1.5;
        }
        grads.scales[i] += g_s;
        let g_r = g_m * Matrix3::from_diagonal(&sc);
        grads.rotations[i] = quat_grad(&g.rotations[i], &g_r);
    }
    grads
}

/// Gradient with respect to a raw quaternion given the gradient on the
/// rotation matrix built from its normalization.
fn quat_grad(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)] + w * g[(2, 1)] - 2.0 * x * g[(2, 2)]);
    let gy = 2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)] + z * g[(2, 1)] - 2.0 * y * g[(2, 2)]);
    let gz = 2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)] + x * g[(2, 0)] + y * g[(2, 1)]);
    let gn = [gw, gx, gy, gz];
    let qn = [w, x, y, z];
    let dot: f64 = gn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (gn[k] - qn[k] * dot) / n)
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradientCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// Worst error per attribute: positions, rotations, scales, opacities,
    /// colors.
    pub per_attribute: [f64; 5],
    pub checked: usize,
    /// Components skipped because every step size straddled a splat
    /// footprint boundary.
    pub skipped: usize,
}

/// Fixed pseudo-random weights defining the scalar test loss
/// `sum(w_c * color) + sum(w_a * alpha) + sum(w_d * depth)`.
pub fn probe_weights(width: usize, height: usize, scale: f64) -> RenderGrads {
    let n = width * height;
    let hash = |k: usize| {
        let v = (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ 0xA5A5_5A5A;
        ((v % 2001) as f64 / 1000.0 - 1.0) * scale
    };
    RenderGrads {
        color: (0..3 * n).map(hash).collect(),
        alpha: (0..n).map(|k| hash(k + 3 * n)).collect(),
        depth: (0..n).map(|k| 0.1 * hash(k + 4 * n)).collect(),
    }
}

fn probe_loss(out: &RenderOutput, w: &RenderGrads) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.color, &w.color) + dot(&out.alpha, &w.alpha) + dot(&out.depth, &w.depth)
}

fn attribute_slot(g: &mut GaussianSet, k: usize) -> (usize, &mut f64) {
    let n = g.len();
    let mut k = k;
    if k < 3 * n {
        return (0, &mut g.positions[k / 3][k % 3]);
    }
    k -= 3 * n;
    if k < 4 * n {
        return (1, &mut g.rotations[k / 4][k % 4]);
    }
    k -= 4 * n;
    if k < 3 * n {
        return (2, &mut g.scales[k / 3][k % 3]);
    }
    k -= 3 * n;
    if k < n {
        return (3, &mut g.opacities[k]);
    }
    k -= n;
    (4, &mut g.colors[k / 3][k % 3])
}

/// Compare analytic gradients of a weighted image loss against central
/// finite differences for every attribute of every Gaussian.
pub fn gradient_check(g: &GaussianSet, cam: &CameraModel, eps: f64) -> Result<GradientCheckReport> {
    gradient_check_with(g, cam, eps, &probe_weights(cam.width(), cam.height(), 1.0), &RasterConfig::default())
}

pub fn gradient_check_with(
    g: &GaussianSet,
    cam: &CameraModel,
    eps: f64,
    weights: &RenderGrads,
    config: &RasterConfig,
) -> Result<GradientCheckReport> {
    let state = rasterize_with_state(g, cam, config)?;
    let analytic = backward(&state, g, cam, weights).flatten();
    let sig = state.footprint_signature(g.len());
    let mut report = GradientCheckReport { max_rel_error: 0.0, per_attribute: [0.0; 5], checked: 0, skipped: 0 };
    for k in 0..analytic.len() {
        let mut numeric = None;
        let mut attr = 0;
        let mut step = eps;
        for _ in 0..4 {
            let mut plus = g.clone();
            let (a, slot) = attribute_slot(&mut plus, k);
            attr = a;
            *slot += step;
            let mut minus = g.clone();
            *attribute_slot(&mut minus, k).1 -= step;
            let sp = rasterize_with_state(&plus, cam, config)?;
            let sm = rasterize_with_state(&minus, cam, config)?;
            if sp.footprint_signature(g.len()) == sig && sm.footprint_signature(g.len()) == sig {
                numeric = Some((probe_loss(&sp.output, weights) - probe_loss(&sm.output, weights)) / (2.0 * step));
                break;
            }
            step *= 0.1;
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.per_attribute[attr] = report.per_attribute[attr].max(err);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// Gaussian attributes recorded on a tape: positions `[N, 3]`, quaternions
/// `[N, 4]`, scales `[N, 3]`, opacities `[N, 1]`, colors `[N, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub positions: Var,
    pub rotations: Var,
    pub scales: Var,
    pub opacities: Var,
    pub colors: Var,
}

impl GaussianVars {
    fn all(&self) -> [Var; 5] {
        [self.positions, self.rotations, self.scales, self.opacities, self.colors]
    }

    /// Current values as an `f64` set (quaternions left unnormalized).
    pub fn to_set(&self, g: &Graph) -> GaussianSet {
        set_from_tensors(&self.all().map(|v| g.value(v)))
    }
}

fn set_from_tensors(t: &[Rc<Tensor>; 5]) -> GaussianSet {
    let n = t[0].dim(0);
    let v3 = |k: usize, i: usize| {
        let r = t[k].row(i);
        Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64)
    };
    GaussianSet {
        positions: (0..n).map(|i| v3(0, i)).collect(),
        rotations: (0..n).map(|i| std::array::from_fn(|k| t[1].row(i)[k] as f64)).collect(),
        scales: (0..n).map(|i| v3(2, i)).collect(),
        opacities: (0..n).map(|i| t[3].data()[i] as f64).collect(),
        colors: (0..n).map(|i| v3(4, i)).collect(),
    }
}

/// Tensors `[N,3] [N,4] [N,3] [N,1] [N,3]` holding a set.
pub fn set_to_tensors(g: &GaussianSet) -> [Tensor; 5] {
    let n = g.len();
    let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|x| x.iter().map(|&c| c as f32)).collect::<Vec<_>>();
    [
        Tensor::new(&[n, 3], flat3(&g.positions)),
        Tensor::new(&[n, 4], g.rotations.iter().flat_map(|q| q.map(|c| c as f32)).collect()),
        Tensor::new(&[n, 3], flat3(&g.scales)),
        Tensor::new(&[n, 1], g.opacities.iter().map(|&o| o as f32).collect()),
        Tensor::new(&[n, 3], flat3(&g.colors)),
    ]
}

/// Differentiable render outputs on a tape.
pub struct RenderedVars {
    /// `[3, H, W]`.
    pub color: Var,
    /// `[1, H, W]`.
    pub alpha: Var,
    /// `[1, H, W]` expected depth.
    pub depth: Var,
    /// The same render in `f64`.
    pub output: RenderOutput,
}

/// Render Gaussians held on a tape; gradients flow back to all five
/// attribute tensors.
pub fn render_vars(g: &Graph, vars: &GaussianVars, cam: &CameraModel, config: &RasterConfig) -> Result<RenderedVars> {
    let inputs = vars.all();
    let set = set_from_tensors(&inputs.map(|v| g.value(v)));
    for k in 0..5 {
        if g.shape(inputs[k])[0] != set.len() {
            return Err(Error::Shape("gaussian attribute tensors differ in length".into()));
        }
    }
    let state = rasterize_with_state(&set, cam, config)?;
    let out = state.output().clone();
    let (h, w) = (out.height, out.width);
    let npix = h * w;
    let mut packed = Vec::with_capacity(5 * npix);
    packed.extend(out.color.iter().chain(&out.alpha).chain(&out.depth).map(|&v| v as f32));
    let cam = cam.clone();
    let node = g.custom(
        &inputs,
        Tensor::new(&[5, h, w], packed),
        Box::new(move |ctx| {
            let d = ctx.grad.data();
            let up = RenderGrads {
                color: d[..3 * npix].iter().map(|&v| v as f64).collect(),
                alpha: d[3 * npix..4 * npix].iter().map(|&v| v as f64).collect(),
                depth: d[4 * npix..].iter().map(|&v| v as f64).collect(),
            };
            let gg = backward(&state, &set, &cam, &up);
            let n = set.len();
            let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|x| x.iter().map(|&c| c as f32)).collect::<Vec<_>>();
            vec![
                Some(Tensor::new(&[n, 3], flat3(&gg.positions))),
                Some(Tensor::new(&[n, 4], gg.rotations.iter().flat_map(|q| q.map(|c| c as f32)).collect())),
                Some(Tensor::new(&[n, 3], flat3(&gg.scales))),
                Some(Tensor::new(&[n, 1], gg.opacities.iter().map(|&o| o as f32).collect())),
                Some(Tensor::new(&[n, 3], flat3(&gg.colors))),
            ]
        }),
    );
    Ok(RenderedVars { color: g.slice(node, 0, 0, 3), alpha: g.slice(node, 0, 3, 1), depth: g.slice(node, 0, 4, 1), output: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam16() -> CameraModel {
        CameraModel::pinhole(16.0, 16.0, 8.0, 8.0, Matrix3::identity(), Vector3::zeros(), 16, 16).unwrap()
    }

    #[test]
    fn covariance_identity_rotation() {
        let s = build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_relative_eq!(s, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = build_covariance(&[h, 0.0, 0.0, h], &Vector3::new(1.0, 2.0, 1.0)).unwrap();
        assert_relative_eq!(s, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_non_positive_scale() {
        assert!(build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn empty_set_errors() {
        let err = rasterize(&GaussianSet::default(), &cam16()).unwrap_err();
        assert_eq!(err.to_string(), "no gaussians");
    }

    #[test]
    fn zero_opacity_renders_nothing() {
        let mut g = GaussianSet::default();
        g.push(Vector3::new(0.0, 0.0, 2.0), [1.0, 0.0, 0.0, 0.0], Vector3::new(0.1, 0.1, 0.1), 0.0, Vector3::new(1.0, 1.0, 1.0));
        let out = rasterize(&g, &cam16()).unwrap();
        assert!(out.color.iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compositing_order_follows_depth() {
        let red = Vector3::new(1.0, 0.0, 0.0);
        let blue = Vector3::new(0.0, 0.0, 1.0);
        let s = Vector3::new(0.5, 0.5, 0.5);
        let id = [1.0, 0.0, 0.0, 0.0];
        let mut g = GaussianSet::default();
        g.push(Vector3::new(0.0, 0.0, 2.0), id, s, 1.0, red);
        g.push(Vector3::new(0.0, 0.0, 3.0), id, s, 1.0, blue);
        let out = rasterize(&g, &cam16()).unwrap();
        let p = 8 * 16 + 8;
        assert!(out.color[p] > 0.95 && out.color[2 * 256 + p] < 0.05);
        g.positions.swap(0, 1);
        let out = rasterize(&g, &cam16()).unwrap();
        assert!(out.color[p] < 0.05 && out.color[2 * 256 + p] > 0.95);
    }

    #[test]
    fn quaternion_gradient_matches_finite_difference() {
        let q = [0.9, 0.2, -0.3, 0.1];
        let gr = Matrix3::new(0.3, -1.0, 0.5, 0.2, 0.7, -0.4, 1.1, 0.0, -0.6);
        let f = |q: &[f64; 4]| quat_to_rotation(q).component_mul(&gr).sum();
        let a = quat_grad(&q, &gr);
        for k in 0..4 {
            let mut p = q;
            p[k] += 1e-6;
            let mut m = q;
            m[k] -= 1e-6;
            assert_relative_eq!(a[k], (f(&p) - f(&m)) / 2e-6, epsilon = 1e-7);
        }
    }
}
