//! Multi-view scenes: the synthetic capsule-body generator and the on-disk
//! scene directory format.
//!
//! Layout of a scene directory:
//!
//! ```text
//! meta.json          format_version, scene_id, cameras, view roles, spec
//! template.ply       ASCII PLY, one `double x y z` vertex per template point
//! view_000/image.png 8-bit RGB
//! view_000/mask.png  8-bit gray, 0 or 255
//! view_000/depth.bin b"HGSDEPTH", u32 LE width, u32 LE height, f32 LE values
//! ```
//!
//! Depth values are camera-frame z in meters, 0 where invalid.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, FeaturePointCloud};
use crate::imagebuf::Image;

pub const FORMAT_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 8] = b"HGSDEPTH";

/// Capsule: the set of points within `radius` of segment `a`-`b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let a = Vector3::from(self.a);
        let ab = Vector3::from(self.b) - a;
        let ap = p - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { (ap.dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (ap - ab * t).norm() - self.radius
    }

    pub fn area(&self) -> f64 {
        let l = (Vector3::from(self.b) - Vector3::from(self.a)).norm();
        2.0 * std::f64::consts::PI * self.radius * l + 4.0 * std::f64::consts::PI * self.radius * self.radius
    }

    /// Uniform sample on the capsule surface.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let a = Vector3::from(self.a);
        let ab = Vector3::from(self.b) - a;
        let l = ab.norm();
        let cyl = 2.0 * std::f64::consts::PI * self.radius * l;
        if l > 0.0 && rng.random::<f64>() * self.area() < cyl {
            let axis = ab / l;
            let u = axis.cross(&if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
            let v = axis.cross(&u);
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            return a + axis * (rng.random::<f64>() * l) + (u * phi.cos() + v * phi.sin()) * self.radius;
        }
        let d = loop {
            let d = Vector3::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0);
            let n = d.norm();
            if n > 1e-3 && n <= 1.0 {
                break d / n;
            }
        };
        let base = if l > 0.0 && d.dot(&ab) >= 0.0 { Vector3::from(self.b) } else { a };
        base + d * self.radius
    }
}

/// Signed distance to a union of capsules.
pub fn union_sdf(parts: &[Capsule], p: &Vector3<f64>) -> f64 {
    parts.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min)
}

/// Limb joint angles in degrees: abduction swings a limb sideways away from
/// the body, flexion swings it forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub shoulder_abduction: [f64; 2],
    pub shoulder_flexion: [f64; 2],
    pub hip_abduction: [f64; 2],
    pub hip_flexion: [f64; 2],
    pub head_tilt: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            shoulder_abduction: [20.0, 20.0],
            shoulder_flexion: [10.0, -15.0],
            hip_abduction: [6.0, 6.0],
            hip_flexion: [-8.0, 12.0],
            head_tilt: 0.0,
        }
    }
}

/// How the template deviates from the imaged body.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    /// Meters.
    pub translation: [f64; 3],
    /// Multiplies every length about the pelvis; 0 means 1.
    pub scale: f64,
    /// Each joint angle is perturbed uniformly within this many degrees.
    pub joint_noise_deg: f64,
    pub seed: u64,
}

impl Misalignment {
    pub fn translation_cm(cm: f64, joint_noise_deg: f64, seed: u64) -> Self {
        Self { translation: [cm / 100.0, 0.0, 0.0], scale: 1.0, joint_noise_deg, seed }
    }

    fn effective_scale(&self) -> f64 {
        if self.scale == 0.0 { 1.0 } else { self.scale }
    }
}

/// Parametric capsule body. The body faces +z with +y up; all lengths in
/// meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub pelvis: [f64; 3],
    pub torso_length: f64,
    pub torso_radius: f64,
    pub head_radius: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub arm_length: f64,
    pub arm_radius: f64,
    pub leg_length: f64,
    pub leg_radius: f64,
    pub pose: Pose,
    pub texture_seed: u64,
    pub template_points: usize,
    pub template_seed: u64,
    pub misalignment: Misalignment,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            pelvis: [0.0, -0.05, 0.0],
            torso_length: 0.2,
            torso_radius: 0.07,
            head_radius: 0.055,
            shoulder_width: 0.17,
            hip_width: 0.09,
            arm_length: 0.18,
            arm_radius: 0.026,
            leg_length: 0.2,
            leg_radius: 0.034,
            pose: Pose::default(),
            texture_seed: 1,
            template_points: 1024,
            template_seed: 2,
            misalignment: Misalignment::default(),
        }
    }
}

impl SceneSpec {
    /// Default body with pose and texture varied by `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut s = Self { texture_seed: seed, template_seed: seed.wrapping_add(1), ..Self::default() };
        let mut jitter = |v: &mut f64, r: f64| *v += rng.random_range(-r..r);
        for k in 0..2 {
            jitter(&mut s.pose.shoulder_abduction[k], 10.0);
            jitter(&mut s.pose.shoulder_flexion[k], 15.0);
            jitter(&mut s.pose.hip_abduction[k], 4.0);
            jitter(&mut s.pose.hip_flexion[k], 10.0);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.torso_length,
            self.torso_radius,
            self.head_radius,
            self.shoulder_width,
            self.hip_width,
            self.arm_length,
            self.arm_radius,
            self.leg_length,
            self.leg_radius,
        ];
        if lens.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput("body dimensions must be positive".into()));
        }
        if self.template_points == 0 {
            return Err(Error::EmptyTemplate);
        }
        let m = &self.misalignment;
        if m.translation.iter().any(|t| t.abs() > 0.2) || !(0.5..=2.0).contains(&m.effective_scale()) || !(0.0..=45.0).contains(&m.joint_noise_deg)
        {
            return Err(Error::InvalidInput("misalignment out of range (|t| <= 20 cm, scale in [0.5, 2], noise <= 45 deg)".into()));
        }
        if self.shoulder_width / 2.0 >= self.torso_radius + self.arm_radius || self.hip_width / 2.0 >= self.torso_radius + self.leg_radius {
            return Err(Error::InvalidInput("limbs would detach from the torso".into()));
        }
        Ok(())
    }

    fn parts_with(&self, pose: &Pose) -> Vec<Capsule> {
        let pelvis = Vector3::from(self.pelvis);
        let up = Vector3::y();
        let neck = pelvis + up * self.torso_length;
        let limb = |abd: f64, flex: f64, side: f64| {
            let r = Rotation3::from_axis_angle(&Vector3::x_axis(), -flex.to_radians())
                * Rotation3::from_axis_angle(&Vector3::z_axis(), side * abd.to_radians());
            r * -up
        };
        let mut parts = vec![Capsule { a: pelvis.into(), b: neck.into(), radius: self.torso_radius }];
        let head_dir = Rotation3::from_axis_angle(&Vector3::x_axis(), pose.head_tilt.to_radians()) * up;
        let head = neck + head_dir * (self.head_radius + 0.25 * self.torso_radius);
        parts.push(Capsule { a: head.into(), b: head.into(), radius: self.head_radius });
        for (k, side) in [-1.0, 1.0].into_iter().enumerate() {
            let shoulder = neck - up * 0.02 + Vector3::x() * (side * self.shoulder_width / 2.0);
            let hand = shoulder + limb(pose.shoulder_abduction[k], pose.shoulder_flexion[k], side) * self.arm_length;
            parts.push(Capsule { a: shoulder.into(), b: hand.into(), radius: self.arm_radius });
            let hip = pelvis + Vector3::x() * (side * self.hip_width / 2.0);
            let foot = hip + limb(pose.hip_abduction[k], pose.hip_flexion[k], side) * self.leg_length;
            parts.push(Capsule { a: hip.into(), b: foot.into(), radius: self.leg_radius });
        }
        parts
    }

    /// Capsules of the imaged body.
    pub fn body_parts(&self) -> Vec<Capsule> {
        self.parts_with(&self.pose)
    }

    /// Capsules of the misaligned template body.
    pub fn template_parts(&self) -> Vec<Capsule> {
        let m = &self.misalignment;
        let mut pose = self.pose;
        if m.joint_noise_deg > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
            let n = m.joint_noise_deg;
            for k in 0..2 {
                pose.shoulder_abduction[k] += rng.random_range(-n..=n);
                pose.shoulder_flexion[k] += rng.random_range(-n..=n);
                pose.hip_abduction[k] += rng.random_range(-n..=n);
                pose.hip_flexion[k] += rng.random_range(-n..=n);
            }
            pose.head_tilt += rng.random_range(-n..=n);
        }
        let pelvis = Vector3::from(self.pelvis);
        let s = m.effective_scale();
        let t = Vector3::from(m.translation);
        let map = |p: [f64; 3]| -> [f64; 3] { (pelvis + (Vector3::from(p) - pelvis) * s + t).into() };
        self.parts_with(&pose)
            .into_iter()
            .map(|c| Capsule { a: map(c.a), b: map(c.b), radius: c.radius * s })
            .collect()
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        union_sdf(&self.body_parts(), p)
    }

    /// Smooth procedural albedo in `[0.05, 0.95]`.
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let mut dir = || Vector3::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0).normalize();
        let dirs: Vec<Vector3<f64>> = (0..6).map(|_| dir()).collect();
        let phases: Vec<f64> = (0..6).map(|k| k as f64 * 1.7 + self.texture_seed as f64 * 0.37).collect();
        std::array::from_fn(|c| {
            0.5 + 0.25 * (18.0 * dirs[2 * c].dot(p) + phases[2 * c]).sin() + 0.2 * (55.0 * dirs[2 * c + 1].dot(p) + phases[2 * c + 1]).sin()
        })
    }

    /// Uniform surface samples of `parts` that are not inside another part.
    pub fn sample_surface(parts: &[Capsule], count: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = parts.iter().map(Capsule::area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut pick = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < parts.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            let p = parts[k].sample_surface(&mut rng);
            if union_sdf(parts, &p) > -1e-9 {
                out.push(p);
            }
        }
        out
    }

    pub fn template(&self) -> FeaturePointCloud {
        FeaturePointCloud::new(Self::sample_surface(&self.template_parts(), self.template_points, self.template_seed))
    }
}

/// Symmetric Chamfer distance between `points` and the body surface:
/// the mean of point-to-surface distance (exact, via the SDF) and of
/// surface-sample-to-nearest-point distance.
pub fn chamfer_to_surface(spec: &SceneSpec, points: &[Vector3<f64>], surface_samples: usize) -> f64 {
    if points.is_empty() {
        return f64::INFINITY;
    }
    let parts = spec.body_parts();
    let to_surface = points.iter().map(|p| union_sdf(&parts, p).abs()).sum::<f64>() / points.len() as f64;
    let samples = SceneSpec::sample_surface(&parts, surface_samples, 0xc4a3);
    let from_surface = samples
        .iter()
        .map(|s| points.iter().map(|p| (p - s).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum::<f64>()
        / samples.len() as f64;
    0.5 * (to_surface + from_surface)
}

/// Mean distance from each point to the body surface.
pub fn mean_surface_distance(spec: &SceneSpec, points: &[Vector3<f64>]) -> f64 {
    let parts = spec.body_parts();
    points.iter().map(|p| union_sdf(&parts, p).abs()).sum::<f64>() / points.len().max(1) as f64
}

/// One calibrated view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Image,
    /// `[1, H, W]`, exactly 0 or 1.
    pub mask: Image,
    pub camera: CameraModel,
    pub depth: Option<DepthMap>,
}

impl View {
    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.data.iter().map(|&m| m > 0.5).collect()
    }
}

/// A scene: all views, which of them are inputs, which are held out, and
/// the fitted template.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub scene_id: String,
    pub views: Vec<View>,
    pub source_views: Vec<usize>,
    pub held_out_views: Vec<usize>,
    pub template: FeaturePointCloud,
    /// Generator parameters, when known; used by analytic oracles.
    pub spec: Option<SceneSpec>,
}

impl MultiViewSample {
    pub fn validate(&self) -> Result<()> {
        let first = self.views.first().ok_or_else(|| Error::InvalidInput("scene has no views".into()))?;
        let (h, w) = (first.image.height, first.image.width);
        for (i, v) in self.views.iter().enumerate() {
            if v.image.channels != 3 || v.image.height != h || v.image.width != w || v.mask.channels != 1 || !v.image.same_shape(&v.image)
            {
                return Err(Error::Shape(format!("view {i} image is not [3, {h}, {w}]")));
            }
            if v.mask.height != h || v.mask.width != w || v.mask.data.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::InvalidInput(format!("view {i} mask is not a binary {w}x{h} image")));
            }
            if v.camera.width() != w || v.camera.height() != h {
                return Err(Error::Shape(format!("view {i} camera is {}x{}", v.camera.width(), v.camera.height())));
            }
            if v.depth.as_ref().is_some_and(|d| d.width() != w || d.height() != h || !d.check_invariants()) {
                return Err(Error::InvalidInput(format!("view {i} depth is malformed")));
            }
        }
        if self.template.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        let n = self.views.len();
        if self.source_views.is_empty() || self.source_views.iter().chain(&self.held_out_views).any(|&k| k >= n) {
            return Err(Error::InvalidInput("source/held-out view indices out of range".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.views[0].image.width
    }

    pub fn height(&self) -> usize {
        self.views[0].image.height
    }

    pub fn sources(&self) -> impl Iterator<Item = &View> {
        self.source_views.iter().map(|&k| &self.views[k])
    }

    pub fn source_cameras(&self) -> Vec<CameraModel> {
        self.sources().map(|v| v.camera.clone()).collect()
    }

    /// Views usable as supervision targets during training: everything not
    /// held out.
    pub fn training_targets(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|k| !self.held_out_views.contains(k)).collect()
    }

    /// The same scene with a different set of input views.
    pub fn with_sources(&self, sources: &[usize]) -> Result<Self> {
        let s = Self { source_views: sources.to_vec(), ..self.clone() };
        s.validate()?;
        Ok(s)
    }
}

/// `n` cameras equally spaced in azimuth on a horizontal circle, all aimed
/// at `look_at`. Azimuth 0 sits on the +z side (the body's front), 90 on +x.
pub fn make_camera_ring(n: usize, radius: f64, height: f64, look_at: Vector3<f64>, focal: f64, size: usize) -> Result<Vec<CameraModel>> {
    make_camera_ring_offset(n, radius, height, look_at, focal, size, 0.0)
}

/// [`make_camera_ring`] with every azimuth shifted by `offset_deg`.
pub fn make_camera_ring_offset(
    n: usize,
    radius: f64,
    height: f64,
    look_at: Vector3<f64>,
    focal: f64,
    size: usize,
    offset_deg: f64,
) -> Result<Vec<CameraModel>> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::InvalidInput("camera ring needs n >= 1 and a positive radius".into()));
    }
    (0..n)
        .map(|k| {
            let az = (offset_deg + 360.0 * k as f64 / n as f64).to_radians();
            let eye = look_at + Vector3::new(radius * az.sin(), height, radius * az.cos());
            CameraModel::look_at(eye, look_at, Vector3::y(), focal, size, size)
        })
        .collect()
}

/// Focal length giving the default field of view at `size` pixels.
pub fn default_focal(size: usize) -> f64 {
    100.0 * size as f64 / 48.0
}

/// Distance of the default camera ring from the subject (meters).
pub const RING_RADIUS: f64 = 1.5;

const MARCH_FAR: f64 = 10.0;
const MARCH_EPS: f64 = 1e-7;

/// Sphere-trace one ray against the body; returns the hit point.
fn march(parts: &[Capsule], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
    let mut t = 0.0;
    for _ in 0..512 {
        let p = origin + dir * t;
        let d = union_sdf(parts, &p);
        if d < MARCH_EPS {
            return Some(p);
        }
        t += d;
        if t > MARCH_FAR {
            return None;
        }
    }
    None
}

/// Render ground-truth image, mask and depth for each camera by
/// ray-marching the body SDF, and sample the template from the misaligned
/// body. All views are sources until roles are assigned.
pub fn generate_scene(spec: &SceneSpec, cams: &[CameraModel], scene_id: &str) -> Result<MultiViewSample> {
    spec.validate()?;
    if cams.is_empty() {
        return Err(Error::InvalidInput("need at least one camera".into()));
    }
    let parts = spec.body_parts();
    let views = cams
        .iter()
        .map(|cam| {
            let (w, h) = (cam.width(), cam.height());
            let mut image = Image::zeros(3, h, w);
            let mut mask = Image::zeros(1, h, w);
            let mut depth = vec![0.0f32; w * h];
            let mut valid = vec![false; w * h];
            let origin = cam.center();
            let fwd = cam.forward();
            for y in 0..h {
                for x in 0..w {
                    let dir = cam.ray_world(x as f64 + 0.5, y as f64 + 0.5).normalize();
                    if let Some(p) = march(&parts, &origin, &dir) {
                        let z = (p - origin).dot(&fwd);
                        let rgb = spec.albedo(&p);
                        for (c, v) in rgb.iter().enumerate() {
                            image.set(c, y, x, quantize(*v));
                        }
                        mask.set(0, y, x, 1.0);
                        depth[y * w + x] = z as f32;
                        valid[y * w + x] = true;
                    }
                }
            }
            Ok(View { image, mask, camera: cam.clone(), depth: Some(DepthMap::with_mask(w, h, depth, valid)?) })
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = MultiViewSample {
        scene_id: scene_id.to_string(),
        source_views: (0..views.len()).collect(),
        held_out_views: Vec::new(),
        views,
        template: spec.template(),
        spec: Some(spec.clone()),
    };
    sample.validate()?;
    Ok(sample)
}

/// Round to the nearest 8-bit level, exactly as a PNG round trip would.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// `views` cameras on one ring; `sources` of them, evenly spaced, are the
/// inputs and the last remaining view (if any) is held out.
pub fn ring_scene(spec: &SceneSpec, views: usize, sources: usize, size: usize, scene_id: &str) -> Result<MultiViewSample> {
    if sources == 0 || sources > views {
        return Err(Error::InvalidInput(format!("{sources} source views out of {views}")));
    }
    let cams = make_camera_ring(views, RING_RADIUS, 0.0, Vector3::zeros(), default_focal(size), size)?;
    let mut s = generate_scene(spec, &cams, scene_id)?;
    s.source_views = (0..sources).map(|i| i * views / sources).collect();
    s.held_out_views = (0..views).rev().find(|k| !s.source_views.contains(k)).into_iter().collect();
    s.validate()?;
    Ok(s)
}

/// Standard desk scene: `n_sources` input cameras on a ring, the same number
/// of extra views at +45 degrees, the last of which is held out.
pub fn desk_scene(spec: &SceneSpec, n_sources: usize, size: usize, scene_id: &str) -> Result<MultiViewSample> {
    let focal = default_focal(size);
    let center = Vector3::zeros();
    let mut cams = make_camera_ring(n_sources, RING_RADIUS, 0.0, center, focal, size)?;
    cams.extend(make_camera_ring_offset(n_sources, RING_RADIUS, 0.0, center, focal, size, 45.0)?);
    let mut s = generate_scene(spec, &cams, scene_id)?;
    s.source_views = (0..n_sources).collect();
    s.held_out_views = vec![2 * n_sources - 1];
    s.validate()?;
    Ok(s)
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    skew: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

impl CameraRecord {
    fn from_camera(c: &CameraModel) -> Self {
        let r = c.rotation();
        Self {
            fx: c.fx(),
            fy: c.fy(),
            cx: c.cx(),
            cy: c.cy(),
            skew: c.skew(),
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: c.translation().into(),
            width: c.width(),
            height: c.height(),
        }
    }

    fn to_camera(&self) -> Result<CameraModel> {
        let k = Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let mut e = nalgebra::Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(self.translation));
        CameraModel::new(k, e, self.width, self.height)
    }
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    format_version: u32,
    scene_id: String,
    width: usize,
    height: usize,
    cameras: Vec<CameraRecord>,
    source_views: Vec<usize>,
    held_out_views: Vec<usize>,
    has_depth: Vec<bool>,
    template_points: usize,
    #[serde(default)]
    spec: Option<SceneSpec>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    };
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut bytes = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                bytes[(y * w + x) * c + k] = (image.at(k, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::corrupt(path, e.to_string()))?;
        writer.write_image_data(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))?;
    }
    write_file(path, &out)
}

pub fn decode_png(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    let bad = |e: png::DecodingError| Error::corrupt(path, e.to_string());
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::corrupt(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::corrupt(path, "expected 8-bit samples"));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::corrupt(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = Image::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                img.set(k, y, x, buf[y * info.line_size + x * c + k] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * depth.values().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for v in depth.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = read_file(path)?;
    let bad = |reason: &str| Error::CorruptDepth { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(bad("missing magic header"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * w * h {
        return Err(bad(&format!("expected {} payload bytes for {w}x{h}, found {}", 4 * w * h, bytes.len() - 16)));
    }
    let values: Vec<f32> = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(bad("negative or non-finite depth"));
    }
    let valid = values.iter().map(|&v| v > 0.0).collect();
    DepthMap::with_mask(w, h, values, valid)
}

/// Grayscale preview of a depth map: near is bright, invalid is black.
pub fn depth_preview(depth: &DepthMap) -> Image {
    let valid = depth.values().iter().zip(depth.validity()).filter(|(_, v)| **v).map(|(d, _)| *d);
    let (lo, hi) = valid.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
    let span = (hi - lo).max(1e-6);
    let data = depth
        .values()
        .iter()
        .zip(depth.validity())
        .map(|(d, v)| if *v { 1.0 - 0.8 * (d - lo) / span } else { 0.0 })
        .collect();
    Image::new(1, depth.height(), depth.width(), data).expect("shape matches")
}

pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut s = format!("ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n", points.len());
    for p in points {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    write_file(path, s.as_bytes())
}

pub fn read_ply(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::corrupt(path, "not UTF-8"))?;
    let (header, body) = text.split_once("end_header\n").ok_or_else(|| Error::corrupt(path, "missing end_header"))?;
    if !header.starts_with("ply\nformat ascii 1.0\n") {
        return Err(Error::corrupt(path, "not an ASCII PLY file"));
    }
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::corrupt(path, "missing vertex count"))?;
    let pts = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| Error::corrupt(path, "bad number"))?;
            if v.len() != 3 {
                return Err(Error::corrupt(path, "vertex lines need x y z"));
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        })
        .collect::<Result<Vec<_>>>()?;
    if pts.len() != n {
        return Err(Error::corrupt(path, format!("header says {n} vertices, found {}", pts.len())));
    }
    Ok(pts)
}

fn view_dir(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join(format!("view_{k:03}"))
}

pub fn write_scene(sample: &MultiViewSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SceneMeta {
        format_version: FORMAT_VERSION,
        scene_id: sample.scene_id.clone(),
        width: sample.width(),
        height: sample.height(),
        cameras: sample.views.iter().map(|v| CameraRecord::from_camera(&v.camera)).collect(),
        source_views: sample.source_views.clone(),
        held_out_views: sample.held_out_views.clone(),
        has_depth: sample.views.iter().map(|v| v.depth.is_some()).collect(),
        template_points: sample.template.len(),
        spec: sample.spec.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("scene metadata serializes");
    write_file(&dir.join("meta.json"), json.as_bytes())?;
    write_ply(&dir.join("template.ply"), &sample.template.positions)?;
    for (k, v) in sample.views.iter().enumerate() {
        let vd = view_dir(dir, k);
        fs::create_dir_all(&vd).map_err(|e| Error::io(&vd, e))?;
        encode_png(&vd.join("image.png"), &v.image)?;
        encode_png(&vd.join("mask.png"), &v.mask)?;
        if let Some(d) = &v.depth {
            write_depth(&vd.join("depth.bin"), d)?;
        }
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<MultiViewSample> {
    let meta_path = dir.join("meta.json");
    let text = read_file(&meta_path)?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::corrupt(&meta_path, "missing format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version { path: meta_path, found: version as u32, expected: FORMAT_VERSION });
    }
    let meta: SceneMeta = serde_json::from_value(value).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    if meta.has_depth.len() != meta.cameras.len() {
        return Err(Error::corrupt(&meta_path, "has_depth and cameras differ in length"));
    }
    let views = meta
        .cameras
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let vd = view_dir(dir, k);
            let image = decode_png(&vd.join("image.png"))?;
            let mask = decode_png(&vd.join("mask.png"))?;
            if image.channels != 3 || mask.channels != 1 {
                return Err(Error::corrupt(&vd, "image must be RGB and mask grayscale"));
            }
            let depth = if meta.has_depth[k] { Some(read_depth(&vd.join("depth.bin"))?) } else { None };
            Ok(View { image, mask, camera: rec.to_camera()?, depth })
        })
        .collect::<Result<Vec<_>>>()?;
    let template = FeaturePointCloud::new(read_ply(&dir.join("template.ply"))?);
    let sample = MultiViewSample {
        scene_id: meta.scene_id,
        views,
        source_views: meta.source_views,
        held_out_views: meta.held_out_views,
        template,
        spec: meta.spec,
    };
    sample.validate().map_err(|e| Error::corrupt(dir, e.to_string()))?;
    Ok(sample)
}

/// Every scene directory directly under `dir` (any subdirectory holding a
/// `meta.json`), sorted by name; `dir` itself if it is a scene.
pub fn list_scenes(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if dir.join("meta.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    out.sort();
    Ok(out)
}
