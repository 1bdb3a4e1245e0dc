//! Training losses and image quality metrics.
//!
//! Plain functions work on [`Image`]s in `f64`; the `*_var` variants record
//! the same quantity on a tape.

use std::rc::Rc;

use gradtape::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::imagebuf::Image;
use crate::networks::SemanticEncoder;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Weights of the two training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub depth: f64,
    pub semantic: f64,
    pub fine_l1: f64,
    pub fine_ssim: f64,
    pub fine_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.8, ssim: 0.2, mask: 1.0, depth: 0.1, semantic: 0.1, fine_l1: 0.8, fine_ssim: 0.2, fine_depth: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.mask, self.depth, self.semantic, self.fine_l1, self.fine_ssim, self.fine_depth];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be non-negative".into()))
        }
    }

    pub fn stage1(&self) -> [f64; 5] {
        [self.l1, self.ssim, self.mask, self.depth, self.semantic]
    }

    pub fn stage2(&self) -> [f64; 3] {
        [self.fine_l1, self.fine_ssim, self.fine_depth]
    }
}

/// Coarse-stage loss from its parts `(l1, ssim, mask, depth, semantic)`.
pub fn stage1_loss(parts: [f64; 5], w: &LossWeights) -> f64 {
    parts.iter().zip(w.stage1()).map(|(p, w)| w * p).sum()
}

/// Fine-stage loss from its parts `(l1, ssim, depth)`.
pub fn stage2_loss(parts: [f64; 3], w: &LossWeights) -> f64 {
    parts.iter().zip(w.stage2()).map(|(p, w)| w * p).sum()
}

pub fn stage1_loss_var(g: &Graph, parts: [Var; 5], w: &LossWeights) -> Var {
    g.weighted_sum(&parts, &w.stage1().map(|v| v as f32))
}

pub fn stage2_loss_var(g: &Graph, parts: [Var; 3], w: &LossWeights) -> Var {
    g.weighted_sum(&parts, &w.stage2().map(|v| v as f32))
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )))
    }
}

fn check_var_shape(g: &Graph, v: Var, t: &Tensor) -> Result<()> {
    let s = g.shape(v);
    if s == t.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("prediction {s:?} vs target {:?}", t.shape())))
    }
}

/// Mean absolute error.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    let s: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(s / pred.data.len() as f64)
}

pub fn l1_loss_var(g: &Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    check_var_shape(g, pred, gt)?;
    let neg = gt.map(|v| -v);
    Ok(g.mean(g.abs(g.add_const(pred, &neg))))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            rows[y * ow + j] = (0..n).map(|b| k[b] * x[y * w + j + b]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|a| k[a] * rows[(i + a) * ow + j]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..oh {
        for j in 0..ow {
            for a in 0..n {
                rows[(i + a) * ow + j] += k[a] * g[i * ow + j];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for j in 0..ow {
            for b in 0..n {
                out[y * w + j + b] += k[b] * rows[y * ow + j];
            }
        }
    }
    out
}

struct SsimPlane {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
    map: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64]) -> SsimPlane {
    let mu_x = filter_valid(x, h, w, k);
    let mu_y = filter_valid(y, h, w, k);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let exx = filter_valid(&sq(x, x), h, w, k);
    let eyy = filter_valid(&sq(y, y), h, w, k);
    let exy = filter_valid(&sq(x, y), h, w, k);
    let n = mu_x.len();
    let mut var_x = vec![0.0; n];
    let mut var_y = vec![0.0; n];
    let mut cov = vec![0.0; n];
    let mut map = vec![0.0; n];
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        var_x[i] = exx[i] - mx * mx;
        var_y[i] = eyy[i] - my * my;
        cov[i] = exy[i] - mx * my;
        map[i] = ((2.0 * mx * my + C1) * (2.0 * cov[i] + C2)) / ((mx * mx + my * my + C1) * (var_x[i] + var_y[i] + C2));
    }
    SsimPlane { mu_x, mu_y, var_x, var_y, cov, map }
}

fn check_window(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    Ok(())
}

/// Mean SSIM over channels and valid window positions, for `[C, H, W]`
/// planar data.
fn ssim_planar(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let k = ssim_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let r = ch * h * w..(ch + 1) * h * w;
        let p = ssim_plane(&x[r.clone()], &y[r], h, w, &k);
        total += p.map.iter().sum::<f64>();
        count += p.map.len();
    }
    total / count as f64
}

/// Structural similarity in `[-1, 1]` with an 11x11 Gaussian window
/// (sigma 1.5), averaged over channels.
pub fn ssim_metric(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    check_window(pred.height, pred.width)?;
    let x: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.data.iter().map(|&v| v as f64).collect();
    Ok(ssim_planar(&x, &y, pred.channels, pred.height, pred.width))
}

/// `1 - SSIM`.
pub fn ssim_loss(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(1.0 - ssim_metric(pred, gt)?)
}

/// `1 - SSIM(pred, gt)` on a tape; `pred` and `gt` are `[C, H, W]`.
pub fn ssim_loss_var(g: &Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    check_var_shape(g, pred, gt)?;
    let &[c, h, w] = gt.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", gt.shape())));
    };
    check_window(h, w)?;
    let x: Vec<f64> = g.value(pred).data().iter().map(|&v| v as f64).collect();
    let y: Rc<Vec<f64>> = Rc::new(gt.data().iter().map(|&v| v as f64).collect());
    let k = ssim_taps();
    let planes: Vec<SsimPlane> =
        (0..c).map(|ch| ssim_plane(&x[ch * h * w..(ch + 1) * h * w], &y[ch * h * w..(ch + 1) * h * w], h, w, &k)).collect();
    let count: usize = planes.iter().map(|p| p.map.len()).sum();
    let value = 1.0 - planes.iter().map(|p| p.map.iter().sum::<f64>()).sum::<f64>() / count as f64;
    Ok(g.custom(
        &[pred],
        Tensor::scalar(value as f32),
        Box::new(move |ctx| {
            let dl = -(ctx.grad.item() as f64) / count as f64;
            let mut out = vec![0.0f32; c * h * w];
            for (ch, p) in planes.iter().enumerate() {
                let n = p.map.len();
                let (mut gp, mut gq, mut gr) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (mx, my) = (p.mu_x[i], p.mu_y[i]);
                    let a1 = 2.0 * mx * my + C1;
                    let a2 = 2.0 * p.cov[i] + C2;
                    let b1 = mx * mx + my * my + C1;
                    let b2 = p.var_x[i] + p.var_y[i] + C2;
                    let s = p.map[i];
                    let d_mu = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
                    let d_var = -s / b2;
                    let d_cov = 2.0 * a1 / (b1 * b2);
                    gp[i] = dl * (d_mu - 2.0 * mx * d_var - my * d_cov);
                    gq[i] = dl * 2.0 * d_var;
                    gr[i] = dl * d_cov;
                }
                let (tp, tq, tr) =
                    (filter_valid_adjoint(&gp, h, w, &k), filter_valid_adjoint(&gq, h, w, &k), filter_valid_adjoint(&gr, h, w, &k));
                let base = ch * h * w;
                for j in 0..h * w {
                    out[base + j] = (tp[j] + x[base + j] * tq[j] + y[base + j] * tr[j]) as f32;
                }
            }
            vec![Some(Tensor::new(&[c, h, w], out))]
        }),
    ))
}

/// How the mask discrepancy is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskNorm {
    /// Root mean square over pixels.
    #[default]
    Rms,
    /// Plain Euclidean norm.
    Raw,
}

/// Norm of `alpha - gt_mask`.
pub fn mask_loss(alpha: &Image, gt_mask: &Image, norm: MaskNorm) -> Result<f64> {
    check_same(alpha, gt_mask)?;
    let ss: f64 = alpha.data.iter().zip(&gt_mask.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(match norm {
        MaskNorm::Rms => (ss / alpha.data.len() as f64).sqrt(),
        MaskNorm::Raw => ss.sqrt(),
    })
}

pub fn mask_loss_var(g: &Graph, alpha: Var, gt_mask: &Tensor, norm: MaskNorm) -> Result<Var> {
    check_var_shape(g, alpha, gt_mask)?;
    let neg = gt_mask.map(|v| -v);
    let diff = g.add_const(alpha, &neg);
    let ss = g.sum(g.square(diff));
    let scale = match norm {
        MaskNorm::Rms => 1.0 / gt_mask.len() as f32,
        MaskNorm::Raw => 1.0,
    };
    Ok(safe_sqrt(g, g.scale(ss, scale)))
}

/// Square root of a scalar whose gradient is taken as 0 at 0.
fn safe_sqrt(g: &Graph, x: Var) -> Var {
    let v = g.value(x).item().max(0.0).sqrt();
    g.custom(
        &[x],
        Tensor::scalar(v),
        Box::new(move |ctx| {
            let d = if v > 0.0 { ctx.grad.item() / (2.0 * v) } else { 0.0 };
            vec![Some(Tensor::scalar(d))]
        }),
    )
}

/// Masked depth discrepancy. `empty` is set when the reference has no valid
/// pixels, in which case `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub empty: bool,
}

/// Mean absolute difference over the valid pixels of `input`.
pub fn depth_loss(input: &DepthMap, refined: &DepthMap) -> Result<DepthLoss> {
    if input.width() != refined.width() || input.height() != refined.height() {
        return Err(Error::Shape("depth maps differ in size".into()));
    }
    let n = input.valid_count();
    if n == 0 {
        return Ok(DepthLoss { value: 0.0, empty: true });
    }
    let s: f64 = input
        .values()
        .iter()
        .zip(refined.values())
        .zip(input.validity())
        .filter(|(_, &v)| v)
        .map(|((a, b), _)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(DepthLoss { value: s / n as f64, empty: false })
}

/// Tape variant of [`depth_loss`]; `refined` is `[1, H, W]` (or any shape
/// with `H * W` elements). Returns the loss and the empty-mask flag.
pub fn depth_loss_var(g: &Graph, input: &DepthMap, refined: Var) -> Result<(Var, bool)> {
    let npix = input.width() * input.height();
    let shape = g.shape(refined);
    if shape.iter().product::<usize>() != npix {
        return Err(Error::Shape(format!("refined depth {shape:?} vs {}x{}", input.height(), input.width())));
    }
    let n = input.valid_count();
    if n == 0 {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let neg = Tensor::new(&shape, input.values().iter().map(|v| -v).collect());
    let weights = Tensor::new(&shape, input.validity().iter().map(|&v| if v { 1.0 / n as f32 } else { 0.0 }).collect());
    let diff = g.abs(g.add_const(refined, &neg));
    Ok((g.sum(g.mul_const(diff, Rc::new(weights))), false))
}

/// Mean absolute difference between the encodings of two `[3, H, W]` images.
pub fn semantic_distance(g: &Graph, enc: &dyn SemanticEncoder, a: Var, b: Var) -> Var {
    g.mean(g.abs(g.sub(enc.encode(g, a), enc.encode(g, b))))
}

/// Map a `[1, H, W]` depth to `[3, H, W]` in `[0, 1]` with near surfaces
/// bright: valid pixels span the range of valid depths, invalid ones are 0.
/// The normalizing range is treated as a constant.
pub fn depth_to_semantic_image(g: &Graph, depth: Var, valid: &[bool]) -> Result<Var> {
    let shape = g.shape(depth);
    if shape.len() != 3 || shape[0] != 1 || shape[1] * shape[2] != valid.len() {
        return Err(Error::Shape(format!("depth {shape:?} vs {} validity flags", valid.len())));
    }
    let v = g.value(depth);
    let (lo, hi) = v
        .data()
        .iter()
        .zip(valid)
        .filter(|(_, &m)| m)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (d, _)| (lo.min(*d), hi.max(*d)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let range = (hi - lo).max(1e-6);
    let mask = Rc::new(Tensor::new(&shape, valid.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()));
    let near_bright = g.add_scalar(g.scale(depth, -1.0 / range), hi / range);
    let one = g.mul_const(near_bright, mask);
    Ok(g.concat(&[one, one, one], 0))
}

/// Semantic alignment between an image and a refined depth map. Gradients
/// reach the depth only.
pub fn semantic_loss_var(g: &Graph, enc: &dyn SemanticEncoder, image: &Tensor, depth: Var, valid: &[bool]) -> Result<Var> {
    let d = depth_to_semantic_image(g, depth, valid)?;
    let (ds, is) = (g.shape(d), image.shape());
    if ds != is {
        return Err(Error::Shape(format!("image {is:?} vs depth image {ds:?}")));
    }
    Ok(semantic_distance(g, enc, g.constant(image.clone()), d))
}

/// Plain-value [`semantic_loss_var`].
pub fn semantic_loss(enc: &dyn SemanticEncoder, image: &Image, depth: &DepthMap) -> Result<f64> {
    let g = Graph::new();
    let d = g.constant(Tensor::new(&[1, depth.height(), depth.width()], depth.values().to_vec()));
    let l = semantic_loss_var(&g, enc, &image.to_tensor(), d, depth.validity())?;
    Ok(g.value(l).item() as f64)
}

/// Peak signal-to-noise ratio over the whole image on unit range, capped
/// at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    let mse: f64 =
        pred.data.iter().zip(&gt.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / pred.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}
