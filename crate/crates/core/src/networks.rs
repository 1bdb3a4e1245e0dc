//! Learnable building blocks.
//!
//! Every network registers its parameters in a shared [`ParamStore`] under a
//! name prefix and runs its forward pass on a [`Session`], so one backward
//! call reaches all of them.

use std::collections::HashMap;
use std::rc::Rc;

use gradtape::{Graph, ParamId, ParamStore, Rulebook, Session, SparseRows, Tensor, Var};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;

const NORM_EPS: f32 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Channels of the image feature maps.
    pub image_feature_channels: usize,
    /// Channels of the depth refiner feature maps.
    pub depth_feature_channels: usize,
    /// U-Net widths at full, half and quarter resolution.
    pub unet_widths: [usize; 3],
    pub group_norm_groups: usize,
    /// Largest relative depth change the refiner can make.
    pub refine_log_range: f64,
    /// Meters per unit of normalized refiner depth input.
    pub depth_norm_scale: f64,
    pub voxel_size: f64,
    /// Output widths of the four sparse-conv stages (/2, /4, /8, /16).
    pub sparse_widths: [usize; 4],
    pub spd_factors: [usize; 2],
    pub spd_channels: usize,
    /// Largest distance between an SPD child and its parent (meters).
    pub spd_bound: f64,
    pub head_hidden: usize,
    pub offset_hidden: usize,
    /// Componentwise bound on fine point offsets (meters).
    pub delta_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub semantic_dim: usize,
    pub semantic_seed: u64,
    /// Reuse the coarse-stage depth refiner in the fine stage.
    pub share_refiner: bool,
    /// Train a separate image extractor for the fine stage instead of
    /// reusing the frozen coarse-stage one.
    pub fresh_fine_extractor: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_feature_channels: 32,
            depth_feature_channels: 32,
            unet_widths: [32, 64, 128],
            group_norm_groups: 8,
            refine_log_range: 0.05,
            depth_norm_scale: 0.3,
            voxel_size: 0.005,
            sparse_widths: [32, 64, 128, 128],
            spd_factors: [4, 2],
            spd_channels: 64,
            spd_bound: 0.03,
            head_hidden: 256,
            offset_hidden: 128,
            delta_max: 0.025,
            scale_min: 5e-4,
            scale_max: 0.03,
            semantic_dim: 64,
            semantic_seed: 7,
            share_refiner: false,
            fresh_fine_extractor: false,
        }
    }
}

impl NetConfig {
    pub fn fused_channels(&self) -> usize {
        self.sparse_widths.iter().sum()
    }

    pub fn upsampling(&self) -> usize {
        self.spd_factors[0] * self.spd_factors[1]
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.group_norm_groups;
        if g == 0 || self.unet_widths.iter().any(|w| *w == 0 || w % g != 0) {
            return Err(Error::Config(format!("U-Net widths {:?} must be positive multiples of {g}", self.unet_widths)));
        }
        if self.spd_factors.contains(&0) || self.sparse_widths.contains(&0) {
            return Err(Error::Config("SPD factors and sparse widths must be positive".into()));
        }
        if !(self.voxel_size > 0.0 && self.delta_max >= 0.0 && self.spd_bound >= 0.0) {
            return Err(Error::Config("voxel size must be positive, bounds non-negative".into()));
        }
        if !(0.0 < self.scale_min && self.scale_min < self.scale_max) {
            return Err(Error::Config("need 0 < scale_min < scale_max".into()));
        }
        Ok(())
    }
}

/// A `[C, H, W]` feature map detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub view_index: usize,
}

fn kaiming(store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, gain: f32) -> ParamId {
    store.uniform(name, shape, gain * (6.0 / fan_in as f32).sqrt())
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, i: usize, o: usize, gain: f32) -> Self {
        Self { w: kaiming(store, &format!("{name}.w"), &[i, o], i, gain), b: store.zeros(&format!("{name}.b"), &[o]) }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        s.linear(x, s.p(self.w), s.p(self.b))
    }
}

/// Three linear layers with ReLU between them.
#[derive(Clone, Debug)]
struct Mlp3 {
    layers: [Linear; 3],
}

impl Mlp3 {
    fn new(store: &mut ParamStore, name: &str, i: usize, h: usize, o: usize, out_gain: f32) -> Self {
        Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), i, h, 1.0),
                Linear::new(store, &format!("{name}.1"), h, h, 1.0),
                Linear::new(store, &format!("{name}.2"), h, o, out_gain),
            ],
        }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        let h = s.relu(self.layers[0].forward(s, x));
        let h = s.relu(self.layers[1].forward(s, h));
        self.layers[2].forward(s, h)
    }
}

/// 3x3 convolution, ReLU, group norm.
#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    groups: usize,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Self {
        Self {
            w: kaiming(store, &format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, 1.0),
            b: store.zeros(&format!("{name}.b"), &[cout]),
            gamma: store.full(&format!("{name}.gn.gamma"), &[cout], 1.0),
            beta: store.zeros(&format!("{name}.gn.beta"), &[cout]),
            stride,
            groups,
        }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        let y = s.relu(s.conv2d(x, s.p(self.w), s.p(self.b), self.stride, 1));
        s.group_norm(y, s.p(self.gamma), s.p(self.beta), self.groups, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvBlock,
    b: ConvBlock,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, groups: usize) -> Self {
        Self { a: ConvBlock::new(store, &format!("{name}.a"), c, c, 1, groups), b: ConvBlock::new(store, &format!("{name}.b"), c, c, 1, groups) }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        s.add(x, self.b.forward(s, self.a.forward(s, x)))
    }
}

/// Resolution-preserving U-Net with two stride-2 levels, residual blocks
/// and skip connections.
#[derive(Clone, Debug)]
pub struct UNet {
    stem: ConvBlock,
    res0: ResBlock,
    down1: ConvBlock,
    res1: ResBlock,
    down2: ConvBlock,
    res2: ResBlock,
    up1: ConvBlock,
    up0: ConvBlock,
    head_w: ParamId,
    head_b: ParamId,
    in_channels: usize,
    out_channels: usize,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &NetConfig) -> Self {
        let [c0, c1, c2] = cfg.unet_widths;
        let g = cfg.group_norm_groups;
        Self {
            stem: ConvBlock::new(store, &format!("{name}.stem"), cin, c0, 1, g),
            res0: ResBlock::new(store, &format!("{name}.res0"), c0, g),
            down1: ConvBlock::new(store, &format!("{name}.down1"), c0, c1, 2, g),
            res1: ResBlock::new(store, &format!("{name}.res1"), c1, g),
            down2: ConvBlock::new(store, &format!("{name}.down2"), c1, c2, 2, g),
            res2: ResBlock::new(store, &format!("{name}.res2"), c2, g),
            up1: ConvBlock::new(store, &format!("{name}.up1"), c2 + c1, c1, 1, g),
            up0: ConvBlock::new(store, &format!("{name}.up0"), c1 + c0, c0, 1, g),
            head_w: store.uniform(&format!("{name}.head.w"), &[cout, c0, 1, 1], (3.0 / c0 as f32).sqrt()),
            head_b: store.zeros(&format!("{name}.head.b"), &[cout]),
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[Cin, H, W]` to `[Cout, H, W]`; `H` and `W` must be multiples of 4.
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Shape(format!("U-Net expects [{}, H, W], got {shape:?}", self.in_channels)));
        }
        if !shape[1].is_multiple_of(4) || !shape[2].is_multiple_of(4) || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Shape(format!("image size {}x{} is not a multiple of 4", shape[1], shape[2])));
        }
        let l0 = self.res0.forward(s, self.stem.forward(s, x));
        let l1 = self.res1.forward(s, self.down1.forward(s, l0));
        let l2 = self.res2.forward(s, self.down2.forward(s, l1));
        let u1 = self.up1.forward(s, s.concat(&[s.upsample2x(l2), l1], 0));
        let u0 = self.up0.forward(s, s.concat(&[s.upsample2x(u1), l0], 0));
        Ok(s.conv2d(u0, s.p(self.head_w), s.p(self.head_b), 1, 0))
    }

    /// Zero the weights and bias of head output channel `c`.
    fn zero_head_channel(&self, store: &mut ParamStore, c: usize) {
        let w = store.get_mut(self.head_w);
        let per = w.len() / self.out_channels;
        w.data_mut()[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(self.head_b).data_mut()[c] = 0.0;
    }
}

/// Image feature extractor: `[3, H, W]` image to `[C, H, W]` features.
#[derive(Clone, Debug)]
pub struct ImageExtractor {
    unet: UNet,
}

impl ImageExtractor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig) -> Self {
        Self { unet: UNet::new(store, name, 3, cfg.image_feature_channels, cfg) }
    }

    pub fn forward(&self, s: &Session, image: Var) -> Result<Var> {
        self.unet.forward(s, image)
    }
}

/// Refined depth on a tape.
pub struct RefinedDepth {
    /// `[1, H, W]`; meaningful where `valid`.
    pub depth: Var,
    pub valid: Vec<bool>,
    /// `[C, H, W]` depth features.
    pub features: Var,
    pub width: usize,
    pub height: usize,
}

impl RefinedDepth {
    pub fn to_depth_map(&self, g: &Graph) -> DepthMap {
        let v = g.value(self.depth);
        let valid: Vec<bool> = self.valid.iter().zip(v.data()).map(|(&m, &d)| m && d > 0.0 && d.is_finite()).collect();
        DepthMap::with_mask(self.width, self.height, v.data().to_vec(), valid).expect("sizes agree")
    }
}

/// Depth refiner: rescales each valid input depth by a learned factor in
/// `exp(+-refine_log_range)` and emits depth features. Starts as the
/// identity because the depth head channel is zero-initialized.
#[derive(Clone, Debug)]
pub struct DepthRefiner {
    unet: UNet,
    log_range: f32,
    norm_scale: f32,
    feature_channels: usize,
}

impl DepthRefiner {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig) -> Self {
        let unet = UNet::new(store, name, 5, 1 + cfg.depth_feature_channels, cfg);
        unet.zero_head_channel(store, 0);
        Self {
            unet,
            log_range: cfg.refine_log_range as f32,
            norm_scale: cfg.depth_norm_scale as f32,
            feature_channels: cfg.depth_feature_channels,
        }
    }

    /// `image` is `[3, H, W]` matching the depth map size.
    pub fn forward(&self, s: &Session, depth: &DepthMap, image: &Tensor) -> Result<RefinedDepth> {
        let (w, h) = (depth.width(), depth.height());
        if image.shape() != [3, h, w] {
            return Err(Error::Shape(format!("depth {h}x{w} vs image {:?}", image.shape())));
        }
        let n = w * h;
        let valid = depth.validity().to_vec();
        let count = depth.valid_count();
        let center = if count > 0 {
            depth.values().iter().zip(&valid).filter(|(_, &m)| m).map(|(d, _)| *d as f64).sum::<f64>() as f32 / count as f32
        } else {
            1.0
        };
        let mut input = Vec::with_capacity(5 * n);
        input.extend(depth.values().iter().zip(&valid).map(|(d, &m)| if m { (d - center) / self.norm_scale } else { 0.0 }));
        input.extend(valid.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        input.extend_from_slice(image.data());
        let out = self.unet.forward(s, s.constant(Tensor::new(&[5, h, w], input)))?;
        let residual = s.slice(out, 0, 0, 1);
        let features = s.slice(out, 0, 1, self.feature_channels);
        let base: Vec<f32> = depth.values().iter().zip(&valid).map(|(d, &m)| if m { *d } else { center }).collect();
        let factor = s.exp(s.scale(s.tanh(residual), self.log_range));
        let refined = s.mul_const(factor, Rc::new(Tensor::new(&[1, h, w], base)));
        Ok(RefinedDepth { depth: refined, valid, features, width: w, height: h })
    }
}

/// Sparse voxel grid built by [`SparseConvNet::build_volume`].
pub struct FeatureVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    /// Occupied voxels at the finest scale.
    pub finest_voxels: usize,
    /// Occupied cells of the fused (1/16) grid, row index into `features`.
    pub cells: HashMap<[i32; 3], usize>,
    /// `[cells, fused_channels]`.
    pub features: Var,
    pub bounds: ([i32; 3], [i32; 3]),
}

/// Downsampling factor of the fused grid relative to the finest voxels.
pub const FUSED_STRIDE: i32 = 16;

impl FeatureVolume {
    /// World position of fused cell `m`.
    pub fn cell_center(&self, m: [i32; 3]) -> Vector3<f64> {
        Vector3::from_fn(|k, _| self.origin[k] + (FUSED_STRIDE as f64 * m[k] as f64 + 0.5) * self.voxel_size)
    }

    /// Continuous fused-grid coordinate of a world point; integer values are
    /// cell centers.
    pub fn grid_coord(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|k, _| ((p[k] - self.origin[k]) / self.voxel_size - 0.5) / FUSED_STRIDE as f64)
    }

    /// Trilinear interpolation weights of each query over the fused cells.
    /// Queries outside the occupied bounding box get an empty row.
    pub fn trilinear_rows(&self, queries: &[Vector3<f64>]) -> SparseRows {
        let (lo, hi) = self.bounds;
        let rows = queries
            .iter()
            .map(|p| {
                let u = self.grid_coord(p);
                if (0..3).any(|k| !(u[k] >= lo[k] as f64 && u[k] <= hi[k] as f64)) {
                    return Vec::new();
                }
                let i0: [i32; 3] = std::array::from_fn(|k| u[k].floor() as i32);
                let t: [f64; 3] = std::array::from_fn(|k| u[k] - i0[k] as f64);
                let mut row = Vec::with_capacity(8);
                for corner in 0..8 {
                    let mut wgt = 1.0;
                    let mut c = i0;
                    for k in 0..3 {
                        if corner >> k & 1 == 1 {
                            c[k] += 1;
                            wgt *= t[k];
                        } else {
                            wgt *= 1.0 - t[k];
                        }
                    }
                    if wgt == 0.0 {
                        continue;
                    }
                    if let Some(&idx) = self.cells.get(&c) {
                        row.push((idx as u32, wgt as f32));
                    }
                }
                row
            })
            .collect();
        SparseRows { cols: self.cells.len(), rows }
    }
}

/// Trilinear sample of the fused volume at `queries`: `[Q, fused_channels]`,
/// zero outside the volume.
pub fn sample_volume(g: &Graph, vol: &FeatureVolume, queries: &[Vector3<f64>]) -> Var {
    g.spmm(Rc::new(vol.trilinear_rows(queries)), vol.features)
}

#[derive(Clone, Debug)]
struct SparseLayer {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
}

const KERNEL_OFFSETS: usize = 27;

fn kernel_offset(k: usize) -> [i32; 3] {
    [(k / 9) as i32 - 1, (k / 3 % 3) as i32 - 1, (k % 3) as i32 - 1]
}

/// Active voxel coordinates with their row index.
struct ActiveSet {
    coords: Vec<[i32; 3]>,
    index: HashMap<[i32; 3], usize>,
}

impl ActiveSet {
    fn from_coords(coords: Vec<[i32; 3]>) -> Self {
        let index = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Self { coords, index }
    }

    /// Submanifold 3x3x3 rules: outputs are the inputs.
    fn submanifold_rules(&self) -> Rulebook {
        let mut pairs = vec![Vec::new(); KERNEL_OFFSETS];
        for (o, c) in self.coords.iter().enumerate() {
            for (k, pk) in pairs.iter_mut().enumerate() {
                let d = kernel_offset(k);
                if let Some(&i) = self.index.get(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]]) {
                    pk.push((i as u32, o as u32));
                }
            }
        }
        Rulebook { n_in: self.coords.len(), n_out: self.coords.len(), pairs }
    }

    /// Stride-2 3x3x3 rules (padding 1): output `o` sees inputs `2o + d`.
    fn strided_rules(&self) -> (Rulebook, ActiveSet) {
        let mut out_coords = Vec::new();
        let mut out_index = HashMap::new();
        let mut pairs = vec![Vec::new(); KERNEL_OFFSETS];
        for (i, c) in self.coords.iter().enumerate() {
            for (k, pk) in pairs.iter_mut().enumerate() {
                let d = kernel_offset(k);
                let r = [c[0] - d[0], c[1] - d[1], c[2] - d[2]];
                if r.iter().any(|v| v.rem_euclid(2) != 0) {
                    continue;
                }
                let o = r.map(|v| v.div_euclid(2));
                let oi = *out_index.entry(o).or_insert_with(|| {
                    out_coords.push(o);
                    out_coords.len() - 1
                });
                pk.push((i as u32, oi as u32));
            }
        }
        let n_out = out_coords.len();
        (Rulebook { n_in: self.coords.len(), n_out, pairs }, ActiveSet { coords: out_coords, index: out_index })
    }
}

/// Finest-scale voxelization of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxelization {
    /// Bounding-box minimum; voxel `c` spans `origin + c * size` onward.
    pub origin: Vector3<f64>,
    /// Occupied voxels in first-seen order.
    pub coords: Vec<[i32; 3]>,
    /// Voxel row of every point.
    pub assignment: Vec<usize>,
}

pub fn voxelize(positions: &[Vector3<f64>], voxel_size: f64) -> Voxelization {
    let origin = positions.iter().fold(Vector3::repeat(f64::INFINITY), |m, p| m.inf(p));
    let mut coords = Vec::new();
    let mut index: HashMap<[i32; 3], usize> = HashMap::new();
    let assignment = positions
        .iter()
        .map(|p| {
            let c: [i32; 3] = std::array::from_fn(|k| ((p[k] - origin[k]) / voxel_size).floor() as i32);
            *index.entry(c).or_insert_with(|| {
                coords.push(c);
                coords.len() - 1
            })
        })
        .collect();
    Voxelization { origin, coords, assignment }
}

impl Voxelization {
    /// Per-voxel mean of point features: `[points, C]` to `[voxels, C]`.
    pub fn average(&self, g: &Graph, features: Var) -> Var {
        g.segment_mean(features, Rc::new(self.assignment.clone()), self.coords.len())
    }
}

/// Seventeen sparse 3D convolution layers (conv, batch norm, ReLU) with
/// stride-2 layers at positions 3, 6, 10 and 14. Outputs of layers 5, 9, 13
/// and 17 are pooled onto the 1/16 grid and concatenated.
#[derive(Clone, Debug)]
pub struct SparseConvNet {
    layers: Vec<SparseLayer>,
    in_channels: usize,
    voxel_size: f64,
    fused: usize,
}

const TAP_LAYERS: [usize; 4] = [4, 8, 12, 16];

impl SparseConvNet {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &NetConfig) -> Self {
        let [a, b, c, d] = cfg.sparse_widths;
        let plan: [(usize, usize); 17] = [
            (a, 1), (a, 1), (a, 2), (a, 1), (a, 1),
            (b, 2), (b, 1), (b, 1), (b, 1),
            (c, 2), (c, 1), (c, 1), (c, 1),
            (d, 2), (d, 1), (d, 1), (d, 1),
        ];
        let mut prev = cin;
        let layers = plan
            .iter()
            .enumerate()
            .map(|(l, &(cout, stride))| {
                let layer = SparseLayer {
                    w: kaiming(store, &format!("{name}.{l}.w"), &[KERNEL_OFFSETS, prev, cout], prev * 8, 1.0),
                    gamma: store.full(&format!("{name}.{l}.bn.gamma"), &[cout], 1.0),
                    beta: store.zeros(&format!("{name}.{l}.bn.beta"), &[cout]),
                    stride,
                };
                prev = cout;
                layer
            })
            .collect();
        Self { layers, in_channels: cin, voxel_size: cfg.voxel_size, fused: a + b + c + d }
    }

    pub fn fused_channels(&self) -> usize {
        self.fused
    }

    /// Voxelize a featured point cloud (features of points sharing a voxel
    /// are averaged) and run the network.
    pub fn build_volume(&self, s: &Session, positions: &[Vector3<f64>], features: Var) -> Result<FeatureVolume> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("cannot build a feature volume from an empty point cloud".into()));
        }
        let fs = s.shape(features);
        if fs != [positions.len(), self.in_channels] {
            return Err(Error::Shape(format!("volume features {fs:?} for {} points", positions.len())));
        }
        let vox = voxelize(positions, self.voxel_size);
        let (origin, nvox) = (vox.origin, vox.coords.len());
        let mut x = vox.average(s, features);
        let mut active = ActiveSet::from_coords(vox.coords);
        let mut scale = 1i32;
        let mut taps = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let rules = if layer.stride == 1 {
                active.submanifold_rules()
            } else {
                let (rules, next) = active.strided_rules();
                active = next;
                scale *= 2;
                rules
            };
            let y = s.sparse_conv(x, s.p(layer.w), Rc::new(rules));
            let y = s.batch_norm_rows(y, s.p(layer.gamma), s.p(layer.beta), NORM_EPS);
            x = s.relu(y);
            if TAP_LAYERS.contains(&l) {
                taps.push((x, scale, active.coords.clone()));
            }
        }
        // Fused cells: the coarsest active set first, then anything the
        // finer scales add.
        let mut cells: HashMap<[i32; 3], usize> = HashMap::new();
        let mut order = Vec::new();
        let pooled: Vec<Vec<usize>> = taps
            .iter()
            .rev()
            .map(|(_, sc, cs)| {
                let f = FUSED_STRIDE / sc;
                cs.iter()
                    .map(|c| {
                        let m = c.map(|v| v.div_euclid(f));
                        *cells.entry(m).or_insert_with(|| {
                            order.push(m);
                            order.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        let m = order.len();
        let parts: Vec<Var> = taps
            .iter()
            .zip(pooled.iter().rev())
            .map(|((v, _, _), seg)| s.segment_mean(*v, Rc::new(seg.clone()), m))
            .collect();
        let lo: [i32; 3] = std::array::from_fn(|k| order.iter().map(|c| c[k]).min().unwrap());
        let hi: [i32; 3] = std::array::from_fn(|k| order.iter().map(|c| c[k]).max().unwrap());
        Ok(FeatureVolume {
            origin,
            voxel_size: self.voxel_size,
            finest_voxels: nvox,
            cells,
            features: s.concat(&parts, 1),
            bounds: (lo, hi),
        })
    }
}

/// Output of [`Spd::forward`].
pub struct Densified {
    /// `[N * r1 * r2, 3]`.
    pub positions: Var,
    /// `[N * r1 * r2, C_q]`, features of the last step.
    pub features: Var,
}

#[derive(Clone, Debug)]
struct SpdStep {
    inp: Linear,
    mid: Linear,
    child: Linear,
    embed: ParamId,
    disp: Linear,
    factor: usize,
}

/// Two split-and-displace steps: every parent spawns `r` children whose
/// displacements come from a shared MLP over the parent feature plus a
/// learned per-child embedding, bounded by a scaled tanh.
#[derive(Clone, Debug)]
pub struct Spd {
    steps: Vec<SpdStep>,
    bound: f32,
    channels: usize,
    ctx_channels: usize,
}

/// Meters per unit of normalized SPD position input.
const SPD_POSITION_SCALE: f32 = 0.3;

impl Spd {
    pub fn new(store: &mut ParamStore, name: &str, ctx_channels: usize, cfg: &NetConfig) -> Self {
        let c = cfg.spd_channels;
        let steps = cfg
            .spd_factors
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let cin = if k == 0 { ctx_channels } else { c };
                SpdStep {
                    inp: Linear::new(store, &format!("{name}.{k}.in"), cin + 3, c, 1.0),
                    mid: Linear::new(store, &format!("{name}.{k}.mid"), c, c, 1.0),
                    child: Linear::new(store, &format!("{name}.{k}.child"), c, c, 1.0),
                    embed: store.uniform(&format!("{name}.{k}.embed"), &[r, c], 0.5),
                    disp: Linear::new(store, &format!("{name}.{k}.disp"), c, 3, 0.1),
                    factor: r,
                }
            })
            .collect();
        Self { steps, bound: cfg.spd_bound as f32, channels: c, ctx_channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `positions [N, 3]`, `context [N, ctx]`, `center` used to normalize
    /// position inputs.
    pub fn forward(&self, s: &Session, positions: Var, context: Var, center: &Vector3<f64>) -> Result<Densified> {
        let n = s.shape(positions)[0];
        if n == 0 {
            return Err(Error::EmptyTemplate);
        }
        if s.shape(context) != [n, self.ctx_channels] {
            return Err(Error::Shape(format!("SPD context {:?}, expected [{n}, {}]", s.shape(context), self.ctx_channels)));
        }
        let mut pos = positions;
        let mut feat = context;
        let mut count = n;
        let per_comp = self.bound / 3f32.sqrt();
        for step in &self.steps {
            let shift = Tensor::new(&[count, 3], (0..count).flat_map(|_| center.iter().map(|v| -*v as f32)).collect());
            let npos = s.scale(s.add_const(pos, &shift), 1.0 / SPD_POSITION_SCALE);
            let h = s.relu(step.inp.forward(s, s.concat(&[feat, npos], 1)));
            let h = s.relu(step.mid.forward(s, h));
            let r = step.factor;
            let parent: Rc<Vec<usize>> = Rc::new((0..count * r).map(|i| i / r).collect());
            let which: Rc<Vec<usize>> = Rc::new((0..count * r).map(|i| i % r).collect());
            let hc = s.add(step.child.forward(s, s.gather_rows(h, parent.clone())), s.gather_rows(s.p(step.embed), which));
            let hc = s.relu(hc);
            let disp = s.scale(s.tanh(step.disp.forward(s, hc)), per_comp);
            pos = s.add(s.gather_rows(pos, parent), disp);
            feat = hc;
            count *= r;
        }
        Ok(Densified { positions: pos, features: feat })
    }
}

/// Gaussian attributes regressed by a [`GaussianHead`].
pub struct HeadOutput {
    /// `[N, 4]` unit quaternions.
    pub rotations: Var,
    /// `[N, 3]` in `(scale_min, scale_max)`.
    pub scales: Var,
    /// `[N, 1]` in `(0, 1)`.
    pub opacities: Var,
    /// `[N, 3]` in `(0, 1)`.
    pub colors: Var,
}

/// Four three-layer MLP heads for rotation, scale, opacity and color.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    rotation: Mlp3,
    scale: Mlp3,
    opacity: Mlp3,
    color: Mlp3,
    scale_min: f32,
    scale_max: f32,
    in_channels: usize,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &NetConfig) -> Self {
        let h = cfg.head_hidden;
        Self {
            rotation: Mlp3::new(store, &format!("{name}.rotation"), cin, h, 4, 0.1),
            scale: Mlp3::new(store, &format!("{name}.scale"), cin, h, 3, 0.1),
            opacity: Mlp3::new(store, &format!("{name}.opacity"), cin, h, 1, 0.1),
            color: Mlp3::new(store, &format!("{name}.color"), cin, h, 3, 0.1),
            scale_min: cfg.scale_min as f32,
            scale_max: cfg.scale_max as f32,
            in_channels: cin,
        }
    }

    pub fn forward(&self, s: &Session, feats: Var) -> Result<HeadOutput> {
        let shape = s.shape(feats);
        if shape.len() != 2 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!("head input {shape:?}, expected [N, {}]", self.in_channels)));
        }
        let n = shape[0];
        let identity = Tensor::new(&[n, 4], (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect());
        let rotations = s.normalize_rows(s.add_const(self.rotation.forward(s, feats), &identity), 1e-12);
        let unit = s.sigmoid(self.scale.forward(s, feats));
        let scales = s.add_scalar(s.scale(unit, self.scale_max - self.scale_min), self.scale_min);
        Ok(HeadOutput {
            rotations,
            scales,
            opacities: s.sigmoid(self.opacity.forward(s, feats)),
            colors: s.sigmoid(self.color.forward(s, feats)),
        })
    }
}

/// Per-point offset MLP with a `delta_max`-scaled tanh output.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    mlp: Mlp3,
    delta_max: f32,
    in_channels: usize,
}

impl OffsetHead {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &NetConfig) -> Self {
        Self { mlp: Mlp3::new(store, name, cin, cfg.offset_hidden, 3, 0.1), delta_max: cfg.delta_max as f32, in_channels: cin }
    }

    /// `[N, C]` features to `[N, 3]` offsets in meters.
    pub fn forward(&self, s: &Session, feats: Var) -> Result<Var> {
        let shape = s.shape(feats);
        if shape.len() != 2 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!("offset input {shape:?}, expected [N, {}]", self.in_channels)));
        }
        Ok(s.scale(s.tanh(self.mlp.forward(s, feats)), self.delta_max))
    }
}

/// Fixed image encoder used by the semantic alignment loss.
pub trait SemanticEncoder {
    fn dim(&self) -> usize;
    /// `[3, H, W]` image to a `[dim]` descriptor. Gradients must flow to the
    /// image but never into the encoder.
    fn encode(&self, g: &Graph, image: Var) -> Var;
}

/// Frozen convolutional encoder with seeded random weights: three stride-2
/// 3x3 convolutions with ReLU, then global average pooling.
#[derive(Clone, Debug)]
pub struct RandomConvEncoder {
    convs: Vec<(Tensor, Tensor)>,
    dim: usize,
}

impl RandomConvEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, dim.div_ceil(4).max(1), dim.div_ceil(2).max(1), dim];
        let convs = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let bound = (6.0 / (cin * 9) as f32).sqrt();
                let wt = Tensor::new(&[cout, cin, 3, 3], (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect());
                let b = Tensor::new(&[cout], (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect());
                (wt, b)
            })
            .collect();
        Self { convs, dim }
    }

    /// Flattened weights, for reproducibility checks.
    pub fn weights(&self) -> Vec<f32> {
        self.convs.iter().flat_map(|(w, b)| w.data().iter().chain(b.data()).copied()).collect()
    }
}

impl SemanticEncoder for RandomConvEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &Graph, image: Var) -> Var {
        let mut x = image;
        for (w, b) in &self.convs {
            x = g.relu(g.conv2d(x, g.constant(w.clone()), g.constant(b.clone()), 2, 1));
        }
        g.global_avg_pool(x)
    }
}

/// Encoder that maps everything to zero.
#[derive(Clone, Copy, Debug)]
pub struct ZeroEncoder {
    pub dim: usize,
}

impl SemanticEncoder for ZeroEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &Graph, image: Var) -> Var {
        let zero = g.scale(g.global_avg_pool(image), 0.0);
        g.slice(g.concat(&vec![zero; self.dim.div_ceil(3).max(1)], 0), 0, 0, self.dim)
    }
}

/// Parameter-name prefix of everything trained in the coarse stage.
pub const STAGE1_PREFIX: &str = "s1.";
/// Parameter-name prefix of everything trained in the fine stage.
pub const STAGE2_PREFIX: &str = "s2.";

/// All trainable networks of both stages plus the frozen semantic encoder.
#[derive(Clone)]
pub struct ModelParams {
    pub config: NetConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub extractor: ImageExtractor,
    pub refiner: DepthRefiner,
    pub volume_net: SparseConvNet,
    pub spd: Spd,
    pub coarse_head: GaussianHead,
    pub fine_refiner: DepthRefiner,
    pub latent_volume_net: SparseConvNet,
    pub offset_head: OffsetHead,
    pub fine_head: GaussianHead,
    pub fine_extractor: Option<ImageExtractor>,
    pub semantic: RandomConvEncoder,
}

impl ModelParams {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut store = ParamStore::new(seed);
        let st = &mut store;
        let extractor = ImageExtractor::new(st, "s1.extractor", cfg);
        let refiner = DepthRefiner::new(st, "s1.refiner", cfg);
        let volume_net = SparseConvNet::new(st, "s1.volume", cfg.depth_feature_channels, cfg);
        let spd = Spd::new(st, "s1.spd", cfg.image_feature_channels + cfg.fused_channels(), cfg);
        let coarse_head = GaussianHead::new(st, "s1.head", cfg.spd_channels + cfg.image_feature_channels, cfg);
        let fine_refiner = if cfg.share_refiner { refiner.clone() } else { DepthRefiner::new(st, "s2.refiner", cfg) };
        let latent_volume_net = SparseConvNet::new(st, "s2.volume", cfg.spd_channels, cfg);
        let offset_head = OffsetHead::new(st, "s2.offset", cfg.fused_channels(), cfg);
        let fine_head = GaussianHead::new(st, "s2.head", cfg.depth_feature_channels + cfg.image_feature_channels, cfg);
        let fine_extractor = cfg.fresh_fine_extractor.then(|| ImageExtractor::new(st, "s2.extractor", cfg));
        Ok(Self {
            config: cfg.clone(),
            seed,
            store,
            extractor,
            refiner,
            volume_net,
            spd,
            coarse_head,
            fine_refiner,
            latent_volume_net,
            offset_head,
            fine_head,
            fine_extractor,
            semantic: RandomConvEncoder::new(cfg.semantic_seed, cfg.semantic_dim),
        })
    }

    /// Freeze (or unfreeze) every coarse-stage parameter.
    pub fn freeze_stage1(&mut self, frozen: bool) -> usize {
        self.store.set_frozen_prefix(STAGE1_PREFIX, frozen)
    }

    /// SHA-256 over the raw bytes of every parameter whose name starts
    /// with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.store.ids_with_prefix(prefix) {
            h.update(self.store.name(id).as_bytes());
            for v in self.store.get(id).data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_offsets_cover_the_cube() {
        let all: std::collections::HashSet<[i32; 3]> = (0..27).map(kernel_offset).collect();
        assert_eq!(all.len(), 27);
        assert_eq!(kernel_offset(13), [0, 0, 0]);
    }

    #[test]
    fn strided_rules_halve_coordinates() {
        let set = ActiveSet::from_coords(vec![[0, 0, 0], [1, 0, 0], [4, 4, 4]]);
        let (rules, next) = set.strided_rules();
        assert!(next.index.contains_key(&[0, 0, 0]) && next.index.contains_key(&[2, 2, 2]));
        // [1,0,0] with offset +1 along x lands on output [0,0,0] and with
        // offset -1 on output [1,0,0].
        assert!(next.index.contains_key(&[1, 0, 0]));
        assert_eq!(rules.n_out, next.coords.len());
    }

    #[test]
    fn default_fused_width() {
        assert_eq!(NetConfig::default().fused_channels(), 352);
    }
}
