//! Two-stage training, checkpoints, inference and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use gradtape::{AdamW, AdamWConfig, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::MultiViewSample;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::networks::{ModelParams, NetConfig, RefinedDepth, STAGE1_PREFIX};
use crate::objective::{
    depth_loss_var, l1_loss_var, mask_loss_var, psnr, semantic_loss_var, ssim_loss_var, ssim_metric, stage1_loss_var, stage2_loss_var,
    LossWeights, MaskNorm,
};
use crate::prior::{predict_prior_points, predict_prior_vars, refine_template_depths, template_depths, PriorConfig, PriorResult};
use crate::rasterizer::{rasterize_with_state, render_vars, RasterConfig, RenderOutput};
use crate::refine::{regress_fine_vars, FineConfig, FineResult};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Every training knob. Serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    /// Total iterations of the stage, including refiner pretraining.
    pub iterations: usize,
    /// Stage-1 iterations that train the depth refiner alone.
    pub refiner_pretrain_iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Apply the semantic term while pretraining the refiner.
    pub semantic_in_pretrain: bool,
    pub mask_norm: MaskNorm,
    /// Rendered alpha above which a depth pixel counts as valid.
    pub alpha_threshold: f64,
    pub log_every: usize,
    /// Save to the output directory every this many iterations (0: only at
    /// the end).
    pub checkpoint_every: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(flatten)]
    pub net: NetConfig,
    #[serde(flatten)]
    pub prior: PriorConfig,
    #[serde(flatten)]
    pub fine: FineConfig,
}

/// Reduced widths for CPU-only desk runs.
pub fn desk_net_config() -> NetConfig {
    NetConfig {
        unet_widths: [16, 32, 64],
        sparse_widths: [8, 16, 32, 32],
        spd_channels: 32,
        head_hidden: 64,
        offset_hidden: 64,
        ..NetConfig::default()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Single-scene desk schedule with reduced widths.
    pub fn desk() -> Self {
        Self {
            stage: 1,
            iterations: 2000,
            refiner_pretrain_iters: 200,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 1,
            seed: 0,
            semantic_in_pretrain: true,
            mask_norm: MaskNorm::Rms,
            alpha_threshold: RasterConfig::default().alpha_threshold,
            log_every: 100,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            net: desk_net_config(),
            prior: PriorConfig::default(),
            fine: FineConfig::default(),
        }
    }

    /// Full-width networks and the long dataset-scale schedule.
    pub fn full() -> Self {
        Self { iterations: 200_000, refiner_pretrain_iters: 20_000, net: NetConfig::default(), ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_threshold) {
            return Err(Error::Config("alpha_threshold must lie in [0, 1)".into()));
        }
        if !(self.prior.splat_radius_px > 0.0 && self.prior.visibility_tau > 0.0) || self.fine.unproject_stride == 0 {
            return Err(Error::Config("splat radius, visibility tau and stride must be positive".into()));
        }
        self.weights.validate()?;
        self.net.validate()
    }

    pub fn raster(&self) -> RasterConfig {
        RasterConfig { alpha_threshold: self.alpha_threshold, ..RasterConfig::default() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    /// Parse a flat JSON object; keys not listed here are rejected and
    /// missing keys take desk defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(v)
    }

    fn from_value(v: serde_json::Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let known = Self::keys();
        if let Some(bad) = obj.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("unknown config key {bad:?}")));
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Override one key with a value written as JSON (bare words are taken
    /// as strings).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        if !obj.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        obj.insert(key.to_string(), parsed);
        Self::from_value(v)
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: u8,
    /// `A` refiner pretraining, `B` joint coarse training, `F` fine stage.
    pub phase: char,
    pub scene: usize,
    pub target_view: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub depth: f64,
    pub semantic: f64,
}

const CSV_HEADER: &str = "iteration,stage,phase,scene,target_view,loss,l1,ssim,mask,depth,semantic";

pub fn losses_to_csv(rows: &[LossRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration, r.stage, r.phase, r.scene, r.target_view, r.loss, r.l1, r.ssim, r.mask, r.depth, r.semantic
        );
    }
    s
}

pub fn losses_from_csv(text: &str) -> Result<Vec<LossRecord>> {
    let bad = |line: usize| Error::Checkpoint(format!("malformed loss log line {line}"));
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Checkpoint("loss log header mismatch".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 11 {
                return Err(bad(i + 2));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 2));
            let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(i + 2));
            Ok(LossRecord {
                iteration: int(0)?,
                stage: f[1].parse().map_err(|_| bad(i + 2))?,
                phase: f[2].chars().next().ok_or_else(|| bad(i + 2))?,
                scene: int(3)?,
                target_view: int(4)?,
                loss: num(5)?,
                l1: num(6)?,
                ssim: num(7)?,
                mask: num(8)?,
                depth: num(9)?,
                semantic: num(10)?,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    stage: u8,
    iteration: usize,
    seed: u64,
    stage1_checksum: String,
    params_sha256: String,
    config: TrainConfig,
}

/// Parameters, optimizer state and progress of one training stage.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelParams,
    pub optimizer: AdamW,
    pub stage: u8,
    pub iteration: usize,
    pub losses: Vec<LossRecord>,
}

fn optimizer_for(cfg: &TrainConfig, model: &ModelParams) -> AdamW {
    let c = AdamWConfig { lr: cfg.learning_rate as f32, weight_decay: cfg.weight_decay as f32, ..AdamWConfig::default() };
    AdamW::new(c, &model.store)
}

impl Checkpoint {
    /// Freshly initialized stage-1 state.
    pub fn initial(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelParams::new(&cfg.net, cfg.seed)?;
        let optimizer = optimizer_for(cfg, &model);
        Ok(Self { config: cfg.clone(), model, optimizer, stage: 1, iteration: 0, losses: Vec::new() })
    }

    /// Stage-2 state on top of a stage-1 checkpoint: coarse parameters
    /// frozen, fresh optimizer.
    pub fn stage2_from(cfg: &TrainConfig, stage1: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if stage1.stage != 1 {
            return Err(Error::Checkpoint(format!("expected a stage-1 checkpoint, found stage {}", stage1.stage)));
        }
        if cfg.net != stage1.config.net {
            return Err(Error::Checkpoint("network configuration differs from the stage-1 checkpoint".into()));
        }
        let mut model = stage1.model.clone();
        model.freeze_stage1(true);
        let optimizer = optimizer_for(cfg, &model);
        Ok(Self { config: Self::with_stage(cfg, 2), model, optimizer, stage: 2, iteration: 0, losses: Vec::new() })
    }

    fn with_stage(cfg: &TrainConfig, stage: u8) -> TrainConfig {
        TrainConfig { stage, ..cfg.clone() }
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        self.model.store.to_bytes()
    }

    pub fn stage1_checksum(&self) -> String {
        self.model.checksum(STAGE1_PREFIX)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = self.params_bytes();
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            stage: self.stage,
            iteration: self.iteration,
            seed: self.config.seed,
            stage1_checksum: self.stage1_checksum(),
            params_sha256: hex(&Sha256::digest(&params)),
            config: self.config.clone(),
        };
        let write = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| Error::io(dir.join(name), e));
        write("params.bin", &params)?;
        write("optimizer.bin", &self.optimizer.to_bytes())?;
        write("loss.csv", losses_to_csv(&self.losses).as_bytes())?;
        write("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| fs::read(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));
        let mpath = dir.join("manifest.json");
        let raw: serde_json::Value = serde_json::from_slice(&read("manifest.json")?).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::corrupt(&mpath, "missing format_version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version { path: mpath, found: version as u32, expected: CHECKPOINT_VERSION });
        }
        let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
        m.config.validate()?;
        let params = read("params.bin")?;
        if hex(&Sha256::digest(&params)) != m.params_sha256 {
            return Err(Error::corrupt(dir.join("params.bin"), "checksum mismatch"));
        }
        let mut model = ModelParams::new(&m.config.net, m.config.seed)?;
        model.store.load_bytes(&params).map_err(|e| Error::corrupt(dir.join("params.bin"), e))?;
        let mut optimizer = optimizer_for(&m.config, &model);
        optimizer.load_bytes(&read("optimizer.bin")?).map_err(|e| Error::corrupt(dir.join("optimizer.bin"), e))?;
        let csv = String::from_utf8(read("loss.csv")?).map_err(|_| Error::corrupt(dir.join("loss.csv"), "not UTF-8"))?;
        Ok(Self { config: m.config, model, optimizer, stage: m.stage, iteration: m.iteration, losses: losses_from_csv(&csv)? })
    }
}

/// Deterministic `(scene, target view)` draw for iteration `it`, item `b`.
fn draw(seed: u64, it: usize, b: usize, data: &[MultiViewSample]) -> (usize, usize) {
    let mix = seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let si = rng.random_range(0..data.len());
    let targets = data[si].training_targets();
    (si, targets[rng.random_range(0..targets.len())])
}

fn mean_vars(s: &Session, vs: &[Var]) -> Var {
    let w = vec![1.0 / vs.len().max(1) as f32; vs.len()];
    if vs.is_empty() {
        s.constant(Tensor::scalar(0.0))
    } else {
        s.weighted_sum(vs, &w)
    }
}

/// Mean depth-consistency and semantic terms over the views.
fn refiner_terms(s: &Session, model: &ModelParams, sample: &MultiViewSample, inputs: &[DepthMap], refined: &[RefinedDepth], semantic: bool) -> Result<(Var, Var)> {
    let mut d = Vec::new();
    let mut sem = Vec::new();
    for ((input, r), view) in inputs.iter().zip(refined).zip(sample.sources()) {
        let (l, empty) = depth_loss_var(s, input, r.depth)?;
        if !empty {
            d.push(l);
        }
        if semantic {
            sem.push(semantic_loss_var(s, &model.semantic, &view.image.to_tensor(), r.depth, &r.valid)?);
        }
    }
    Ok((mean_vars(s, &d), mean_vars(s, &sem)))
}

fn check_data(data: &[MultiViewSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    for d in data {
        d.validate()?;
        if d.training_targets().is_empty() {
            return Err(Error::InvalidInput(format!("scene {} has no training views", d.scene_id)));
        }
    }
    Ok(())
}

fn finish_step(ckpt: &mut Checkpoint, loss: f64, grads: &[Option<Tensor>], rec: LossRecord) -> Result<()> {
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::Diverged { iteration: rec.iteration, loss: loss as f32 });
    }
    ckpt.optimizer.step(&mut ckpt.model.store, grads);
    ckpt.iteration += 1;
    let every = ckpt.config.log_every;
    if every > 0 && rec.iteration.is_multiple_of(every) {
        log::info!("stage {} iter {} phase {} loss {:.5}", rec.stage, rec.iteration, rec.phase, rec.loss);
    }
    ckpt.losses.push(rec);
    Ok(())
}

fn maybe_save(ckpt: &Checkpoint, out: Option<&Path>, total: usize) -> Result<()> {
    let every = ckpt.config.checkpoint_every;
    if let Some(dir) = out {
        if ckpt.iteration == total || (every > 0 && ckpt.iteration.is_multiple_of(every)) {
            ckpt.save(dir)?;
        }
    }
    Ok(())
}

/// Stage 1: refiner pretraining, then joint training of every coarse-stage
/// network against a random training view per iteration. Resumes from
/// `ckpt.iteration`; saves into `out` when given.
pub fn train_stage1(ckpt: &mut Checkpoint, data: &[MultiViewSample], out: Option<&Path>) -> Result<()> {
    check_data(data)?;
    if ckpt.stage != 1 {
        return Err(Error::Checkpoint(format!("stage-1 training on a stage-{} checkpoint", ckpt.stage)));
    }
    let cfg = ckpt.config.clone();
    let raster = cfg.raster();
    let depth_cache: Vec<Vec<DepthMap>> = data.iter().map(|d| template_depths(d, &cfg.prior)).collect::<Result<_>>()?;
    let w = cfg.weights;
    while ckpt.iteration < cfg.iterations {
        let it = ckpt.iteration;
        let pretrain = it < cfg.refiner_pretrain_iters;
        let s = Session::new(&ckpt.model.store);
        let model = &ckpt.model;
        let mut items = Vec::with_capacity(cfg.batch_size);
        let mut parts_sum = [0.0f64; 5];
        let mut first = (0, 0);
        for b in 0..cfg.batch_size {
            let (si, vi) = draw(cfg.seed, it, b, data);
            if b == 0 {
                first = (si, vi);
            }
            let sample = &data[si];
            let (loss, parts) = if pretrain {
                let refined = refine_template_depths(&s, model, sample, &depth_cache[si])?;
                let (d, sem) = refiner_terms(&s, model, sample, &depth_cache[si], &refined, cfg.semantic_in_pretrain)?;
                let zero = s.constant(Tensor::scalar(0.0));
                let parts = [zero, zero, zero, d, sem];
                (stage1_loss_var(&s, parts, &w), parts)
            } else {
                let prior = predict_prior_vars(&s, model, sample, &cfg.prior)?;
                let target = &sample.views[vi];
                let r = render_vars(&s, &prior.coarse, &target.camera, &raster)?;
                let gt = target.image.to_tensor();
                let l1 = l1_loss_var(&s, r.color, &gt)?;
                let ssim = ssim_loss_var(&s, r.color, &gt)?;
                let mask = mask_loss_var(&s, r.alpha, &target.mask.to_tensor(), cfg.mask_norm)?;
                let (d, sem) = refiner_terms(&s, model, sample, &prior.template_depths, &prior.refined, true)?;
                let parts = [l1, ssim, mask, d, sem];
                (stage1_loss_var(&s, parts, &w), parts)
            };
            for (acc, p) in parts_sum.iter_mut().zip(parts) {
                *acc += s.value(p).item() as f64 / cfg.batch_size as f64;
            }
            items.push(loss);
        }
        let loss = mean_vars(&s, &items);
        let value = s.value(loss).item() as f64;
        let grads = s.backward(loss);
        drop(s);
        let [l1, ssim, mask, depth, semantic] = parts_sum;
        let rec = LossRecord {
            iteration: it,
            stage: 1,
            phase: if pretrain { 'A' } else { 'B' },
            scene: first.0,
            target_view: first.1,
            loss: value,
            l1,
            ssim,
            mask,
            depth,
            semantic,
        };
        finish_step(ckpt, value, &grads, rec)?;
        maybe_save(ckpt, out, cfg.iterations)?;
    }
    if let Some(dir) = out {
        ckpt.save(dir)?;
    }
    Ok(())
}

/// Stage 2: coarse-stage parameters frozen, fine-stage networks trained on
/// the fine render of a random training view.
pub fn train_stage2(ckpt: &mut Checkpoint, data: &[MultiViewSample], out: Option<&Path>) -> Result<()> {
    check_data(data)?;
    if ckpt.stage != 2 {
        return Err(Error::Checkpoint(format!("stage-2 training on a stage-{} checkpoint", ckpt.stage)));
    }
    ckpt.model.freeze_stage1(true);
    let cfg = ckpt.config.clone();
    let raster = cfg.raster();
    let priors: Vec<PriorResult> = data.iter().map(|d| predict_prior_points(&ckpt.model, d, &cfg.prior)).collect::<Result<_>>()?;
    let w = cfg.weights;
    while ckpt.iteration < cfg.iterations {
        let it = ckpt.iteration;
        let s = Session::new(&ckpt.model.store);
        let model = &ckpt.model;
        let mut items = Vec::with_capacity(cfg.batch_size);
        let mut parts_sum = [0.0f64; 3];
        let mut first = (0, 0);
        for b in 0..cfg.batch_size {
            let (si, vi) = draw(cfg.seed, it, b, data);
            if b == 0 {
                first = (si, vi);
            }
            let sample = &data[si];
            let fine = regress_fine_vars(&s, model, sample, &priors[si], &cfg.prior, &cfg.fine, &raster)?;
            let target = &sample.views[vi];
            let r = render_vars(&s, &fine.fine, &target.camera, &raster)?;
            let gt = target.image.to_tensor();
            let l1 = l1_loss_var(&s, r.color, &gt)?;
            let ssim = ssim_loss_var(&s, r.color, &gt)?;
            let (d, _) = refiner_terms(&s, model, sample, &fine.coarse_depths, &fine.refined, false)?;
            let parts = [l1, ssim, d];
            for (acc, p) in parts_sum.iter_mut().zip(parts) {
                *acc += s.value(p).item() as f64 / cfg.batch_size as f64;
            }
            items.push(stage2_loss_var(&s, parts, &w));
        }
        let loss = mean_vars(&s, &items);
        let value = s.value(loss).item() as f64;
        let grads = s.backward(loss);
        drop(s);
        if let Some(id) = ckpt.model.store.ids_with_prefix(STAGE1_PREFIX).find(|id| grads[id.0].as_ref().is_some_and(|g| g.sq_norm() > 0.0)) {
            return Err(Error::Checkpoint(format!("frozen parameter {} received a gradient", ckpt.model.store.name(id))));
        }
        let [l1, ssim, depth] = parts_sum;
        let rec = LossRecord {
            iteration: it,
            stage: 2,
            phase: 'F',
            scene: first.0,
            target_view: first.1,
            loss: value,
            l1,
            ssim,
            mask: 0.0,
            depth,
            semantic: 0.0,
        };
        finish_step(ckpt, value, &grads, rec)?;
        maybe_save(ckpt, out, cfg.iterations)?;
    }
    if let Some(dir) = out {
        ckpt.save(dir)?;
    }
    Ok(())
}

/// Full forward pass and its intermediates.
pub struct Inference {
    pub prior: PriorResult,
    pub fine: FineResult,
    pub coarse_render: RenderOutput,
    pub fine_render: RenderOutput,
    pub seconds: f64,
}

/// Prior stage, fine stage and both renders of `target`.
pub fn infer(model: &ModelParams, cfg: &TrainConfig, sample: &MultiViewSample, target: &crate::geometry::CameraModel) -> Result<Inference> {
    let t = Instant::now();
    let raster = cfg.raster();
    let prior = predict_prior_points(model, sample, &cfg.prior)?;
    let coarse_render = rasterize_with_state(&prior.coarse_gaussians, target, &raster)?.output().clone();
    let fine = crate::refine::regress_fine(model, sample, &prior, &cfg.prior, &cfg.fine, &raster, target)?;
    let fine_render = fine.rendered_target.clone().expect("regress_fine renders the target");
    Ok(Inference { prior, fine, coarse_render, fine_render, seconds: t.elapsed().as_secs_f64() })
}

/// Coarse render of view `k` of a scene.
pub fn render_coarse(model: &ModelParams, cfg: &TrainConfig, sample: &MultiViewSample, k: usize) -> Result<RenderOutput> {
    let prior = predict_prior_points(model, sample, &cfg.prior)?;
    Ok(rasterize_with_state(&prior.coarse_gaussians, &sample.views[k].camera, &cfg.raster())?.output().clone())
}

/// One scored rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: String,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub coarse_psnr: f64,
    pub coarse_ssim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_coarse_psnr: f64,
    pub mean_coarse_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        // An empty report has NaN means, written as JSON null.
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| if rows.is_empty() { f64::NAN } else { rows.iter().map(f).sum::<f64>() / n };
        Self {
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_coarse_psnr: mean(|r| r.coarse_psnr),
            mean_coarse_ssim: mean(|r| r.coarse_ssim),
            rows,
        }
    }
}

/// Score fine and coarse renders of every held-out view.
pub fn evaluate(model: &ModelParams, cfg: &TrainConfig, scenes: &[MultiViewSample]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for sample in scenes {
        for &k in &sample.held_out_views {
            let view = &sample.views[k];
            let inf = infer(model, cfg, sample, &view.camera)?;
            let (fine, coarse) = (inf.fine_render.color_image(), inf.coarse_render.color_image());
            rows.push(EvalRow {
                scene: sample.scene_id.clone(),
                view: k,
                psnr: psnr(&fine, &view.image)?,
                ssim: ssim_metric(&fine, &view.image)?,
                coarse_psnr: psnr(&coarse, &view.image)?,
                coarse_ssim: ssim_metric(&coarse, &view.image)?,
                seconds: inf.seconds,
            });
        }
    }
    Ok(EvalReport::from_rows(rows))
}

/// Score each held-out ground-truth image against itself; a sanity check of
/// the metric plumbing.
pub fn evaluate_identity(scenes: &[MultiViewSample]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for sample in scenes {
        for &k in &sample.held_out_views {
            let img = &sample.views[k].image;
            let (p, s) = (psnr(img, img)?, ssim_metric(img, img)?);
            rows.push(EvalRow { scene: sample.scene_id.clone(), view: k, psnr: p, ssim: s, coarse_psnr: p, coarse_ssim: s, seconds: 0.0 });
        }
    }
    Ok(EvalReport::from_rows(rows))
}

/// Mean `|pred - gt|` over pixels valid in both maps (and in `region` when
/// given); `None` if no pixel qualifies.
pub fn depth_error(pred: &DepthMap, gt: &DepthMap, region: Option<&DepthMap>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.values().len() {
        if gt.validity()[i] && pred.validity()[i] && region.is_none_or(|r| r.validity()[i]) {
            sum += (pred.values()[i] as f64 - gt.values()[i] as f64).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Geometry and fit diagnostics of the prior stage on one scene.
#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// Mean coarse-render PSNR over the source views.
    pub source_coarse_psnr: f64,
    /// Mean template-depth error against ground truth over the source views.
    pub template_depth_error: f64,
    /// Refined template depth error on the same pixels.
    pub refined_depth_error: f64,
    /// Chamfer distance of the template and of the prior points to the
    /// analytic surface (scenes carrying their generator spec only).
    pub template_chamfer: Option<f64>,
    pub prior_chamfer: Option<f64>,
}

pub fn diagnostics(model: &ModelParams, cfg: &TrainConfig, sample: &MultiViewSample) -> Result<Diagnostics> {
    let prior = predict_prior_points(model, sample, &cfg.prior)?;
    let raster = cfg.raster();
    let (mut psnr_sum, mut terr, mut rerr, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (slot, view) in sample.sources().enumerate() {
        let out = rasterize_with_state(&prior.coarse_gaussians, &view.camera, &raster)?;
        psnr_sum += psnr(&out.output().color_image(), &view.image)?;
        let Some(gt) = &view.depth else { continue };
        let (t, r) = (&prior.template_depths[slot], &prior.refined_template_depths[slot]);
        if let (Some(a), Some(b)) = (depth_error(t, gt, Some(r)), depth_error(r, gt, Some(t))) {
            terr += a;
            rerr += b;
            n += 1;
        }
    }
    let nan_if_empty = |v: f64| if n == 0 { f64::NAN } else { v / n as f64 };
    const SURFACE_SAMPLES: usize = 4000;
    Ok(Diagnostics {
        source_coarse_psnr: psnr_sum / sample.source_views.len() as f64,
        template_depth_error: nan_if_empty(terr),
        refined_depth_error: nan_if_empty(rerr),
        template_chamfer: sample.spec.as_ref().map(|s| crate::dataio::chamfer_to_surface(s, &sample.template.positions, SURFACE_SAMPLES)),
        prior_chamfer: sample.spec.as_ref().map(|s| crate::dataio::chamfer_to_surface(s, &prior.prior_points.positions, SURFACE_SAMPLES)),
    })
}
