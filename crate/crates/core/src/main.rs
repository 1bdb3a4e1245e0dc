//! `humangs` command line: data generation, training, rendering, evaluation
//! and a fast self test.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use humangs::dataio::{
    depth_preview, encode_png, list_scenes, mean_surface_distance, read_scene, ring_scene, write_ply, write_scene, Misalignment,
    SceneSpec,
};
use humangs::error::{Error, Result};
use humangs::pipeline::{evaluate, evaluate_identity, infer, train_stage1, train_stage2, Checkpoint, TrainConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "humangs", version, about = "Template-guided multi-view human Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic capsule-body scenes.
    GenData(GenData),
    /// Train stage 1 or stage 2. Every config key is also a flag
    /// (`--learning_rate 3e-4`); flags override the config file.
    Train(Train),
    /// Render one view of a scene with a trained checkpoint.
    Render(Render),
    /// Score held-out views of every scene in a directory.
    Eval(Eval),
    /// Run the fast invariant suite.
    Selftest(Selftest),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Cameras on the ring per scene.
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Evenly spaced input views among them.
    #[arg(long, default_value_t = 4)]
    sources: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    /// Template translation along +x, centimeters.
    #[arg(long, default_value_t = 0.0)]
    misalign: f64,
    /// Template joint-angle noise, degrees.
    #[arg(long, default_value_t = 0.0)]
    joint_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_parser = ["1", "2"])]
    stage: String,
    /// Flat JSON config; missing keys take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    preset: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint up to the configured iteration count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    stage1: Option<PathBuf>,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    target_view: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the coarse render, refined depths and point clouds next
    /// to the output image.
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score each ground-truth image against itself (metric sanity check).
    #[arg(long)]
    identity: bool,
}

#[derive(Args)]
struct Selftest {
    /// Corrupt the rasterizer backward pass (negative control).
    #[arg(long)]
    inject_grad_fault: bool,
}

/// Config keys exposed as `train` flags (`stage` has its own flag).
fn config_flags() -> Vec<String> {
    TrainConfig::keys().into_iter().filter(|k| k != "stage").collect()
}

fn command() -> clap::Command {
    let keys = config_flags();
    Cli::command().mut_subcommand("train", |mut c| {
        for k in keys {
            let id: &'static str = Box::leak(k.into_boxed_str());
            c = c.arg(clap::Arg::new(id).long(id).value_name("VALUE").help_heading("Config overrides"));
        }
        c
    })
}

#[derive(Serialize)]
struct SceneSummary {
    scene: String,
    views: usize,
    source_views: Vec<usize>,
    held_out_views: Vec<usize>,
    template_points: usize,
    template_surface_distance_m: f64,
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut summary = Vec::new();
    for i in 0..a.scenes {
        let id = format!("scene_{i:03}");
        let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let misalignment = Misalignment { translation: [a.misalign / 100.0, 0.0, 0.0], scale: 1.0, joint_noise_deg: a.joint_noise, seed };
        let spec = SceneSpec { misalignment, ..SceneSpec::random(seed) };
        let scene = ring_scene(&spec, a.views, a.sources, a.size, &id)?;
        write_scene(&scene, &a.out.join(&id))?;
        summary.push(SceneSummary {
            template_surface_distance_m: mean_surface_distance(&spec, &scene.template.positions),
            scene: id,
            views: scene.views.len(),
            source_views: scene.source_views,
            held_out_views: scene.held_out_views,
            template_points: scene.template.len(),
        });
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let path = a.out.join("manifest.json");
    std::fs::write(&path, &text).map_err(|e| Error::Io { path, source: e })?;
    println!("{text}");
    Ok(())
}

fn load_scenes(dir: &Path) -> Result<Vec<humangs::dataio::MultiViewSample>> {
    let dirs = list_scenes(dir)?;
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no scene directories under {}", dir.display())));
    }
    dirs.iter().map(|d| read_scene(d)).collect()
}

fn train(a: &Train, m: &ArgMatches) -> Result<()> {
    let stage: u8 = a.stage.parse().expect("validated by clap");
    if stage == 2 && a.stage1.is_none() && a.resume.is_none() {
        return Err(Error::InvalidInput("--stage 2 requires --stage1 CKPT".into()));
    }
    let base = match (&a.config, &a.resume) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(ck)) => Checkpoint::load(ck)?.config,
        (None, None) => TrainConfig::preset(&a.preset)?,
    };
    let mut cfg = TrainConfig { stage, ..base };
    for k in config_flags() {
        if let Some(v) = m.get_one::<String>(&k) {
            cfg = cfg.with_override(&k, v)?;
        }
    }
    cfg.validate()?;
    let data = load_scenes(&a.data)?;
    let mut ck = match (&a.resume, stage) {
        (Some(dir), _) => {
            let mut ck = Checkpoint::load(dir)?;
            if ck.stage != stage {
                return Err(Error::Checkpoint(format!("resuming a stage-{} checkpoint as stage {stage}", ck.stage)));
            }
            if ck.config.net != cfg.net {
                return Err(Error::Checkpoint("network configuration differs from the checkpoint".into()));
            }
            ck.config = cfg;
            ck
        }
        (None, 1) => Checkpoint::initial(&cfg)?,
        (None, _) => Checkpoint::stage2_from(&cfg, &Checkpoint::load(a.stage1.as_ref().expect("checked"))?)?,
    };
    if stage == 1 {
        train_stage1(&mut ck, &data, Some(&a.out))?;
    } else {
        train_stage2(&mut ck, &data, Some(&a.out))?;
    }
    let last = ck.losses.last().map_or(f64::NAN, |r| r.loss);
    println!("stage {stage}: {} iterations, final loss {last:.6}, checkpoint {}", ck.iteration, a.out.display());
    Ok(())
}

fn render(a: &Render) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let scene = read_scene(&a.scene)?;
    let n = scene.views.len();
    if a.target_view >= n {
        return Err(Error::InvalidInput(format!("--target-view {} out of range; valid views are 0..={}", a.target_view, n - 1)));
    }
    let inf = infer(&ck.model, &ck.config, &scene, &scene.views[a.target_view].camera)?;
    encode_png(&a.out, &inf.fine_render.color_image())?;
    if a.dump_intermediates {
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("render").to_string();
        let sibling = |suffix: &str| a.out.with_file_name(format!("{stem}_{suffix}"));
        encode_png(&sibling("coarse.png"), &inf.coarse_render.color_image())?;
        for (slot, &k) in scene.source_views.iter().enumerate() {
            encode_png(&sibling(&format!("refined_depth_view{k:03}.png")), &depth_preview(&inf.prior.refined_template_depths[slot]))?;
            encode_png(&sibling(&format!("refined_coarse_depth_view{k:03}.png")), &depth_preview(&inf.fine.refined_coarse_depths[slot]))?;
        }
        write_ply(&sibling("template_points.ply"), &scene.template.positions)?;
        write_ply(&sibling("prior_points.ply"), &inf.prior.prior_points.positions)?;
        write_ply(&sibling("pixelwise_points.ply"), &inf.fine.pixelwise_points.positions)?;
        write_ply(&sibling("final_points.ply"), &inf.fine.final_points.positions)?;
    }
    println!("rendered view {} of {} in {:.2} s to {}", a.target_view, scene.scene_id, inf.seconds, a.out.display());
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let report = if a.identity {
        evaluate_identity(&scenes)?
    } else {
        let path = a.ckpt.as_ref().ok_or_else(|| Error::InvalidInput("eval needs --ckpt unless --identity is given".into()))?;
        let ck = Checkpoint::load(path)?;
        evaluate(&ck.model, &ck.config, &scenes)?
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&a.out, &text).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    println!("{} rows, mean PSNR {:.3} dB, mean SSIM {:.4}", report.rows.len(), report.mean_psnr, report.mean_ssim);
    Ok(())
}

fn selftest(a: &Selftest) -> ExitCode {
    let t = std::time::Instant::now();
    let results = humangs::selftest::run(a.inject_grad_fault);
    for r in &results {
        println!("{:<24} {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, {:.1} s", results.len(), t.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, matches.subcommand_matches("train").expect("train matches")),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => return selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
