//! Short training run followed by held-out evaluation and a checkpoint
//! round trip.
//!
//! cargo run --release --example evaluate -- [ITERATIONS]

use humangs::dataio::{desk_scene, SceneSpec};
use humangs::pipeline::{evaluate, evaluate_identity, train_stage1, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: usize = std::env::args().nth(1).map_or(Ok(50), |a| a.parse())?;
    let scenes = vec![desk_scene(&SceneSpec::random(4), 4, 32, "eval")?];
    let cfg = TrainConfig { iterations, refiner_pretrain_iters: iterations / 10, log_every: 0, ..TrainConfig::desk() };
    let mut ck = Checkpoint::initial(&cfg)?;
    train_stage1(&mut ck, &scenes, None)?;
    let report = evaluate(&ck.model, &cfg, &scenes)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("identity PSNR {:.1} dB", evaluate_identity(&scenes)?.mean_psnr);

    let dir = std::env::temp_dir().join("humangs-example-eval");
    ck.save(&dir)?;
    let back = Checkpoint::load(&dir)?;
    println!("checkpoint round trip equal: {}", back.params_bytes() == ck.params_bytes());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
