mod common;

use common::{tiny_config, tiny_scene};
use humangs::error::Error;
use humangs::pipeline::{
    evaluate, evaluate_identity, losses_from_csv, losses_to_csv, train_stage1, train_stage2, Checkpoint, TrainConfig, CHECKPOINT_VERSION,
};

#[test]
fn config_json_round_trip_and_key_checks() {
    let cfg = tiny_config();
    assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    // Missing keys fall back to desk defaults.
    let partial = TrainConfig::from_json(r#"{"iterations": 7, "l1": 0.5}"#).unwrap();
    assert_eq!(partial.iterations, 7);
    assert_eq!(partial.weights.l1, 0.5);
    assert_eq!(partial.learning_rate, 1e-4);
    assert!(matches!(TrainConfig::from_json(r#"{"iteratoins": 7}"#), Err(Error::Config(_))));
    assert!(TrainConfig::from_json(r#"{"stage": 3}"#).is_err());
    let o = cfg.with_override("learning_rate", "3e-4").unwrap().with_override("mask_norm", "Raw").unwrap();
    assert_eq!((o.learning_rate, o.mask_norm), (3e-4, humangs::objective::MaskNorm::Raw));
    assert!(cfg.with_override("mask_norm", "Cubic").is_err());
    assert_eq!(cfg.with_override("seed", "9").unwrap().seed, 9);
    assert!(cfg.with_override("nope", "1").is_err());
    assert_eq!(TrainConfig::full().net, humangs::networks::NetConfig::default());
    assert_eq!(TrainConfig::full().learning_rate, 1e-4);
}

#[test]
fn loss_log_round_trips_exactly() {
    let mut ck = Checkpoint::initial(&tiny_config()).unwrap();
    train_stage1(&mut ck, &[tiny_scene(1)], None).unwrap();
    assert_eq!(ck.losses.len(), 4);
    assert_eq!(losses_from_csv(&losses_to_csv(&ck.losses)).unwrap(), ck.losses);
    assert_eq!(ck.losses.iter().map(|r| r.phase).collect::<String>(), "ABBB");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = [tiny_scene(2)];
    let run = |seed: u64| {
        let mut ck = Checkpoint::initial(&TrainConfig { seed, ..tiny_config() }).unwrap();
        train_stage1(&mut ck, &data, None).unwrap();
        ck
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params_bytes(), b.params_bytes());
    assert_ne!(a.losses, c.losses);
}

#[test]
fn zero_iterations_leave_parameters_untouched() {
    let cfg = TrainConfig { iterations: 0, ..tiny_config() };
    let mut ck = Checkpoint::initial(&cfg).unwrap();
    let before = ck.params_bytes();
    let dir = tempfile::tempdir().unwrap();
    train_stage1(&mut ck, &[tiny_scene(1)], Some(dir.path())).unwrap();
    assert_eq!(ck.params_bytes(), before);
    assert!(ck.losses.is_empty());
    assert_eq!(Checkpoint::load(dir.path()).unwrap().iteration, 0);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let mut ck = Checkpoint::initial(&tiny_config()).unwrap();
    train_stage1(&mut ck, &[tiny_scene(3)], None).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ck.save(d1.path()).unwrap();
    Checkpoint::load(d1.path()).unwrap().save(d2.path()).unwrap();
    for f in ["params.bin", "optimizer.bin", "manifest.json", "loss.csv"] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let data = [tiny_scene(4)];
    let mut straight = Checkpoint::initial(&TrainConfig { iterations: 6, ..tiny_config() }).unwrap();
    train_stage1(&mut straight, &data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Checkpoint::initial(&TrainConfig { iterations: 3, ..tiny_config() }).unwrap();
    train_stage1(&mut first, &data, Some(dir.path())).unwrap();
    let mut resumed = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(resumed.iteration, 3);
    resumed.config.iterations = 6;
    train_stage1(&mut resumed, &data, Some(dir.path())).unwrap();
    assert_eq!(resumed.iteration, 6);
    assert_eq!(resumed.losses, straight.losses);
    assert_eq!(resumed.params_bytes(), straight.params_bytes());
}

#[test]
fn stage2_keeps_stage1_parameters_frozen() {
    let data = [tiny_scene(5)];
    let mut s1 = Checkpoint::initial(&tiny_config()).unwrap();
    train_stage1(&mut s1, &data, None).unwrap();
    let cfg2 = TrainConfig { stage: 2, iterations: 3, ..tiny_config() };
    let mut s2 = Checkpoint::stage2_from(&cfg2, &s1).unwrap();
    let frozen = s1.stage1_checksum();
    let stage2_before = s2.model.checksum("s2.");
    train_stage2(&mut s2, &data, None).unwrap();
    assert_eq!(s2.stage1_checksum(), frozen);
    assert_ne!(s2.model.checksum("s2."), stage2_before);
    assert!(s2.losses.iter().all(|r| r.phase == 'F' && r.loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    s2.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.stage, 2);
    assert_eq!(back.stage1_checksum(), frozen);

    // Stage-1 training refuses a stage-2 checkpoint and vice versa.
    assert!(train_stage1(&mut s2.clone(), &data, None).is_err());
    assert!(train_stage2(&mut s1.clone(), &data, None).is_err());
    let other = TrainConfig { stage: 2, net: humangs::pipeline::desk_net_config(), ..tiny_config() };
    assert!(matches!(Checkpoint::stage2_from(&other, &s1), Err(Error::Checkpoint(_))));
}

#[test]
fn nan_parameters_abort_training() {
    let mut ck = Checkpoint::initial(&TrainConfig { refiner_pretrain_iters: 0, ..tiny_config() }).unwrap();
    let id = ck.model.store.ids_with_prefix("s1.head").next().unwrap();
    ck.model.store.get_mut(id).data_mut().fill(f32::NAN);
    let err = train_stage1(&mut ck, &[tiny_scene(6)], None).unwrap_err();
    assert!(matches!(err, Error::Diverged { iteration: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_checkpoint_version_is_rejected() {
    let ck = Checkpoint::initial(&tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let m = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&m).unwrap();
    std::fs::write(&m, text.replace(&format!("\"format_version\": {CHECKPOINT_VERSION}"), "\"format_version\": 999")).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Version { found: 999, .. })));
    std::fs::write(dir.path().join("params.bin"), b"junk").unwrap();
    std::fs::write(&m, text).unwrap();
    assert_eq!(Checkpoint::load(dir.path()).err().map(|e| e.exit_code()), Some(3));
}

#[test]
fn evaluation_reports_rows_and_means() {
    let scenes = [tiny_scene(7), tiny_scene(8)];
    let id = evaluate_identity(&scenes).unwrap();
    assert_eq!(id.rows.len(), 2);
    assert!(id.rows.iter().all(|r| r.ssim == 1.0 && r.psnr == humangs::objective::PSNR_CAP_DB));
    let ck = Checkpoint::initial(&tiny_config()).unwrap();
    let rep = evaluate(&ck.model, &ck.config, &scenes).unwrap();
    assert_eq!(rep.rows.len(), 2);
    let mean = rep.rows.iter().map(|r| r.psnr).sum::<f64>() / 2.0;
    assert!((rep.mean_psnr - mean).abs() < 1e-12);
    let json: serde_json::Value = serde_json::to_value(&rep).unwrap();
    for k in ["scene", "view", "psnr", "ssim"] {
        assert!(json["rows"][0].get(k).is_some(), "{k}");
    }
}
