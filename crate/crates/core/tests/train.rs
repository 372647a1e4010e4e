use accvit::harness::train::untouched_after_one_step;
use accvit::harness::{train_toy, ToySpec, TrainConfig};
use accvit::Error;

fn small() -> TrainConfig {
    TrainConfig {
        variant: "micro2".into(),
        data: ToySpec { n_samples: 40, image_size: 16, ..Default::default() },
        epochs: 3,
        batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_trajectory() {
    let a = train_toy(&small(), None, |_| {}).unwrap();
    let b = train_toy(&small(), None, |_| {}).unwrap();
    assert_eq!(a, b);
    let c = train_toy(&TrainConfig { seed: 1, ..small() }, None, |_| {}).unwrap();
    assert_ne!(a.epochs, c.epochs);
}

#[test]
fn first_epoch_loss_is_near_ln2() {
    let r = train_toy(&TrainConfig { epochs: 1, ..small() }, None, |_| {}).unwrap();
    assert!((r.epochs[0].loss - std::f64::consts::LN_2).abs() <= 0.1, "{}", r.epochs[0].loss);
}

#[test]
fn zero_lr_stays_at_chance() {
    let r = train_toy(&TrainConfig { lr: 0.0, epochs: 2, ..small() }, None, |_| {}).unwrap();
    // The zero-initialized head never moves, so every image gets class 0.
    for m in &r.epochs {
        assert_eq!(m.train_acc, 0.5);
        assert!((m.loss - std::f64::consts::LN_2).abs() < 1e-6);
    }
}

#[test]
fn every_parameter_with_gradient_moves() {
    assert!(untouched_after_one_step(&small()).unwrap().is_empty());
    assert!(untouched_after_one_step(&TrainConfig { variant: "micro".into(), data: ToySpec { image_size: 64, ..small().data }, ..small() })
        .unwrap()
        .is_empty());
}

#[test]
fn frozen_gates_do_not_move() {
    let dir = tempfile::tempdir().unwrap();
    let r = train_toy(&TrainConfig { freeze_gates: true, epochs: 1, ..small() }, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(r.epochs.len(), 1);
    let saved: TrainConfig = TrainConfig::from_json(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert!(saved.freeze_gates);
}

#[test]
fn divergence_names_the_epoch() {
    let cfg = TrainConfig { lr: 1e30, label_smoothing: 0.0, ..small() };
    match train_toy(&cfg, None, |_| {}) {
        Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rejects_invalid_configs() {
    for bad in [
        TrainConfig { epochs: 0, ..small() },
        TrainConfig { lr: f64::NAN, ..small() },
        TrainConfig { label_smoothing: 1.0, ..small() },
        TrainConfig { init_std: 0.0, ..small() },
        TrainConfig { variant: "huge".into(), ..small() },
    ] {
        assert!(matches!(train_toy(&bad, None, |_| {}), Err(Error::Config(_))), "{bad:?}");
    }
    assert!(TrainConfig::from_json(r#"{"epoch": 3}"#).is_err());
    let parsed = TrainConfig::from_json(r#"{"epochs": 7}"#).unwrap();
    assert_eq!(parsed, TrainConfig { epochs: 7, ..TrainConfig::default() });
}
