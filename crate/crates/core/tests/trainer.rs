mod common;

use asap::audit::{dead_parameters, randomized_net};
use asap::data::{batch, generate_scene, Image, LabelMap, SceneSpec};
use asap::network::{BackboneConfig, NetConfig};
use asap::train::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, train_loop, train_step, train_until,
    TraceRecord, TrainConfig, TrainState,
};

fn small_net() -> NetConfig {
    NetConfig {
        backbone: BackboneConfig {
            stage_channels: [4, 8, 8, 16],
            blocks_per_stage: 1,
        },
        fpn_width: 8,
        ..NetConfig::default()
    }
}

fn scenes(n: u64) -> Vec<(Image, LabelMap)> {
    let spec = SceneSpec { width: 64, height: 32, ..SceneSpec::default() };
    (0..n).map(|i| generate_scene(&spec, i).unwrap()).collect()
}

fn cfg(max_steps: u64, seed: u64) -> TrainConfig {
    TrainConfig { max_steps, seed, eval_every: 2, ..TrainConfig::default() }
}

#[test]
fn loss_on_a_fixed_batch_goes_down() {
    let data = scenes(4);
    let refs: Vec<(&Image, &LabelMap)> = data.iter().map(|(i, l)| (i, l)).collect();
    let (images, labels) = batch(&refs).unwrap();
    let cfg = cfg(200, 0);
    let mut state = TrainState::new(small_net(), 0).unwrap();
    let losses: Vec<f64> = (0..200)
        .map(|step| train_step(&mut state, &images, &labels, cfg.lr_at(step), &cfg).unwrap())
        .collect();
    let first = losses[..10].iter().sum::<f64>() / 10.0;
    let last = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first:.4} -> {last:.4}");
}

#[test]
fn same_seed_gives_the_same_trace() {
    let data = scenes(8);
    let (train, val) = data.split_at(6);
    let run = |seed| {
        let mut state = TrainState::new(small_net(), seed).unwrap();
        train_loop(&mut state, train, val, &cfg(6, seed), |_| {}).unwrap()
    };
    let a = run(3);
    assert_eq!(a.len(), 6);
    assert_eq!(a.iter().filter(|r| r.miou.is_some()).count(), 3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let data = scenes(8);
    let (train, val) = data.split_at(6);
    let cfg = cfg(7, 5);
    let mut whole = TrainState::new(small_net(), 5).unwrap();
    let full = train_loop(&mut whole, train, val, &cfg, |_| {}).unwrap();

    let mut first = TrainState::new(small_net(), 5).unwrap();
    let mut trace = train_until(&mut first, train, val, &cfg, 3, |_| {}).unwrap();
    assert_eq!(first.step, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &first).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap();
    trace.extend(train_loop(&mut resumed, train, val, &cfg, |_| {}).unwrap());

    assert_eq!(trace, full);
    assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&whole));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let data = scenes(6);
    let mut state = TrainState::new(small_net(), 2).unwrap();
    train_loop(&mut state, &data, &[], &cfg(2, 2), |_| {}).unwrap();
    let bytes = encode_checkpoint(&state);
    assert_eq!(&bytes[..4], b"ASAP");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(back.sgd, state.sgd);
    assert_eq!(back.net.config, state.net.config);
    for (a, b) in back.net.params.entries().iter().zip(state.net.params.entries()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()));
    }
    assert_eq!(encode_checkpoint(&back), bytes);
}

#[test]
fn zero_steps_keep_the_initial_state() {
    let data = scenes(2);
    let mut state = TrainState::new(small_net(), 9).unwrap();
    let before = encode_checkpoint(&state);
    let trace: Vec<TraceRecord> = train_loop(&mut state, &data, &data, &cfg(0, 9), |_| {}).unwrap();
    assert!(trace.is_empty());
    assert_eq!(encode_checkpoint(&state), before);
}

#[test]
fn every_parameter_receives_gradient() {
    let net = randomized_net(&small_net(), 1).unwrap();
    let mut r = common::rng(1);
    let image = common::uniform(&[2, 3, 32, 64], 0.0, 1.0, &mut r);
    let labels = common::labels(2 * 32 * 64, 5, 0.05, &mut r);
    let dead = dead_parameters(&net, &image, &labels).unwrap();
    assert!(dead.is_empty(), "{dead:?}");
}
