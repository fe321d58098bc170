mod common;

use candle_core::Device;
use common::{random_batch, tiny_config, tiny_dataset, tiny_f64};
use facecomp::flowcore::RandomTransform;
use facecomp::nn::to_vec_f64;
use facecomp::training::{
    checkpoint_bytes, load_checkpoint, load_groups, save_checkpoint, step_rng, Checkpoint, ParamGroup, TrainState,
    LOSS_TERMS,
};
use facecomp::Error;

fn params(state: &TrainState, group: Option<ParamGroup>) -> Vec<(String, Vec<f64>)> {
    state
        .model
        .store()
        .vars()
        .into_iter()
        .filter(|(n, _)| group.is_none() || ParamGroup::of_var(n) == group)
        .map(|(n, v)| (n, to_vec_f64(v.as_tensor()).unwrap()))
        .collect()
}

#[test]
fn loss_dict_has_seven_terms_summing_to_total() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let r = state.train_step(&random_batch(&cfg, 0)).unwrap();
    let names: Vec<&str> = r.terms.keys().map(String::as_str).collect();
    let mut expected = LOSS_TERMS.to_vec();
    expected.sort();
    assert_eq!(names, expected);
    let sum: f64 = r.terms.values().sum();
    assert!((sum - r.total).abs() <= 1e-6 * r.total.abs().max(1.0), "{sum} vs {}", r.total);
}

#[test]
fn gradient_audit_finds_no_leaks() {
    let cfg = tiny_f64();
    let state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let batch = random_batch(&cfg, 1);
    let out = state.model.generate(&batch.source, &batch.driving, true).unwrap();
    let mut rng = step_rng(0, 0, 2);
    let transform = RandomTransform::sample(&mut rng, cfg.train.batch_size, 0.05, 0.005, 5);
    let losses = state.generator_losses(&batch, &out, &transform).unwrap();
    let rows = state.gradient_audit(&losses).unwrap();
    assert_eq!(rows.len(), 7 * ParamGroup::ALL.len());
    let leaks: Vec<_> = rows.iter().filter(|r| r.violated()).collect();
    assert!(leaks.is_empty(), "{leaks:?}");
    // The motion code loss does train E_M/D_M and the codes.
    let reaches = |term: &str, group: &str| {
        rows.iter()
            .find(|r| r.term == term && r.group == group)
            .unwrap()
            .grad_norm
            > 0.0
    };
    assert!(reaches("vq_motion", "motion"));
    assert!(reaches("vq_motion", "codebooks"));
    assert!(reaches("vq_appearance", "codebooks"));
    assert!(reaches("recon", "estimator"));
}

#[test]
fn debug_audit_runs_inside_train_step() {
    let mut cfg = tiny_config();
    cfg.train.debug_every = 1;
    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    state.train_step(&random_batch(&cfg, 2)).unwrap();
}

#[test]
fn seeded_runs_are_identical() {
    let cfg = tiny_config();
    let data = tiny_dataset(32);
    let run = || {
        let mut s = TrainState::new(&cfg, &Device::Cpu).unwrap();
        s.train_on(&data, 3, |_| {}).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seeds_differ() {
    let data = tiny_dataset(32);
    let run = |seed| {
        let mut cfg = tiny_config();
        cfg.train.seed = seed;
        let mut s = TrainState::new(&cfg, &Device::Cpu).unwrap();
        s.train_on(&data, 1, |_| {}).unwrap()[0].total
    };
    assert_ne!(run(0), run(1));
}

#[test]
fn checkpoint_resume_continues_bit_exactly() {
    let cfg = tiny_config();
    let data = tiny_dataset(32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");

    let mut straight = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let all = straight.train_on(&data, 4, |_| {}).unwrap();

    let mut first = TrainState::new(&cfg, &Device::Cpu).unwrap();
    first.train_on(&data, 2, |_| {}).unwrap();
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path, &Device::Cpu).unwrap();
    assert_eq!(resumed.step, 2);
    assert_eq!(params(&resumed, None), params(&first, None));
    let rest = resumed.train_on(&data, 2, |_| {}).unwrap();
    assert_eq!(rest, all[2..].to_vec());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = tiny_config();
    let state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let bytes = checkpoint_bytes(&state).unwrap();
    assert!(Checkpoint::parse(&bytes).is_ok());

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::parse(&flipped), Err(Error::Checkpoint(_))));

    assert!(Checkpoint::parse(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::parse(b"not a checkpoint").is_err());
}

#[test]
fn partial_load_touches_only_requested_groups() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let mut donor_cfg = cfg.clone();
    donor_cfg.train.seed = 11;
    let donor = TrainState::new(&donor_cfg, &Device::Cpu).unwrap();
    save_checkpoint(&donor, &path).unwrap();

    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let before = params(&state, Some(ParamGroup::ImageDecoder));
    load_groups(&mut state, &path, &[ParamGroup::Codebooks]).unwrap();
    assert_eq!(
        params(&state, Some(ParamGroup::Codebooks)),
        params(&donor, Some(ParamGroup::Codebooks))
    );
    assert_eq!(params(&state, Some(ParamGroup::ImageDecoder)), before);
    assert_ne!(before, params(&donor, Some(ParamGroup::ImageDecoder)));
    assert_eq!(state.step, 0);
}

#[test]
fn shape_mismatch_leaves_state_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let mut other = tiny_config();
    other.model.encoder_channels = vec![16, 8];
    other.train.seed = 5;
    save_checkpoint(&TrainState::new(&other, &Device::Cpu).unwrap(), &path).unwrap();

    let mut state = TrainState::new(&tiny_config(), &Device::Cpu).unwrap();
    let before = params(&state, None);
    assert!(load_groups(&mut state, &path, &ParamGroup::ALL).is_err());
    assert_eq!(params(&state, None), before);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let batch = random_batch(&cfg, 4);
    let first = state.train_step(&batch).unwrap().recon_l1;
    let mut last = first;
    for _ in 0..15 {
        last = state.train_step(&batch).unwrap().recon_l1;
    }
    assert!(last < first, "{last} !< {first}");
}
