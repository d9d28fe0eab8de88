use fastsal::network::init_weights;
use fastsal::trainer::{
    attach_teacher_hints, lr_schedule, sgd_step, synthetic_samples, train, train_step, LossKind, Sample, Sgd, TrainConfig,
};
use fastsal::{Error, ModelConfig, NetworkGraph, Shape, Tensor, Variant, WeightStore};
use proptest::prelude::*;

const H: usize = 32;
const W: usize = 32;

fn toy() -> (NetworkGraph, WeightStore) {
    let g = ModelConfig::new(Variant::Concat).with_width(0.25).build(Shape::new(1, 3, H, W)).unwrap();
    let w = init_weights(&g, 5);
    (g, w)
}

fn bits(s: &WeightStore) -> Vec<(String, Vec<u32>)> {
    s.iter().map(|(k, t)| (k.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn quick(loss: LossKind) -> TrainConfig {
    TrainConfig {
        loss,
        epochs: 2,
        batch_size: 2,
        base_lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_and_sgd_fixtures() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(&c, 0), 0.01);
    assert!((lr_schedule(&c, 20) - 1e-3).abs() < 1e-15);
    assert!((lr_schedule(&c, 70) - 1e-5).abs() < 1e-17);

    let mut w = Tensor::scalar(0.0f32);
    let mut v = Tensor::scalar(0.0f32);
    sgd_step(&mut w, &Tensor::scalar(1.0), &mut v, 1.0, 0.9).unwrap();
    assert_eq!(w.data()[0], -1.0);
    sgd_step(&mut w, &Tensor::scalar(1.0), &mut v, 1.0, 0.9).unwrap();
    assert!((w.data()[0] + 2.9).abs() < 1e-6);

    let mut w = Tensor::scalar(0.5f32);
    let mut v = Tensor::scalar(0.0f32);
    sgd_step(&mut w, &Tensor::scalar(0.0), &mut v, 0.3, 0.9).unwrap();
    assert_eq!(w.data()[0], 0.5);
    assert!(matches!(sgd_step(&mut w, &Tensor::scalar(f32::NAN), &mut v, 0.1, 0.9), Err(Error::Numeric(_))));
    assert_eq!(w.data()[0], 0.5);
}

proptest! {
    #[test]
    fn schedule_is_non_increasing(mut decays in prop::collection::btree_set(1..200usize, 0..5), factor in 0.01..1.0f64, base in 1e-5..1.0f64) {
        let cfg = TrainConfig {
            base_lr: base,
            decay_epochs: std::mem::take(&mut decays).into_iter().collect(),
            decay_factor: factor,
            ..TrainConfig::default()
        };
        prop_assert_eq!(lr_schedule(&cfg, 0), base);
        for e in 0..250 {
            prop_assert!(lr_schedule(&cfg, e + 1) <= lr_schedule(&cfg, e));
        }
    }
}

#[test]
fn config_validation() {
    let none = TrainConfig {
        use_gt: false,
        use_teacher: false,
        ..TrainConfig::default()
    };
    assert!(matches!(none.validate(), Err(Error::Config(_))));
    let unsorted = TrainConfig {
        decay_epochs: vec![30, 15],
        ..TrainConfig::default()
    };
    assert!(unsorted.validate().is_err());
}

#[test]
fn missing_targets_fail_before_training() {
    let (g, mut w) = toy();
    let before = bits(&w);
    let mut samples = synthetic_samples(2, H, W, 0);
    samples[1].gt = None;
    let err = train(&samples, &[], &quick(LossKind::Salgan), &g, &mut w).unwrap_err();
    assert!(err.to_string().contains("sample 1"), "{err}");
    let err = train(&samples, &[], &quick(LossKind::Hint), &g, &mut w).unwrap_err();
    assert!(err.to_string().contains("hint"), "{err}");
    assert_eq!(bits(&w), before);

    let teacher_only = TrainConfig {
        use_gt: false,
        ..quick(LossKind::Salgan)
    };
    train(&samples, &[], &teacher_only, &g, &mut w).unwrap();
}

#[test]
fn fully_frozen_training_leaves_weights_bit_identical() {
    let (g, mut w) = toy();
    let before = bits(&w);
    let cfg = TrainConfig {
        frozen: vec![String::new()],
        ..quick(LossKind::Salgan)
    };
    let log = train(&synthetic_samples(4, H, W, 1), &[], &cfg, &g, &mut w).unwrap();
    assert_eq!(log.step_losses.len(), 4);
    assert_eq!(bits(&w), before);
}

#[test]
fn hint_pretraining_only_touches_backbone_and_adaptation() {
    let (g, mut w) = toy();
    let teacher = init_weights(&g, 77);
    let mut samples = synthetic_samples(2, H, W, 2);
    attach_teacher_hints(&mut samples, &g, &teacher).unwrap();
    let before = w.clone();
    train(&samples, &[], &quick(LossKind::Hint), &g, &mut w).unwrap();
    let mut changed_backbone = false;
    for (name, t) in w.iter() {
        let same = t == before.get(name).unwrap();
        if name.starts_with("backbone.") && !same {
            changed_backbone = true;
        }
        if !(name.starts_with("backbone.") || name.starts_with("decoder.adapt")) {
            assert!(same, "{name} changed during hint pretraining");
        }
    }
    assert!(changed_backbone);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let samples = synthetic_samples(4, H, W, 3);
    let run = || {
        let (g, mut w) = toy();
        let log = train(&samples, &samples[..2], &quick(LossKind::DeepGaze), &g, &mut w).unwrap();
        (log, bits(&w))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(wa, wb);
    let csv = a.to_csv();
    assert!(csv.starts_with("epoch,lr,mean_loss,steps,val_nss,val_cc\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(a.epochs.iter().all(|e| e.val_cc.is_some_and(f64::is_finite)));
}

fn loss_after_tiny_step(seed: u64, loss: LossKind) -> (f64, f64) {
    let g = ModelConfig::new(Variant::Concat).with_width(0.25).build(Shape::new(1, 3, 64, 64)).unwrap();
    let mut w = init_weights(&g, seed);
    let samples: Vec<Sample> = synthetic_samples(4, 64, 64, seed);
    let batch: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        momentum: 0.0,
        ..quick(loss)
    };
    let mut sgd = Sgd::new(0.0);
    let before = train_step(&g, &mut w, &mut sgd, &cfg, &batch, 1e-5).unwrap();
    let after = train_step(&g, &mut w, &mut sgd, &cfg, &batch, 0.0).unwrap();
    (before, after)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn tiny_step_decreases_smooth_losses(seed in 0..1000u64, deepgaze in any::<bool>()) {
        let loss = if deepgaze { LossKind::DeepGaze } else { LossKind::Salgan };
        let (before, after) = loss_after_tiny_step(seed, loss);
        prop_assert!(after < before, "{} -> {}", before, after);
    }
}
