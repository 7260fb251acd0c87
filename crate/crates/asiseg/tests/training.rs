mod common;

use asiseg::error::AppError;
use asiseg::eval::{evaluate_intention, robustness_sweep};
use asiseg::dataset::CommandCondition;
use asiseg::train::{batch_loss, epoch_items, fit_audio_norm, prepare, train, TrainConfig};
use asiseg_core::audio::PerturbKind;
use asiseg_core::metrics::{compute_iou, ClassIou, MetricsReport};
use asiseg_core::synth::{mix_seed, synth_command_audio, Split};
use asiseg_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one_epoch(lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs: 1,
        seed,
        ..TrainConfig::default()
    }
}

/// Loss on the first batch of the epoch, before and after that epoch.
fn first_batch_losses(seed: u64) -> (f64, f64) {
    let ds = common::tiny_split(100 + seed, Split::Train);
    let mut model = common::default_model(seed);
    fit_audio_norm(&mut model, &ds).unwrap();
    let config = one_epoch(1e-4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0));
    let items = epoch_items(&ds, config.absent_per_frame, &mut rng);
    let batch = &items[..config.batch_size.min(items.len())];
    let text = model.text_features().unwrap();
    let prepared = prepare(&model, &ds).unwrap();
    let before = batch_loss(&model, &ds, &prepared, &text, batch, config.tau).unwrap();
    train(&mut model, &ds, &config, |_| {}).unwrap();
    let after = batch_loss(&model, &ds, &prepared, &text, batch, config.tau).unwrap();
    (before, after)
}

#[test]
fn one_epoch_lowers_the_first_batch_loss_in_most_seeds() {
    let lowered = (0..10)
        .filter(|&s| {
            let (before, after) = first_batch_losses(s);
            after < before
        })
        .count();
    assert!(lowered >= 9, "loss decreased in {lowered}/10 seeds");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = common::tiny_split(7, Split::Train);
    let mut model = common::default_model(3);
    fit_audio_norm(&mut model, &ds).unwrap();
    let before = model.store.clone();
    let out = train(&mut model, &ds, &one_epoch(0.0, 1), |_| {}).unwrap();
    assert!(out.steps > 0);
    for (a, b) in before.entries().iter().zip(model.store.entries()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
}

#[test]
fn frozen_encoders_keep_their_checksum() {
    let ds = common::tiny_split(8, Split::Train);
    let mut model = common::default_model(4);
    let checksum = model.encoder_checksum();
    let before = model.store.clone();
    let mut logs = Vec::new();
    train(&mut model, &ds, &TrainConfig { epochs: 2, ..one_epoch(1e-3, 2) }, |l| logs.push(*l)).unwrap();
    assert_eq!(model.encoder_checksum(), checksum);
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.total == l.dice + l.cl && l.lr == 1e-3));
    let changed = before
        .entries()
        .iter()
        .zip(model.store.entries())
        .filter(|(a, b)| a.value != b.value)
        .count();
    assert!(changed > 0);
    for (a, b) in before.entries().iter().zip(model.store.entries()) {
        if a.group.is_encoder() {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn invalid_training_configurations() {
    let ds = common::tiny_split(9, Split::Train);
    let mut model = common::default_model(0);
    for bad in [
        TrainConfig { freeze_encoders: false, ..TrainConfig::default() },
        TrainConfig { tau: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
    ] {
        let e = train(&mut model, &ds, &bad, |_| {}).unwrap_err();
        assert!(matches!(e, AppError::Core(Error::Config(_))), "{e}");
    }
    let empty = asiseg::dataset::Dataset { samples: Vec::new(), ..ds };
    assert!(matches!(
        train(&mut model, &empty, &TrainConfig::default(), |_| {}).unwrap_err(),
        AppError::Core(Error::EmptyDataset)
    ));
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let ds = common::tiny_split(10, Split::Train);
    let mut model = common::default_model(0);
    let id = model.store.find("prompt.projection.weight").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let e = train(&mut model, &ds, &one_epoch(1e-4, 0), |_| {}).unwrap_err();
    match e {
        AppError::Training(m) => assert!(m.contains("epoch 0, batch 0"), "{m}"),
        other => panic!("{other}"),
    }
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let ds = common::tiny_split(12, Split::Val);
    let frames: Vec<Vec<ClassIou>> = ds
        .samples
        .iter()
        .map(|s| {
            s.present_classes
                .iter()
                .map(|&k| ClassIou {
                    class_index: k,
                    iou: compute_iou(&s.masks[k], &s.masks[k]).unwrap(),
                })
                .collect()
        })
        .collect();
    let r = MetricsReport::from_frames(&frames, 7).unwrap();
    assert_eq!((r.challenge_iou, r.iou, r.mc_iou), (1.0, 1.0, 1.0));
    let empty = frames
        .iter()
        .zip(&ds.samples)
        .map(|(f, s)| {
            f.iter()
                .map(|c| ClassIou {
                    iou: compute_iou(&asiseg_core::decoder::BinaryMask::zeros(64, 64), &s.masks[c.class_index]).unwrap(),
                    ..*c
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    let r = MetricsReport::from_frames(&empty, 7).unwrap();
    assert!(r.per_class_iou.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn distinct_classes_have_distinct_dominant_mel_channels() {
    let model = common::default_model(0);
    let analyzer = model.mel_analyzer().unwrap();
    let dominant = |k: usize| {
        let mel = analyzer.compute(&synth_command_audio(k, 7, 5, 0.0).unwrap()).unwrap();
        let v = &mel.values;
        (0..v.rows())
            .max_by(|&a, &b| {
                let sa: f64 = v.row(a).iter().sum();
                let sb: f64 = v.row(b).iter().sum();
                sa.total_cmp(&sb)
            })
            .unwrap()
    };
    assert_ne!(dominant(0), dominant(4));
}

#[test]
fn untrained_evaluation_and_sweep_shapes() {
    let train_ds = common::tiny_split(13, Split::Train);
    let val = common::tiny_split(13, Split::Val);
    let mut model = common::default_model(1);
    fit_audio_norm(&mut model, &train_ds).unwrap();
    let clean = evaluate_intention(&model, &val, &CommandCondition::CLEAN).unwrap();
    let n: usize = val.samples.iter().map(|s| s.present_classes.len()).sum();
    assert_eq!(clean.n_commands, n);
    assert_eq!(clean.report.n_frames, val.len());
    let rows = robustness_sweep(&model, &val, &[PerturbKind::Noise, PerturbKind::TimeWarp], &[0.0, 0.2]).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].mc_iou, clean.report.mc_iou);
    assert_eq!(rows[0].intent_accuracy, clean.intent_accuracy);
    assert_eq!(rows[2].mc_iou, clean.report.mc_iou);
}
