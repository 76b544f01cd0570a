use std::fs;

use wildsat::encoders::{trainable_mask, PeftMode};
use wildsat::geodata::{generate_synthetic_world, GeoDataset, SyntheticWorldConfig};
use wildsat::training::{
    blob_path, load_checkpoint, save_checkpoint, train, TrainConfig, TrainError, Trainer,
};

fn dataset(seed: u64, observations: usize) -> GeoDataset {
    generate_synthetic_world(&SyntheticWorldConfig {
        seed,
        observations,
        ..SyntheticWorldConfig::default()
    })
    .unwrap()
    .dataset
}

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 16,
        epochs: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trips_exactly() {
    let ds = dataset(0, 64);
    let mut trainer = Trainer::new(small(0), &ds).unwrap();
    trainer.run(Some(3)).unwrap();
    let ckpt = trainer.into_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.content_hash(), ckpt.content_hash());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ds = dataset(0, 64);
    let mut trainer = Trainer::new(small(0), &ds).unwrap();
    trainer.run(Some(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(trainer.state(), &path).unwrap();
    let header = fs::read_to_string(&path).unwrap();
    let blob = fs::read(blob_path(&path)).unwrap();

    fs::write(blob_path(&path), &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(TrainError::BlobLength { .. })
    ));
    fs::write(blob_path(&path), &blob).unwrap();

    let mut v: serde_json::Value = serde_json::from_str(&header).unwrap();
    v["version"] = 99.into();
    fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(TrainError::Version { found: 99, .. })
    ));

    fs::write(&path, &header[..header.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(TrainError::Checkpoint { .. })
    ));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = dataset(1, 96);
    let config = small(4);
    let straight = train(config.clone(), &ds).unwrap();

    let mut first = Trainer::new(config, &ds).unwrap();
    first.run(Some(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(first.state(), &path).unwrap();
    let mut second = Trainer::from_checkpoint(load_checkpoint(&path).unwrap(), &ds).unwrap();
    second.run(None).unwrap();
    let resumed = second.into_checkpoint();

    assert_eq!(resumed.content_hash(), straight.content_hash());
    assert_eq!(resumed.step_losses, straight.step_losses);
}

#[test]
fn training_is_deterministic_per_seed() {
    let ds = dataset(2, 64);
    let a = train(
        TrainConfig {
            max_steps: Some(4),
            ..small(7)
        },
        &ds,
    )
    .unwrap();
    let b = train(
        TrainConfig {
            max_steps: Some(4),
            ..small(7)
        },
        &ds,
    )
    .unwrap();
    let c = train(
        TrainConfig {
            max_steps: Some(4),
            ..small(8)
        },
        &ds,
    )
    .unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), c.content_hash());
}

#[test]
fn loss_decreases_on_small_data() {
    let ds = dataset(3, 200);
    for seed in 0..5 {
        let config = TrainConfig {
            epochs: 5,
            ..small(seed)
        };
        let ckpt = train(config, &ds).unwrap();
        let l = &ckpt.step_losses;
        let head = l[..5].iter().sum::<f64>() / 5.0;
        let tail = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn epochs_are_counted_and_averaged() {
    let ds = dataset(0, 64);
    let mut trainer = Trainer::new(small(1), &ds).unwrap();
    let spe = trainer.steps_per_epoch();
    assert_eq!(trainer.samples_per_epoch(), spe * 16);
    assert!(trainer.samples_per_epoch() <= trainer.samples().len());
    trainer.run(None).unwrap();
    assert!(trainer.is_finished());
    let ckpt = trainer.into_checkpoint();
    assert_eq!(ckpt.epoch(), 2);
    assert_eq!(ckpt.step_losses.len(), 2 * spe);
    for (e, mean) in ckpt.epoch_losses.iter().enumerate() {
        let part = &ckpt.step_losses[e * spe..(e + 1) * spe];
        assert!((mean - part.iter().sum::<f64>() / spe as f64).abs() < 1e-12);
    }
}

#[test]
fn step_cap_limits_the_run() {
    let ds = dataset(0, 64);
    let ckpt = train(
        TrainConfig {
            max_steps: Some(2),
            ..small(0)
        },
        &ds,
    )
    .unwrap();
    assert_eq!(ckpt.step_losses.len(), 2);
}

#[test]
fn frozen_parameters_hold_over_a_run() {
    let ds = dataset(5, 64);
    for peft in [PeftMode::ScaleShift, PeftMode::Full] {
        let config = TrainConfig {
            peft,
            freeze_location: true,
            ..small(2)
        };
        let mut trainer = Trainer::new(config, &ds).unwrap();
        let before = trainer.state().model.params.clone();
        let mask = trainable_mask(peft, true, &before);
        trainer.run(None).unwrap();
        let after = &trainer.state().model.params;
        for (name, entry) in before.iter() {
            if !mask.contains(name) {
                assert!(entry.tensor.bit_eq(after.get(name).unwrap()), "{name}");
            }
        }
    }
}

#[test]
fn non_finite_loss_aborts_the_run() {
    let ds = dataset(0, 64);
    // a subnormal temperature overflows the logits
    let config = TrainConfig {
        temperature: 1e-310,
        ..small(0)
    };
    let mut trainer = Trainer::new(config, &ds).unwrap();
    let r = trainer.step();
    assert!(
        matches!(r, Err(TrainError::NonFiniteLoss { step: 0 })),
        "{:?}",
        r.err()
    );
    assert!(trainer.state().step_losses.is_empty());
}

#[test]
fn too_small_datasets_and_bad_configs_fail_early() {
    let ds = dataset(0, 8);
    assert!(matches!(
        Trainer::new(small(0), &ds),
        Err(TrainError::DatasetTooSmall { .. })
    ));
    let ds = dataset(0, 64);
    assert!(matches!(
        Trainer::new(
            TrainConfig {
                lr: 0.0,
                ..small(0)
            },
            &ds
        ),
        Err(TrainError::Config(_))
    ));
}
