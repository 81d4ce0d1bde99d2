use std::fs;

use enseg::data::LoadedSample;
use enseg::preprocess::PreprocessConfig;
use enseg::synthetic::{generate_shapes, ShapesConfig};
use enseg::training::{recalibrate_batch_norm, train, TrainConfig};
use enseg::{build_model, Architecture, EnsegError, Encoder, ModelSpec, SegModel};
use enseg_tensor::ParamKind;

fn shapes(n: usize) -> Vec<LoadedSample> {
    generate_shapes(&ShapesConfig {
        count: n,
        ..Default::default()
    })
    .unwrap()
}

fn pre() -> PreprocessConfig {
    PreprocessConfig {
        target_height: 64,
        target_width: 96,
        augment: None,
        ..Default::default()
    }
}

fn unet() -> SegModel<f32> {
    build_model(&ModelSpec::new(Architecture::Unet, Encoder::EfficientNetB0, 3), 0).unwrap()
}

#[test]
fn one_epoch_writes_history_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = shapes(3);
    let cfg = TrainConfig {
        epochs: 1,
        train_batch_size: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        run_name: "tiny".into(),
        ..Default::default()
    };
    let out = train(unet(), &data[..2], &data[2..], &cfg, &pre()).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best_epoch, 1);
    let run = dir.path().join("tiny");
    assert_eq!(out.run_dir.as_deref(), Some(run.as_path()));
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(history.contains("\"train_dice_loss\""));
    for f in ["best.ckpt", "best.ckpt.json", "epoch_1.ckpt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let back = SegModel::<f32>::load_any(&run.join("best.ckpt")).unwrap();
    assert_eq!(back.spec(), out.best.spec());
}

#[test]
fn zero_learning_rate_keeps_trainable_parameters() {
    let data = shapes(3);
    let before = unet();
    let cfg = TrainConfig {
        epochs: 1,
        train_batch_size: 2,
        learning_rate: 0.0,
        ..Default::default()
    };
    let out = train(before.clone(), &data[..2], &data[2..], &cfg, &pre()).unwrap();
    let trainable = |m: &SegModel<f32>| {
        m.params()
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert!(trainable(&before) == trainable(&out.best));
}

#[test]
fn empty_splits_are_rejected() {
    let data = shapes(2);
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let err = train(unet(), &data[..], &data[..0], &cfg, &pre()).err().unwrap();
    assert!(matches!(err, EnsegError::EmptyDataset(_)), "{err}");
    let err = train(unet(), &data[..0], &data[..], &cfg, &pre()).err().unwrap();
    assert!(matches!(err, EnsegError::EmptyDataset(_)), "{err}");
}

#[test]
fn size_contract_is_checked_before_training() {
    let data = shapes(2);
    let bad = PreprocessConfig {
        target_height: 60,
        ..pre()
    };
    let err = train(unet(), &data[..1], &data[1..], &TrainConfig::default(), &bad).err().unwrap();
    assert!(matches!(err, EnsegError::Shape(_)), "{err}");
}

#[test]
fn recalibration_replaces_running_statistics() {
    let data = shapes(4);
    let buffers = |m: &SegModel<f32>| {
        m.params()
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Buffer)
            .map(|e| e.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    let mut a = unet();
    let fresh = buffers(&a);
    recalibrate_batch_norm(&mut a, &data[..], &pre(), 2).unwrap();
    let once = buffers(&a);
    assert!(once != fresh);
    // Statistics depend only on the weights and the data, not on the
    // buffers they replace.
    recalibrate_batch_norm(&mut a, &data[..], &pre(), 2).unwrap();
    assert!(buffers(&a) == once);
}
