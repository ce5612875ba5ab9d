//! Training, checkpointing and file-driven evaluation working together.

mod common;

use std::fs;

use qmat_core::dataset::{
    generate_dataset, synthetic::synthetic_image, write_shard, DatasetManifest, PatchRecord, Split,
};
use qmat_core::jpeg::QTarget;
use qmat_core::harness::{evaluate, mismatch_eval, ExperimentConfig, HarnessError};
use qmat_core::nn::{
    evaluate_loss, load_checkpoint, save_checkpoint, train, AdamConfig, AdamState, Checkpoint,
    DenseNet, DenseNetConfig, LossKind, Tensor, TrainConfig,
};

fn records(seed: u64, images: usize, cap: usize, qf2: u8) -> Vec<PatchRecord> {
    common::init();
    let imgs: Vec<_> = (0..images)
        .map(|i| (format!("p{seed}-{i}"), synthetic_image(96, 96, seed * 100 + i as u64)))
        .collect();
    let m = DatasetManifest {
        patches_per_image_cap: cap,
        ..DatasetManifest::new(Split::Train, qf2, vec![60, 75, 95], seed)
    };
    generate_dataset(&imgs, &m).unwrap()
}

fn fresh_optimizer(model: &DenseNet<f32>) -> AdamState {
    let refs: Vec<&Tensor<f32>> = model.params().iter().map(|p| &p.value).collect();
    AdamState::for_params(&refs)
}

#[test]
fn one_epoch_over_64_patches_takes_two_steps() {
    let data = records(1, 4, 6, 90);
    assert_eq!(data.len(), 72);
    let data = &data[..64];
    let mut model = DenseNet::new(DenseNetConfig::small(), 3).unwrap();
    let mut opt = fresh_optimizer(&model);
    let mut seen = Vec::new();
    let report = train(
        &mut model,
        &mut opt,
        data,
        None,
        &TrainConfig::default(),
        |s, _, o| {
            seen.push((s.epoch, o.step));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(report.steps, 2);
    assert_eq!(opt.step, 2);
    assert_eq!(seen, [(1, 2)]);
}

#[test]
fn reloaded_checkpoint_reproduces_validation_loss() {
    let train_set = records(2, 2, 8, 90);
    let val_set = records(3, 1, 8, 90);
    let mut model = DenseNet::new(DenseNetConfig::small(), 5).unwrap();
    let mut opt = fresh_optimizer(&model);
    let cfg = TrainConfig {
        epochs: 2,
        adam: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut last_val = None;
    train(&mut model, &mut opt, &train_set, Some(&val_set), &cfg, |s, m, o| {
        last_val = s.val_loss;
        save_checkpoint(
            &Checkpoint {
                model: m.clone(),
                epoch: s.epoch as u32,
                trained_qf2: Some(90),
                optimizer: Some(o.clone()),
            },
            &path,
        )
    })
    .unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.epoch, 2);
    let reloaded = evaluate_loss(&ck.model, &val_set, LossKind::LogCosh, 32).unwrap();
    assert!((reloaded - last_val.unwrap()).abs() < 1e-6);
    assert_eq!(ck.optimizer.unwrap(), opt);

    // fine-tuning from the checkpoint continues from the same weights
    let mut warm = ck.model.clone();
    let mut warm_opt = fresh_optimizer(&warm);
    let before = evaluate_loss(&warm, &val_set, LossKind::LogCosh, 32).unwrap();
    assert_eq!(before, reloaded);
    train(&mut warm, &mut warm_opt, &train_set, None, &cfg, |_, _, _| Ok(())).unwrap();
    assert_ne!(warm, ck.model);
}

#[test]
fn file_driven_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = DenseNet::new(DenseNetConfig::small(), 7).unwrap();
    let ckpt = d.join("m.ckpt");
    save_checkpoint(
        &Checkpoint {
            model,
            epoch: 0,
            trained_qf2: Some(90),
            optimizer: None,
        },
        &ckpt,
    )
    .unwrap();
    let test = records(4, 2, 4, 90);
    let (a, b) = test.split_at(10);
    write_shard(a, &d.join("a.qmds")).unwrap();
    write_shard(b, &d.join("b.qmds")).unwrap();

    let forward = ExperimentConfig {
        output_dir: Some(d.join("out1")),
        ..ExperimentConfig::new(ckpt.clone(), vec![d.join("a.qmds"), d.join("b.qmds")])
    };
    let backward = ExperimentConfig {
        output_dir: Some(d.join("out2")),
        ..ExperimentConfig::new(ckpt.clone(), vec![d.join("b.qmds"), d.join("a.qmds")])
    };
    let t1 = evaluate(&forward).unwrap();
    let t2 = evaluate(&backward).unwrap();
    assert_eq!(t1.total_count(), test.len() as u64);
    for (x, y) in t1.rows().iter().zip(&t2.rows()) {
        assert_eq!(x.n, y.n);
        assert!((x.mse - y.mse).abs() < 1e-9 && (x.acc - y.acc).abs() < 1e-9);
    }
    for f in ["eval.csv", "per_coeff.csv", "per_coeff.svg"] {
        assert_eq!(
            fs::read(d.join("out1").join(f)).unwrap(),
            fs::read(d.join("out2").join(f)).unwrap(),
            "{f}"
        );
    }

    // matched second-pass quality: same numbers, plus the annotation
    let mut m = mismatch_eval(&forward).unwrap();
    assert_eq!(m.annotation, Some((Some(90), 90)));
    m.annotation = None;
    assert_eq!(m, t1);

    // mismatched second-pass quality is annotated, not refused
    let other = records(5, 1, 4, 92);
    write_shard(&other, &d.join("c.qmds")).unwrap();
    let cross = mismatch_eval(&ExperimentConfig::new(ckpt.clone(), vec![d.join("c.qmds")])).unwrap();
    assert_eq!(cross.annotation, Some((Some(90), 92)));

    let narrow: Vec<PatchRecord> = test
        .iter()
        .map(|r| PatchRecord {
            label: QTarget::new(r.label.values()[..10].to_vec(), 10).unwrap(),
            ..r.clone()
        })
        .collect();
    write_shard(&narrow, &d.join("n.qmds")).unwrap();
    assert!(matches!(
        evaluate(&ExperimentConfig::new(ckpt.clone(), vec![d.join("n.qmds")])),
        Err(HarnessError::NcMismatch { .. })
    ));
    assert!(evaluate(&ExperimentConfig::new(d.join("missing.ckpt"), vec![d.join("a.qmds")])).is_err());
    assert!(evaluate(&ExperimentConfig::new(ckpt, vec![d.join("missing.qmds")])).is_err());
}
