use std::collections::BTreeMap;

use sgnet::data::{Manifest, MovementType, ScaleType, ShotRecord, Split, Task};
use sgnet::fixtures::{generate_dataset, Dataset, DatasetSpec};
use sgnet::model::{Checkpoint, ModelConfig, TaskMode};
use sgnet::train::*;
use sgnet::Error;

fn dataset(train: usize, val: usize, test: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { train, val, test, frames: 12, ..DatasetSpec::small(seed) };
    let ds = generate_dataset(dir.path(), &spec).unwrap();
    (dir, ds)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr_decay_epochs: vec![], ..TrainConfig::desk() }
}

#[test]
fn lr_schedule_steps_down_by_ten() {
    let cfg = TrainConfig::default();
    for (epoch, want) in [(0, 1e-3), (19, 1e-3), (20, 1e-4), (39, 1e-4), (40, 1e-5), (59, 1e-5)] {
        let got = lr_at(&cfg, epoch).unwrap();
        assert!((got - want).abs() < 1e-15, "epoch {epoch}: {got}");
    }
    assert!(matches!(lr_at(&cfg, 60), Err(Error::EpochOutOfRange { epoch: 60, epochs: 60 })));
}

#[test]
fn train_config_validation() {
    TrainConfig::default().validate().unwrap();
    TrainConfig::desk().validate().unwrap();
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { base_lr: -1.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { lr_decay_epochs: vec![40, 20], ..TrainConfig::default() },
        TrainConfig { lr_decay_epochs: vec![60], ..TrainConfig::default() },
        TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    let cfg = TrainConfig::desk();
    assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    assert!(TrainConfig::from_toml_str("epochs = 3\nbogus = true").is_err());
}

fn synthetic_manifest(n: usize) -> Manifest {
    let records = (0..n)
        .map(|i| ShotRecord {
            shot_id: format!("s{i:04}"),
            media_uri: format!("s{i:04}.srv"),
            frame_start: 0,
            frame_end: 8,
            fps: 24.0,
            scale: ScaleType::from_index(i % 5),
            movement: MovementType::from_index(i / 5 % 4),
            split: Split::Test,
            extra: BTreeMap::new(),
        })
        .collect();
    Manifest::new(records).unwrap()
}

/// Probability that a Binomial(n, p) count falls outside `n * (p +- tol)`.
fn binomial_outside(n: u64, p: f64, tol: f64) -> f64 {
    let ln_fact = |k: u64| (1..=k).map(|v| (v as f64).ln()).sum::<f64>();
    (0..=n)
        .filter(|&k| (k as f64 / n as f64 - p).abs() > tol)
        .map(|k| (ln_fact(n) - ln_fact(k) - ln_fact(n - k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp())
        .sum()
}

#[test]
fn uniform_random_predictor_is_at_chance() {
    let manifest = synthetic_manifest(500);
    // Failure chance of the bounds below for an honest uniform predictor.
    assert!(binomial_outside(500, 0.2, 0.07) < 1e-4);
    assert!(binomial_outside(500, 0.25, 0.07) < 1e-3);
    for seed in [0, 1, 2] {
        let report = evaluate_predictor(&manifest, &UniformRandom { seed }, Split::Test, serde_json::Value::Null).unwrap();
        let scale = report.acc_scale.unwrap();
        let movement = report.acc_movement.unwrap();
        assert!((scale - 20.0).abs() <= 7.0, "scale {scale}");
        assert!((movement - 25.0).abs() <= 7.0, "movement {movement}");
    }
}

#[test]
fn label_oracle_scores_perfectly_and_rows_sum_to_support() {
    let manifest = synthetic_manifest(37);
    let report = evaluate_predictor(&manifest, &LabelOracle, Split::Test, serde_json::Value::Null).unwrap();
    assert_eq!((report.acc_scale, report.acc_movement), (Some(100.0), Some(100.0)));
    let cm = report.confusion_scale.as_ref().unwrap();
    assert_eq!(cm.support(), vec![8, 8, 7, 7, 7]);
    assert_eq!(cm.total(), 37);
    let cm = report.confusion_movement.as_ref().unwrap();
    assert_eq!(cm.support().iter().sum::<u64>(), 37);
    assert_eq!(EvalReport::from_json(&report.to_json()).unwrap(), report);
    assert!(report.to_table().contains("scale top-1: 100.00%"));
    assert!(matches!(
        evaluate_predictor(&manifest, &LabelOracle, Split::Val, serde_json::Value::Null),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn confusion_matrix_counts() {
    let mut cm = ConfusionMatrix::new(Task::Movement);
    for (t, p) in [(0, 0), (0, 1), (1, 1), (3, 2), (3, 3), (3, 3)] {
        cm.add(t, p);
    }
    assert_eq!(cm.support(), vec![2, 1, 0, 3]);
    assert_eq!(cm.correct(), 4);
    assert!((cm.accuracy() - 400.0 / 6.0).abs() < 1e-12);
    assert_eq!(ConfusionMatrix::new(Task::Scale).accuracy(), 0.0);
}

#[test]
fn training_needs_a_train_split() {
    let (_dir, ds) = dataset(0, 2, 0, 1);
    let err = train::<f32>(&ds.manifest, &ModelConfig::default(), &quick(1), TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::EmptySplit(_)));
}

#[test]
fn training_is_reproducible_and_logs_the_schedule() {
    let (_dir, ds) = dataset(5, 2, 0, 2);
    let out = tempfile::tempdir().unwrap();
    // Batch larger than the split: a single batch per epoch.
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        micro_batch: 2,
        lr_decay_epochs: vec![2],
        task_mode: TaskMode::JointShareSmg,
        ..TrainConfig::desk()
    };
    let model = ModelConfig::default();
    let a = train::<f32>(&ds.manifest, &model, &cfg, TrainOptions { out_dir: Some(out.path().into()), ..Default::default() }).unwrap();
    let b = train::<f32>(&ds.manifest, &model, &cfg, TrainOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_checkpoint.params, b.final_checkpoint.params);

    assert_eq!(a.log.len(), 3);
    for e in &a.log {
        assert_eq!(e.lr, lr_at(&cfg, e.epoch).unwrap());
        assert!(e.loss.is_finite());
        assert!(e.val_acc_scale.is_some() && e.val_acc_movement.is_some());
    }
    assert_eq!(read_log(out.path().join("train_log.jsonl")).unwrap(), a.log);
    let saved = Checkpoint::<f32>::load(out.path().join("final.ckpt")).unwrap();
    assert_eq!(saved.params, a.final_checkpoint.params);
    assert!(out.path().join("best.ckpt").exists());
    assert!(a.best_epoch < 3);
}

#[test]
fn loss_falls_over_ten_epochs() {
    let (_dir, ds) = dataset(6, 0, 0, 3);
    let cfg = TrainConfig { generator: GeneratorMode::Frozen, task_mode: TaskMode::ScaleOnly, ..quick(11) };
    let out = train::<f32>(&ds.manifest, &ModelConfig::default(), &cfg, TrainOptions::default()).unwrap();
    assert!(out.log[10].loss < out.log[0].loss, "{} vs {}", out.log[10].loss, out.log[0].loss);
    assert_eq!(out.best_checkpoint.params, out.final_checkpoint.params);
    assert_eq!(out.best_epoch, 10);
}

#[test]
fn evaluating_a_reloaded_checkpoint_is_bit_identical() {
    let (_dir, ds) = dataset(4, 0, 3, 4);
    let model = ModelConfig::default();
    let cfg = TrainConfig { task_mode: TaskMode::MovementOnly, ..quick(2) };
    let out = train::<f32>(&ds.manifest, &model, &cfg, TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.final_checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let a = evaluate(&ds.manifest, &out.final_checkpoint, &model, Split::Test, Default::default()).unwrap();
    let b = evaluate(&ds.manifest, &loaded, &model, Split::Test, Default::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.num_shots, 3);
    assert!(a.acc_scale.is_none() && a.acc_movement.is_some());
    assert!(a.runtime.total_params > 0);

    let wider = ModelConfig { backbone: sgnet::model::BackboneConfig { width: 16, ..model.backbone }, ..model };
    assert!(matches!(evaluate(&ds.manifest, &loaded, &wider, Split::Test, Default::default()), Err(Error::Incompatible(_))));
}

#[test]
fn diverging_run_aborts_with_a_dump() {
    let (_dir, ds) = dataset(4, 0, 0, 5);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { base_lr: 1e30, grad_clip: None, task_mode: TaskMode::ScaleOnly, batch_size: 2, micro_batch: 2, ..quick(3) };
    let err = train::<f32>(&ds.manifest, &ModelConfig::default(), &cfg, TrainOptions { out_dir: Some(out.path().into()), ..Default::default() })
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err:?}");
    assert!(out.path().join("nan_dump.json").exists());
}

#[test]
fn distillation_pretraining_feeds_joint_training() {
    let (_dir, ds) = dataset(4, 0, 0, 6);
    let model = ModelConfig::default();
    let kd_cfg = KdTrainConfig { epochs: 3, batch_size: 2, ..KdTrainConfig::default() };
    let (params, stats) = kd_train::<f32>(&ds.manifest, &model, &kd_cfg, Default::default()).unwrap();
    assert_eq!(stats.len(), 3);
    assert!(stats.iter().all(|s| s.total.is_finite()));
    assert!(stats[2].l2 < stats[0].l2, "{stats:?}");
    assert!(params.names().all(|n| n.starts_with("smg.") || n.starts_with("disc.")));

    let cfg = TrainConfig { task_mode: TaskMode::JointShareSmg, generator: GeneratorMode::Frozen, ..quick(1) };
    let out = train::<f32>(&ds.manifest, &model, &cfg, TrainOptions { generator_init: Some(&params), ..Default::default() }).unwrap();
    let trained = &out.final_checkpoint.params;
    let copied = params.iter().filter(|(n, _)| n.starts_with("smg.")).count();
    assert!(copied > 0);
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with("smg.")) {
        // Frozen generator: the pretrained weights come through unchanged.
        assert_eq!(trained.get(name).unwrap(), t, "{name}");
    }
}
