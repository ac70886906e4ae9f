//! Cross-module pipeline checks: synthetic data through training,
//! checkpointing, evaluation, and saliency, exercising the on-disk formats
//! the way an external caller would.

use cardio_dg::dataio::{load_checkpoint, load_manifest, save_checkpoint, ArrhythmiaClass};
use cardio_dg::eval::{evaluate, make_split, EvalOptions, Protocol, StressSpec};
use cardio_dg::model::{Model, ModelConfig, Variant};
use cardio_dg::synth::{default_profiles, generate_dataset};
use cardio_dg::train::{fit, Loader, TrainConfig};
use cardio_dg::xai::{export_overlay, grad_cam, CamLayer};
use std::path::Path;

fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        stage_widths: [8, 8, 16, 16],
        conc_width: 4,
        head_hidden: 16,
        window_len: 1024,
        ..ModelConfig::default()
    }
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn build_dataset(dir: &Path, n_per_domain: usize) -> cardio_dg::dataio::DatasetManifest {
    let mix = vec![
        (ArrhythmiaClass::N, 0.5),
        (ArrhythmiaClass::AF, 0.25),
        (ArrhythmiaClass::LBBB, 0.25),
    ];
    generate_dataset(&default_profiles(2), &mix, n_per_domain, 500.0, 2.5, 7, dir).unwrap()
}

#[test]
fn synth_train_checkpoint_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 16);
    // the manifest written to disk loads back identically
    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, manifest);
    loaded.validate_files(dir.path()).unwrap();

    let plan = make_split(&manifest, &Protocol::IntraSource { domain: None }, 7).unwrap();
    let train_loader = Loader::from_manifest(&manifest, dir.path(), &plan.train_ids).unwrap();
    let val_loader = Loader::from_manifest(&manifest, dir.path(), &plan.val_ids).unwrap();
    let mut model: Model<f32> = Model::new(tiny_model_config(Variant::Full), 7);
    let (checkpoint, log) = fit(&train_loader, &val_loader, &mut model, &tiny_train_config(7)).unwrap();
    assert_eq!(log.epochs.len(), 2);

    // checkpoint file round-trips bit-exactly and is self-describing
    let ckpt_path = dir.path().join("model.hbai");
    save_checkpoint(&checkpoint, &ckpt_path).unwrap();
    let restored = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(restored, checkpoint);

    let opts = EvalOptions {
        threads: 2,
        ..EvalOptions::default()
    };
    let report = evaluate(&restored, &manifest, dir.path(), &plan, &opts).unwrap();
    assert_eq!(report.n_test, plan.test_ids.len());
    let total: usize = report.confusion_matrix.iter().flatten().sum();
    assert_eq!(total, report.n_test);
    for row in &report.confusion_matrix {
        let _sum: usize = row.iter().sum();
    }
    assert!((0.0..=1.0).contains(&report.accuracy));
    assert!((0.0..=1.0).contains(&report.macro_f1));
    assert!(report.bootstrap_ci.0 <= report.bootstrap_ci.1);
    let csv = report.confusion_csv();
    assert_eq!(csv.lines().count(), 8, "header + 7 class rows");

    // evaluating twice gives byte-identical serialized reports
    let report2 = evaluate(&restored, &manifest, dir.path(), &plan, &opts).unwrap();
    assert_eq!(
        serde_json::to_string(&report).unwrap(),
        serde_json::to_string(&report2).unwrap()
    );

    // thread count must not change results
    let single = evaluate(
        &restored,
        &manifest,
        dir.path(),
        &plan,
        &EvalOptions {
            threads: 1,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(
        serde_json::to_string(&report).unwrap(),
        serde_json::to_string(&single).unwrap()
    );
}

#[test]
fn stressed_evaluation_annotates_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 12);
    let plan = make_split(&manifest, &Protocol::IntraSource { domain: None }, 3).unwrap();
    let train_loader = Loader::from_manifest(&manifest, dir.path(), &plan.train_ids).unwrap();
    let val_loader = Loader::from_manifest(&manifest, dir.path(), &plan.val_ids).unwrap();
    let mut model: Model<f32> = Model::new(tiny_model_config(Variant::Baseline), 3);
    let cfg = tiny_train_config(3).for_variant(Variant::Baseline);
    let (checkpoint, _) = fit(&train_loader, &val_loader, &mut model, &cfg).unwrap();

    let opts = EvalOptions {
        stress: Some(StressSpec::LeadDrop { k: 3 }),
        threads: 2,
        ..EvalOptions::default()
    };
    let report = evaluate(&checkpoint, &manifest, dir.path(), &plan, &opts).unwrap();
    assert_eq!(report.stress.as_deref(), Some("lead-drop:3"));
}

#[test]
fn lodo_flow_trains_without_target_and_guards_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 16);
    let plan = make_split(&manifest, &Protocol::Lodo { target: "site_b".into() }, 5).unwrap();
    let train_loader = Loader::from_manifest(&manifest, dir.path(), &plan.train_ids).unwrap();
    let val_loader = Loader::from_manifest(&manifest, dir.path(), &plan.val_ids).unwrap();
    assert!(train_loader.domains().iter().all(|d| d != "site_b"));

    let mut model: Model<f32> = Model::new(tiny_model_config(Variant::Full), 5);
    let (checkpoint, _) = fit(&train_loader, &val_loader, &mut model, &tiny_train_config(5)).unwrap();
    assert_eq!(checkpoint.meta.source_domains, ["site_a"]);

    let report = evaluate(
        &checkpoint,
        &manifest,
        dir.path(),
        &plan,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(report.n_test, 16, "every target-domain record is tested");

    // a checkpoint trained on the target domain must be rejected
    let mut poisoned = checkpoint.clone();
    poisoned.meta.train_ids.push(plan.test_ids[0].clone());
    match evaluate(&poisoned, &manifest, dir.path(), &plan, &EvalOptions::default()) {
        Err(cardio_dg::eval::EvalError::LeakageDetected { .. }) => {}
        other => panic!("expected LeakageDetected, got {other:?}"),
    }
}

#[test]
fn saliency_from_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 8);
    let plan = make_split(&manifest, &Protocol::IntraSource { domain: None }, 9).unwrap();
    let train_loader = Loader::from_manifest(&manifest, dir.path(), &plan.train_ids).unwrap();
    let val_loader = Loader::from_manifest(&manifest, dir.path(), &plan.val_ids).unwrap();
    let mut model: Model<f32> = Model::new(tiny_model_config(Variant::Full), 9);
    let (checkpoint, _) = fit(&train_loader, &val_loader, &mut model, &tiny_train_config(9)).unwrap();

    let mut restored: Model<f32> = Model::from_state(checkpoint.config.clone(), &checkpoint.params);
    let rec = manifest.load_record(dir.path(), &manifest.records[0]).unwrap();
    for layer in [CamLayer::Stem, CamLayer::Stage(2), CamLayer::Stage(4)] {
        let map = grad_cam(&mut restored, &rec, 0, layer).unwrap();
        assert_eq!(map.importance.len(), rec.n_samples());
        assert!(map.importance.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if !map.no_positive_attribution {
            let peak = map.importance.iter().cloned().fold(0.0f64, f64::max);
            assert!((peak - 1.0).abs() < 1e-12);
        }
        let csv = export_overlay(&map, &rec, &[1]).unwrap();
        assert_eq!(csv.lines().count(), rec.n_samples() + 1);
    }
}
