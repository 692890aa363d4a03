//! Whole-run contracts on a small configuration.

mod common;

use common::criteria::{empty_injection_exact, freeze_contract, lambda_zero_exact};
use common::{complete_sample, frozen_tiny_backbone, small_backbone, small_run, small_run_config, tiny_shape};
use rebq::bench::Modality;
use rebq::eval::{emit_report, load_report, run_experiment_with, verify_report, RunOptions, Split};
use rebq::pipeline::{build_variant, ModelConfig, PreparedSample, VariantSpec, PRESETS};

#[test]
fn equal_seeds_give_identical_reports() {
    let config = small_run_config();
    let backbone = small_backbone(1);
    let a = small_run(&config, &backbone).report;
    let b = small_run(&config, &backbone).report;
    assert_eq!(a.canonical_json().unwrap(), b.canonical_json().unwrap());
    let c = small_run(&config.clone().with_root_seed(12), &backbone).report;
    assert_ne!(a.canonical_json().unwrap(), c.canonical_json().unwrap());
}

#[test]
fn training_leaves_the_backbone_alone_and_moves_everything_else() {
    let config = small_run_config();
    let backbone = small_backbone(2);
    let before = backbone.to_container(serde_json::Value::Null).to_bytes().unwrap();
    for name in ["rebq", "naive"] {
        let mut c = config.clone();
        c.variant = VariantSpec::preset(name).unwrap();
        let out = small_run(&c, &backbone);
        assert!(out.report.backbone.unchanged);
        freeze_contract(&c, &backbone, &before, &out.model).unwrap();
    }
}

#[test]
fn empty_injection_and_zero_lambda_are_exact() {
    let backbone = frozen_tiny_backbone(3);
    let shape = tiny_shape();
    let samples = [
        complete_sample("a", 0),
        complete_sample("b", 1).without(Modality::Text, &shape),
        complete_sample("c", 2).without(Modality::Visual, &shape),
    ];
    empty_injection_exact(&backbone, &samples).unwrap();

    let backbone = std::sync::Arc::new(backbone);
    let config = ModelConfig {
        num_classes: 3,
        multi_label: false,
        prompt: small_run_config().prompt,
        lambda: 0.0,
    };
    let model = build_variant(VariantSpec::canonical(), backbone.clone(), &config, 4).unwrap();
    let batch: Vec<PreparedSample> = samples.iter().map(|s| PreparedSample::new(&backbone, s, true).unwrap()).collect();
    lambda_zero_exact(&model, &batch).unwrap();
}

#[test]
fn sessions_only_see_their_own_training_data() {
    let out = small_run(&small_run_config(), &small_backbone(5));
    let log = &out.report.access_log;
    let trains: Vec<_> = log.iter().filter(|a| a.split == Split::Train).collect();
    assert_eq!(trains.len(), 3);
    assert!(trains.iter().enumerate().all(|(j, a)| a.phase == j && a.session == j));
    // tests are read only after the session they belong to has been trained
    assert!(log.iter().filter(|a| a.split == Split::Test).all(|a| a.session <= a.phase));
    let first_test = log.iter().position(|a| a.split == Split::Test).unwrap();
    assert!(log[..first_test].iter().all(|a| a.phase == 0));
}

#[test]
fn every_preset_runs() {
    let backbone = small_backbone(6);
    for name in PRESETS {
        let mut c = small_run_config();
        c.variant = VariantSpec::preset(name).unwrap();
        let out = small_run(&c, &backbone);
        let r = &out.report;
        assert!(r.matrix.is_complete(), "{name}");
        assert!((0.0..=1.0).contains(&r.ap), "{name}");
        assert_eq!(r.reconstruction.is_some(), out.model.memory.is_some(), "{name}");
    }
}

#[test]
fn reports_round_trip_and_csvs_have_the_matrix_shape() {
    let out = small_run(&small_run_config(), &small_backbone(7));
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&out.report, dir.path(), None).unwrap();
    let back = load_report(&files.report).unwrap();
    assert_eq!(back, out.report);
    verify_report(&back, 1e-12).unwrap();

    let matrix = std::fs::read_to_string(&files.matrix).unwrap();
    let widths: Vec<usize> = matrix.lines().map(|l| l.split(',').count()).collect();
    assert_eq!(widths, vec![3, 2, 1]);
    let trajectory = std::fs::read_to_string(&files.trajectory).unwrap();
    assert_eq!(trajectory.lines().count(), 4);
}

#[test]
fn resuming_from_a_session_checkpoint_matches_an_uninterrupted_run() {
    let mut config = small_run_config();
    config.checkpoint_sessions = true;
    let backbone = small_backbone(8);
    let dir = tempfile::tempdir().unwrap();
    let opts = |resume| RunOptions {
        backbone: Some(backbone.clone()),
        output_dir: Some(dir.path().to_path_buf()),
        resume_from: resume,
        collect_queries: false,
    };
    let full = run_experiment_with(&config, opts(None)).unwrap().report;
    let ckpt = dir.path().join("checkpoints").join("session-2.json");
    assert!(ckpt.exists());
    let resumed = run_experiment_with(&config, opts(Some(ckpt.clone()))).unwrap().report;
    assert_eq!(resumed.matrix, full.matrix);
    assert_eq!(resumed.ap, full.ap);

    let mut other = config.clone();
    other.lambda = 0.5;
    assert!(run_experiment_with(&other, opts(Some(ckpt))).is_err());
}

#[test]
fn mismatched_or_unfrozen_backbones_are_rejected() {
    let config = small_run_config();
    let mut b = rebq::backbone::MultimodalBackbone::init(common::small_backbone_config(), 9).unwrap();
    let opts = |b| RunOptions {
        backbone: Some(std::sync::Arc::new(b)),
        ..RunOptions::default()
    };
    assert!(run_experiment_with(&config, opts(b.clone())).is_err());
    b.freeze();
    let mut wrong = config.clone();
    wrong.prompt.prompted_layers = 1;
    wrong.backbone.config.num_layers = 1;
    assert!(run_experiment_with(&wrong, opts(b)).is_err());
}
