#![allow(clippy::field_reassign_with_default)]

use std::fs;
use std::path::Path;

use mudi_core::coherence::FusionMode;
use mudi_core::pipeline::{Pipeline, PipelineError, RunConfig, Stage};

fn tiny(dir: &Path, mode: FusionMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run_dir = dir.to_path_buf();
    cfg.pretrain.epochs = 2;
    cfg.coherence.epochs = 2;
    cfg.generator.epochs = 2;
    cfg.generator.persona_epochs = 1;
    cfg.memory.fusion_mode = mode;
    cfg
}

#[test]
fn resumes_and_reports_missing_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), FusionMode::Attention);
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let first = pipeline.run(Stage::Annotate).unwrap();
    assert_eq!(first.executed, Stage::ALL.to_vec());
    assert!(first.report.responses > 0);

    // A second call finds everything up to date.
    assert!(pipeline.run(Stage::Annotate).unwrap().executed.is_empty());

    // Starting from evaluate without a generator checkpoint names the stage.
    fs::remove_dir_all(pipeline.layout.generator()).unwrap();
    match pipeline.run(Stage::Evaluate) {
        Err(PipelineError::Missing { stage, .. }) => assert_eq!(stage, Stage::TrainGenerator),
        other => panic!("expected a missing-stage error, got {:?}", other.map(|s| s.executed)),
    }

    // A changed generator setting is rejected instead of silently reused.
    let mut changed = cfg;
    changed.generator.epochs = 3;
    let before = fs::read(dir.path().join("config.toml")).unwrap();
    match Pipeline::new(changed).unwrap().run(Stage::Annotate) {
        Err(PipelineError::HashMismatch { stage, .. }) => assert!(stage >= Stage::TrainGenerator),
        other => panic!("expected a hash mismatch, got {:?}", other.map(|s| s.executed)),
    }
    assert_eq!(fs::read(dir.path().join("config.toml")).unwrap(), before);
}

#[test]
fn runs_without_graph_memory() {
    let dir = tempfile::tempdir().unwrap();
    let summary = Pipeline::new(tiny(dir.path(), FusionMode::None)).unwrap().run(Stage::Annotate).unwrap();
    assert!(summary.report.bleu1.is_some());
    assert!(dir.path().join("report.json").is_file());
}

#[test]
fn random_memory_is_reproducible() {
    let outputs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            Pipeline::new(tiny(dir.path(), FusionMode::Random)).unwrap().run(Stage::Annotate).unwrap();
            fs::read(dir.path().join("generations.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}
