use std::fs;

use dlmjoint::workbench::pipeline::{read_manifest, replay, EvaluationReport, EVALUATION_JSON, WALL_TIME_CSV};
use dlmjoint::workbench::{ExperimentConfig, Pipeline, Stage};
use dlmjoint::Error;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::two_sentence();
    c.out_dir = dir.to_path_buf();
    c.data.n_strings = 200;
    c.model.d = 16;
    c.model.blocks = 1;
    c.model.heads = 2;
    c.base_training.epochs = 1;
    c.harvest.trajectories = 40;
    c.harvest.heldout_trajectories = 10;
    c.harvest.samples_per_trace = 2;
    c.sampler_training.epochs = 1;
    c.sampling.k_grid = vec![1, 2];
    c.sampling.n_samples = 8;
    c.evaluation.tv_samples = 20;
    c.evaluation.nll_samples = 20;
    c.benchmark.n_strings = 4;
    c.benchmark.warmup = 0;
    c.benchmark.repetitions = 1;
    c
}

#[test]
fn stages_run_in_order_and_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(&dir.path().join("a"))).unwrap();
    let manifests = p.run_all().unwrap();
    assert_eq!(manifests.len(), Stage::ALL.len());
    let bench = manifests.last().unwrap();
    assert_eq!(bench.unverified, vec![WALL_TIME_CSV.to_string()]);
    assert!(!bench.outputs.contains_key(WALL_TIME_CSV));

    let report: EvaluationReport =
        serde_json::from_str(&fs::read_to_string(p.path(EVALUATION_JSON)).unwrap()).unwrap();
    assert!(!report.procedures.is_empty());
    assert_eq!(report.kl_at_k.len(), 3);

    // Same config into a fresh directory reproduces every checksum.
    let m = read_manifest(&p.manifest_path(Stage::Evaluate)).unwrap();
    let again = replay(&m, &dir.path().join("b")).unwrap();
    assert_eq!(again.outputs, m.outputs);
    assert_eq!(again.inputs, m.inputs);
}

#[test]
fn replay_refuses_a_tampered_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(&dir.path().join("a"))).unwrap();
    let mut m = p.run(Stage::GenData).unwrap();
    let first = m.outputs.keys().next().unwrap().clone();
    m.outputs.insert(first, "00".repeat(32));
    let err = replay(&m, &dir.path().join("b")).unwrap_err();
    assert!(matches!(err, Error::ReplayMismatch { .. }), "{err}");
}

#[test]
fn missing_inputs_name_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    match p.run(Stage::TrainBase).unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "gen-data"),
        e => panic!("unexpected {e}"),
    }
    p.run(Stage::GenData).unwrap();
    match p.run(Stage::Harvest).unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "train-base"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert!("train".parse::<Stage>().is_err());
}
