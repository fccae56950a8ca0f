use std::path::Path;

use sqs_core::ingest::{Dataset, Gender, Tournament};
use sqs_core::pipeline::{run, run_stage, PipelineConfig, Stage, StageSelection};
use sqs_core::simulate::{write_slam_files, SlamSim};
use sqs_core::Error;

fn config(data: &Path, out: &Path, datasets: Vec<Dataset>) -> PipelineConfig {
    PipelineConfig {
        data_dir: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        datasets,
        years: vec![2018, 2019],
        seed: 7,
        jobs: 2,
        ..PipelineConfig::default()
    }
}

fn wimbledon_men() -> Dataset {
    Dataset::new(Tournament::Wimbledon, Gender::M)
}

#[test]
fn full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_slam_files(&data, Tournament::Wimbledon, &SlamSim::default(), 11).unwrap();
    let cfg = config(&data, &tmp.path().join("out"), vec![wimbledon_men()]);

    let summary = run(&cfg, StageSelection::All).unwrap();
    assert_eq!(summary.exit_code(), 0, "{:?}", summary.manifest.datasets);
    let expected: usize = Stage::ALL.iter().map(|s| s.outputs().len()).sum();
    assert!(summary.manifest.artifacts.len() >= 7);
    assert_eq!(summary.manifest.artifacts.len(), expected);
    assert!(summary.manifest_path.is_file());

    let dir = cfg.dataset_dir(wimbledon_men());
    let eval = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert!(eval.starts_with("# config_hash="));
    let rankings = std::fs::read_to_string(dir.join("rankings.txt")).unwrap();
    assert!(rankings.contains("Wimbledon men's singles"));
    // Every CSV artifact carries provenance on its first line.
    for a in &summary.manifest.artifacts {
        let text = std::fs::read_to_string(tmp.path().join("out").join(&a.path)).unwrap();
        if a.path.ends_with(".json") {
            assert!(text.contains("\"provenance\""), "{}", a.path);
        } else {
            assert!(text.starts_with("# config_hash="), "{}", a.path);
        }
    }
}

#[test]
fn missing_points_file_fails_only_that_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_slam_files(&data, Tournament::Wimbledon, &SlamSim::default(), 5).unwrap();
    write_slam_files(&data, Tournament::UsOpen, &SlamSim::default(), 6).unwrap();
    std::fs::remove_file(data.join("2019-usopen-points.csv")).unwrap();
    let us = Dataset::new(Tournament::UsOpen, Gender::W);
    let cfg = config(&data, &tmp.path().join("out"), vec![wimbledon_men(), us]);

    let summary = run(&cfg, StageSelection::All).unwrap();
    assert_eq!(summary.exit_code(), 1);
    let failed: Vec<_> = summary.manifest.datasets.iter().filter(|d| !d.ok).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].dataset, "usopen-W");
    assert_eq!(failed[0].failed_stage, Some(Stage::Ingest));
    assert!(failed[0].error.as_ref().unwrap().contains("2019-usopen-points.csv"));
    assert!(cfg.dataset_dir(wimbledon_men()).join("rankings.txt").is_file());
}

#[test]
fn evaluate_without_fit_names_the_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_slam_files(&data, Tournament::Wimbledon, &SlamSim::default(), 2).unwrap();
    let cfg = config(&data, &tmp.path().join("out"), vec![wimbledon_men()]);
    run_stage(&cfg, wimbledon_men(), Stage::Ingest).unwrap();
    run_stage(&cfg, wimbledon_men(), Stage::Features).unwrap();
    match run_stage(&cfg, wimbledon_men(), Stage::Evaluate) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("sqs_s1.csv"), "{}", p.display()),
        other => panic!("expected MissingArtifact, got {other:?}"),
    }
    match run_stage(&cfg, wimbledon_men(), Stage::Score) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("fit_s1.json")),
        other => panic!("expected MissingArtifact, got {other:?}"),
    }
}

#[test]
fn stagewise_equals_all_and_runs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_slam_files(&data, Tournament::Wimbledon, &SlamSim::default(), 3).unwrap();
    let datasets = vec![wimbledon_men(), Dataset::new(Tournament::Wimbledon, Gender::W)];

    let a = run(&config(&data, &tmp.path().join("a"), datasets.clone()), StageSelection::All).unwrap();
    let b = run(&config(&data, &tmp.path().join("b"), datasets.clone()), StageSelection::All).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(
        std::fs::read(&a.manifest_path).unwrap(),
        std::fs::read(&b.manifest_path).unwrap()
    );

    let c_cfg = config(&data, &tmp.path().join("c"), datasets);
    let mut c = None;
    for stage in Stage::ALL {
        c = Some(run(&c_cfg, StageSelection::Only(stage)).unwrap());
    }
    assert_eq!(a.manifest.artifacts, c.unwrap().manifest.artifacts);
}
