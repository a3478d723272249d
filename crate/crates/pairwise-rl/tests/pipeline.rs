//! End-to-end pipeline tests on a deliberately small configuration:
//! stage sequencing, up-to-date skips, input integrity checks, config
//! invalidation, and byte-identical re-runs.

use std::collections::BTreeMap;
use std::fs;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use pairwise_rl::error::Error;
use pairwise_rl::io::{file_sha256, read_jsonl};
use pairwise_rl::runner::{artifact, kind, AblationReport, ExperimentConfig, Runner, Stage};

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.out_dir = out.to_string_lossy().into_owned();
    cfg.data.train_pairs = 160;
    cfg.data.eval_pairs = 80;
    cfg.data.prompts = 4;
    cfg.rm.train.epochs = 1;
    cfg.rm.train.batch_size = 32;
    cfg.distill.train.epochs = 1;
    cfg.anchor.n = 2;
    cfg.anchor.diagnostic_samples = 4;
    cfg.rl.train.iterations = 4;
    cfg.rl.train.prompts_per_iter = 4;
    cfg.rl.train.minibatch = 4;
    cfg.eval.rollouts_per_prompt = 2;
    cfg.klcheck.mc_samples = 2000;
    cfg
}

/// Hash every regular file in `dir` (artifacts are written flat).
fn snapshot(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("out dir should be readable") {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let hash = file_sha256(&entry.path()).unwrap();
            out.insert(name, hash);
        }
    }
    out
}

#[test]
fn run_all_writes_every_stage_output_and_second_run_skips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let outcomes = Runner::new(cfg.clone(), false).unwrap().run_all().unwrap();
    assert_eq!(
        outcomes.len(),
        Stage::ALL.len(),
        "one outcome per stage expected, got {outcomes:?}"
    );
    assert!(
        outcomes.iter().all(|o| o.ran),
        "first run should execute every stage: {outcomes:?}"
    );
    for stage in Stage::ALL {
        for name in stage.outputs(&cfg) {
            assert!(
                dir.path().join(&name).exists(),
                "stage {} should have written {name}",
                stage.name()
            );
        }
    }

    let again = Runner::new(cfg, false).unwrap().run_all().unwrap();
    assert!(
        again.iter().all(|o| !o.ran),
        "second run should skip every up-to-date stage: {again:?}"
    );
}

#[test]
fn forced_rerun_reproduces_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    Runner::new(cfg.clone(), false).unwrap().run_all().unwrap();
    let first = snapshot(dir.path());

    let outcomes = Runner::new(cfg, true).unwrap().run_all().unwrap();
    assert!(
        outcomes.iter().all(|o| o.ran),
        "forced run should execute every stage: {outcomes:?}"
    );
    let second = snapshot(dir.path());

    assert_eq!(
        first, second,
        "forced re-run with identical config should reproduce every file byte for byte"
    );
}

#[test]
fn missing_input_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let runner = Runner::new(cfg, false).unwrap();
    runner.run_all().unwrap();

    fs::remove_file(dir.path().join(artifact::RM_CKPT)).unwrap();
    let err = runner.run(Stage::Distill).unwrap_err();
    match &err {
        Error::MissingInput(msg) => {
            assert!(
                msg.contains(artifact::RM_CKPT) && msg.contains("train-rm"),
                "message should name the file and its producer: {msg}"
            );
        }
        other => panic!("expected MissingInput, got {other:?}"),
    }
    assert_eq!(err.exit_code(), 3, "missing inputs map to exit code 3");
}

#[test]
fn corrupted_input_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let runner = Runner::new(cfg, false).unwrap();
    runner.run_all().unwrap();

    let mut f = OpenOptions::new()
        .append(true)
        .open(dir.path().join(artifact::TRAIN_PAIRS))
        .unwrap();
    writeln!(f, "tampered").unwrap();
    drop(f);

    let err = runner.run(Stage::TrainRm).unwrap_err();
    match &err {
        Error::Integrity(msg) => {
            assert!(
                msg.contains(artifact::TRAIN_PAIRS) && msg.contains("--force"),
                "message should name the file and the recovery flag: {msg}"
            );
        }
        other => panic!("expected Integrity, got {other:?}"),
    }
    assert_eq!(err.exit_code(), 4, "integrity failures map to exit code 4");
}

#[test]
fn config_change_invalidates_previous_stage_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    Runner::new(cfg.clone(), false).unwrap().run_all().unwrap();

    cfg.rl.train.iterations += 1;
    let outcome = Runner::new(cfg, false)
        .unwrap()
        .run(Stage::GenData)
        .unwrap();
    assert!(
        outcome.ran,
        "a config change should discard stage records and re-run even untouched stages"
    );
}

#[test]
fn ablation_seeds_add_a_paired_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eval.ablation_seeds = vec![0, 1];
    cfg.eval.ablation_iterations = 2;

    Runner::new(cfg, false).unwrap().run_all().unwrap();

    let reports: Vec<AblationReport> = read_jsonl(
        &dir.path().join(artifact::ABLATION_REPORT),
        kind::ABLATION_REPORT,
    )
    .unwrap();
    assert_eq!(reports.len(), 1, "ablation report should hold one record");
    let report = &reports[0];
    assert_eq!(report.arms.len(), 2, "one arm per requested seed");
    for arm in &report.arms {
        assert!(
            (arm.delta - (arm.win_with_anchor - arm.win_without_anchor)).abs() < 1e-15,
            "per-seed delta should be the paired win-rate difference: {arm:?}"
        );
    }
    let mean_delta: f64 =
        report.arms.iter().map(|a| a.delta).sum::<f64>() / report.arms.len() as f64;
    assert!(
        (report.mean_delta - mean_delta).abs() < 1e-15,
        "mean delta should average the per-seed deltas"
    );
}
