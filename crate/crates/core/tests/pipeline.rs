use std::collections::BTreeSet;
use std::path::Path;

use lowdose::phantom::PhantomSpec;
use lowdose::pipeline::{
    run_pipeline, run_until, DirLock, ExperimentConfig, Profile, StageRecord, Until, LINEAGE_JSON, METRICS_CSV,
    REPORT_MD,
};
use lowdose::Error;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Profile::Desk);
    cfg.output_dir = dir.to_path_buf();
    cfg.phantom = PhantomSpec::sized(96, 96, 3);
    cfg.counts.n_gt = 3;
    cfg.counts.n_eval = 2;
    cfg.counts.n_ld_per_gamma = 2;
    cfg.data.n_phantoms = 1;
    cfg.data.patch_count = 24;
    cfg.data.patch_size = 16;
    cfg.train.epochs = 1;
    cfg.train.halve_every = 1;
    cfg.train.batch = 8;
    cfg.evaluation.bootstrap.resamples = 10;
    cfg.evaluation.roi_size = 24;
    cfg.evaluation.infer_tile = 48;
    cfg
}

fn methods_in_csv(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(METRICS_CSV))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect()
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out
}

#[test]
fn no_methods_gives_baseline_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods.clear();
    let summary = run_pipeline(&cfg).unwrap();
    assert!(summary
        .executed
        .iter()
        .all(|s| !s.starts_with("train") && !s.starts_with("restore")));
    assert_eq!(methods_in_csv(dir.path()), ["ld", "fd", "ld", "fd"]);
    let report = std::fs::read_to_string(dir.path().join(REPORT_MD)).unwrap();
    assert!(report.contains("| LD |") && report.contains("| FD |"));
    assert!(!report.contains("DNN") && !report.contains("| MB |"));
}

#[test]
fn rows_follow_table_order_and_every_artifact_is_in_the_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.gammas = vec![0.5];
    cfg.losses = vec![lowdose::losses::LossKind::Mse, lowdose::losses::LossKind::Pl1];
    run_pipeline(&cfg).unwrap();
    assert_eq!(methods_in_csv(dir.path()), ["ld", "dnn-mse", "dnn-pl1", "mb", "fd"]);

    #[derive(serde::Deserialize)]
    struct Lineage {
        stages: Vec<StageRecord>,
    }
    let text = std::fs::read_to_string(dir.path().join(LINEAGE_JSON)).unwrap();
    let lineage: Lineage = serde_json::from_str(&text).unwrap();
    let ids: BTreeSet<&str> = lineage.stages.iter().map(|s| s.stage.as_str()).collect();
    for s in &lineage.stages {
        for up in &s.inputs {
            assert!(ids.contains(up.as_str()), "{} depends on unknown stage {up}", s.stage);
        }
    }
    let produced: BTreeSet<String> = lineage.stages.iter().flat_map(|s| s.outputs.iter().cloned()).collect();
    // Bookkeeping files are not stage outputs.
    let orphans: Vec<String> = files_under(dir.path())
        .into_iter()
        .filter(|f| !f.starts_with("stages/") && f != "config.toml" && !produced.contains(f))
        .collect();
    assert!(orphans.is_empty(), "files outside the lineage: {orphans:?}");
}

#[test]
fn partial_runs_resume_and_config_changes_invalidate_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.gammas = vec![0.5];
    cfg.losses = vec![lowdose::losses::LossKind::Mse];
    let first = run_until(&cfg, Until::Train).unwrap();
    assert!(first.executed.iter().any(|s| s == "train-g050-mse"));
    assert!(!first.executed.iter().any(|s| s == "evaluate"));

    let second = run_pipeline(&cfg).unwrap();
    assert!(second.skipped.iter().any(|s| s == "train-g050-mse"));
    assert!(second.executed.iter().any(|s| s == "evaluate"));

    cfg.evaluation.roi_size = 16;
    let third = run_pipeline(&cfg).unwrap();
    assert!(third.skipped.iter().any(|s| s == "train-g050-mse"));
    assert!(third.executed.iter().any(|s| s == "evaluate"));
    assert!(third.executed.iter().any(|s| s == "report"));
}

#[test]
fn lock_file_blocks_a_second_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let _held = DirLock::acquire(dir.path()).unwrap();
    match run_pipeline(&cfg) {
        Err(Error::Precondition(m)) => assert!(m.contains("another pipeline")),
        other => panic!("expected a lock error, got {other:?}"),
    }
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods.clear();
    run_until(&cfg, Until::Data).unwrap();
    std::fs::write(dir.path().join("acq/gt_00.raw"), b"truncated").unwrap();
    // Make the evaluation stale so it reads the damaged file.
    cfg.evaluation.roi_size = 16;
    match run_pipeline(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "evaluate"),
        other => panic!("expected a stage error, got {other:?}"),
    }
}
