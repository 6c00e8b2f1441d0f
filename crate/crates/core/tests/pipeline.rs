use std::fs;
use std::path::Path;

use metalth::harness::report::parse_eval_csv;
use metalth::harness::{run_pipeline, seed_dir, Checkpoint, PipelineConfig, PRETRAIN_FILE, PRUNE_FILE, RETRAIN_FILE};
use metalth::metatest::mean_std;
use metalth::{Error, Stage};

fn small(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    for kv in [
        "pretrain.iterations=12",
        "pretrain.batch=4",
        "retrain.iterations=6",
        "retrain.batch=4",
        "test.tasks=12",
        "test.lr=0.4",
        "episode.query=5",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.out = out.to_path_buf();
    cfg
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn single_seed_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.first_error().is_none());
    for f in [
        PRETRAIN_FILE,
        PRUNE_FILE,
        RETRAIN_FILE,
        "eval.csv",
        "summary.txt",
        "timing.txt",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let stages: Vec<Stage> = [PRETRAIN_FILE, PRUNE_FILE, RETRAIN_FILE]
        .iter()
        .map(|f| Checkpoint::load(dir.path().join(f)).unwrap().stage())
        .collect();
    assert_eq!(stages, [Stage::Pretrained, Stage::Pruned, Stage::Retrained]);
    let rows = parse_eval_csv(&read(dir.path().join("eval.csv")));
    assert_eq!(rows.len(), 12);
    assert!(read(dir.path().join("summary.txt")).contains("sparsity=0.900000"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = small(a.path());
    ca.set("run.ablate", "true").unwrap();
    let mut cb = ca.clone();
    cb.out = b.path().to_path_buf();
    run_pipeline(&ca).unwrap();
    run_pipeline(&cb).unwrap();
    for f in [
        "eval.csv",
        "summary.txt",
        "ablations.csv",
        "layer_deltas.csv",
        RETRAIN_FILE,
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_after_prune_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let cut = tempfile::tempdir().unwrap();
    let cfg = small(full.path());
    run_pipeline(&cfg).unwrap();

    let mut partial = small(cut.path());
    partial.set("run.resume", "true").unwrap();
    run_pipeline(&partial).unwrap();
    // Interrupt after pruning: the retrained checkpoint and results never landed.
    for f in [RETRAIN_FILE, "eval.csv", "summary.txt"] {
        fs::remove_file(cut.path().join(f)).unwrap();
    }
    let before = fs::read(cut.path().join(PRUNE_FILE)).unwrap();
    run_pipeline(&partial).unwrap();
    assert_eq!(fs::read(cut.path().join(PRUNE_FILE)).unwrap(), before);
    for f in ["eval.csv", "summary.txt", RETRAIN_FILE] {
        assert_eq!(
            fs::read(full.path().join(f)).unwrap(),
            fs::read(cut.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_refuses_a_foreign_config_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    run_pipeline(&cfg).unwrap();
    cfg.set("run.resume", "true").unwrap();
    cfg.set("pretrain.alpha", "0.3").unwrap();
    let report = run_pipeline(&cfg).unwrap();
    assert!(matches!(report.first_error(), Some(Error::HashMismatch { .. })));
    cfg.set("run.force", "true").unwrap();
    assert!(run_pipeline(&cfg).unwrap().first_error().is_none());
}

#[test]
fn cross_seed_std_is_recomputable_from_eval_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.set("run.seeds", "0,1,2").unwrap();
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.seed_means().len(), 3);
    for s in [0, 1, 2] {
        assert!(seed_dir(&cfg, s).join(RETRAIN_FILE).exists());
    }
    let rows = parse_eval_csv(&read(dir.path().join("eval.csv")));
    let means: Vec<f64> = [0u64, 1, 2]
        .iter()
        .map(|s| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.0 == *s).map(|r| r.3).collect();
            mean_std(&accs).0
        })
        .collect();
    let (m, sd) = mean_std(&means);
    let (rm, rsd) = mean_std(&report.seed_means());
    assert!((m - rm).abs() < 1e-5 && (sd - rsd).abs() < 1e-5);
    let summary = read(dir.path().join("summary.txt"));
    let line = summary
        .lines()
        .find(|l| l.starts_with("meta-lth across seeds"))
        .unwrap();
    assert!(line.ends_with("n=3"), "{line}");
}

#[test]
fn failing_seed_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.set("run.seeds", "0,1").unwrap();
    cfg.set("run.resume", "true").unwrap();
    // A corrupt checkpoint for seed 1 only.
    let bad = seed_dir(&cfg, 1);
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join(PRETRAIN_FILE), b"metalth-checkpoint\nversion = 1\n").unwrap();
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.runs[0].1.is_ok());
    assert!(matches!(report.runs[1].1, Err(Error::Truncated { .. })));
    let summary = read(dir.path().join("summary.txt"));
    assert!(summary.contains("seed 1: failed"));
    assert!(summary.contains("n=1"));
}

#[test]
fn zero_percent_pruning_warns_and_matches_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.set("prune.percent", "0").unwrap();
    cfg.set("run.ablate", "true").unwrap();
    let report = run_pipeline(&cfg).unwrap();
    assert!(!report.warnings.is_empty());
    let run = report.successes().next().unwrap();
    assert_eq!(run.retrained.current.prunable_sparsity(), 0.0);
    let ab = run.ablations.as_ref().unwrap();
    let zero = ab.get(metalth::AdaptMode::ZeroShot).unwrap();
    let lth = ab.get(metalth::AdaptMode::MetaLth).unwrap();
    assert_eq!(zero.accuracies, lth.accuracies);
    assert!(read(dir.path().join("summary.txt")).contains("warning:"));
}
