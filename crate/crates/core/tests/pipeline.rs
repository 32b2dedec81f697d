//! End-to-end runs of a minutes-scale configuration.
//!
//! Needs the Fashion-MNIST files under `$MIA_LENS_DATA` (default `/root/data`).

use std::path::Path;

use mia_lens::config::RunConfig;
use mia_lens::pipeline::{marker_path, Pipeline, PipelineOptions, Stage, StageMarker, StageStatus};
use mia_lens::report::{read_grid_csv, report_path, verify_artifacts, RunReport};
use mia_lens::{io, Error};

fn config(out: &Path, extra: &str) -> RunConfig {
    let text = format!(
        r#"
name = "itest"
dataset = "fmnist"
arch = "mlp"
split_sizes = "200,200,200,200"
seed = 11
grid_layers = "last"
baseline_layers = "last"
methods = ["t_test", "random_forest"]
thresholds = [20, 60]
shapley_permutations = 8
shapley_max_rows = 40
sweep_kmax = 3
explain_samples = 2
explain_steps = 8
pca_samples = 50
out_root = "{}"
{extra}
[classifier]
learning_rate = 1e-3
epochs = 10
[attack]
learning_rate = 1e-3
epochs = 2
[selection.forest]
trees = 20
"#,
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn full_run_is_idempotent_and_manifest_checks_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let mut p = Pipeline::new(cfg.clone(), PipelineOptions::default()).unwrap();
    p.run_all().unwrap();
    assert_eq!(p.executed(), &Stage::ALL[..]);

    let report: RunReport = io::read_json(&report_path(&p.run)).unwrap();
    assert_eq!(report.status, "complete");
    assert_eq!(report.grid.len(), 5);
    assert_eq!(report.classifiers.len(), 2);
    assert_eq!(report.sweep.len(), 6);
    assert!(report.ssim.is_some());
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    assert!(report.figures.iter().any(|f| f == "figures/grid-fc1.png"));
    verify_artifacts(&p.run, &report).unwrap();

    let mut again = Pipeline::new(cfg.clone(), PipelineOptions::default()).unwrap();
    again.run_all().unwrap();
    assert!(again.executed().is_empty());

    // A damaged output invalidates its stage and everything downstream.
    let ranking = p.run.join("ensemble").join("ranking.csv");
    std::fs::write(&ranking, "tampered").unwrap();
    let mut third = Pipeline::new(cfg, PipelineOptions::default()).unwrap();
    third.run_all().unwrap();
    assert_eq!(third.executed(), &[Stage::Ensemble, Stage::Sweep, Stage::Report]);
    assert_ne!(std::fs::read_to_string(&ranking).unwrap(), "tampered");
}

#[test]
fn halted_grid_resumes_without_retraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let halting = PipelineOptions {
        resume: false,
        halt_after_cells: Some(2),
    };
    let mut p = Pipeline::new(cfg.clone(), halting).unwrap();
    assert!(matches!(p.ensure(Stage::Grid), Err(Error::Halted { completed: 2 })));
    let m: StageMarker = io::read_json(&marker_path(&p.run, Stage::Grid)).unwrap();
    assert_eq!(m.status, StageStatus::Failed);
    let failed: RunReport = io::read_json(&report_path(&p.run)).unwrap();
    assert_eq!(failed.failed_stage.as_deref(), Some("grid"));

    let cells = p.run.join("grid").join("cells");
    let finished: Vec<_> = std::fs::read_dir(&cells)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| {
            let t = std::fs::metadata(&p).unwrap().modified().unwrap();
            (p, t)
        })
        .collect();
    assert_eq!(finished.len(), 2);

    let resume = PipelineOptions {
        resume: true,
        halt_after_cells: None,
    };
    let mut r = Pipeline::new(cfg.clone(), resume).unwrap();
    r.ensure(Stage::Grid).unwrap();
    assert_eq!(r.executed(), &[Stage::Grid]);
    for (path, t) in finished {
        assert_eq!(std::fs::metadata(&path).unwrap().modified().unwrap(), t, "{} rewritten", path.display());
    }
    let resumed = read_grid_csv(&p.run.join("grid").join("results.csv")).unwrap();

    let other = tempfile::tempdir().unwrap();
    let mut fresh = Pipeline::new(config(other.path(), ""), PipelineOptions::default()).unwrap();
    fresh.ensure(Stage::Grid).unwrap();
    let straight = read_grid_csv(&fresh.run.join("grid").join("results.csv")).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn failures_leave_a_failed_marker_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("data_root = \"{}\"", empty.path().display()));
    let mut p = Pipeline::new(cfg, PipelineOptions::default()).unwrap();
    assert!(matches!(p.run_all(), Err(Error::DatasetNotFound(_))));
    let m: StageMarker = io::read_json(&marker_path(&p.run, Stage::Split)).unwrap();
    assert_eq!(m.status, StageStatus::Failed);
    let report: RunReport = io::read_json(&report_path(&p.run)).unwrap();
    assert_eq!(report.status, "failed");
    assert_eq!(report.failed_stage.as_deref(), Some("split"));
}

#[test]
fn explain_mask_override_must_name_a_grid_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(config(dir.path(), "explain_mask = \"rf-60\""), PipelineOptions::default()).unwrap();
    p.ensure(Stage::Grid).unwrap();
    assert_eq!(p.explain_cell().unwrap().key.name(), "random_forest-60-fc1");

    let mut q = Pipeline::new(config(dir.path(), "explain_mask = \"kl-40\""), PipelineOptions::default()).unwrap();
    q.ensure(Stage::Grid).unwrap();
    assert!(matches!(q.explain_cell(), Err(Error::InvalidConfiguration(_))));
}
