//! Run report: accuracies, grid, ensemble, importance and SSIM summaries
//! gathered from the run directory, with a hash manifest of every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::attack::{CellKey, GridResult};
use crate::config::RunConfig;
use crate::ensemble::{sweep_csv_path, ModelRanking, SweepPoint};
use crate::explain::SsimRow;
use crate::figures::{bar_chart, beeswarm, box_chart, line_chart, membership_scatter, Series};
use crate::pipeline::{marker_path, Stage, StageMarker, StageStatus};
use crate::{io, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub role: String,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub epochs: usize,
}

pub fn classifier_summary_path(run: &Path) -> PathBuf {
    run.join("checkpoints").join("accuracy.json")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub k: usize,
    /// Stacked cells, most important first.
    pub members: Vec<String>,
    /// Keyed by split (`holdout`, `target`).
    pub scores: BTreeMap<String, Score>,
}

pub fn ensemble_metrics_path(run: &Path) -> PathBuf {
    run.join("ensemble").join("metrics.json")
}

/// One grid model scored alone on an ensemble split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleRow {
    pub cell: CellKey,
    pub split: String,
    pub accuracy: f64,
    pub f1: f64,
}

pub fn singles_csv_path(run: &Path) -> PathBuf {
    run.join("ensemble").join("singles.csv")
}

pub fn write_singles_csv(rows: &[SingleRow], path: &Path) -> Result<()> {
    io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "threshold", "layer", "split", "accuracy", "f1"])?;
    for r in rows {
        w.write_record([
            r.cell.method_id().to_string(),
            format!("{:.2}", r.cell.threshold.fraction()),
            r.cell.layer.clone(),
            r.split.clone(),
            io::fmt_f64(r.accuracy),
            io::fmt_f64(r.f1),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimSummary {
    /// Grid cell whose attack model was attributed.
    pub cell: String,
    pub samples: usize,
    pub member_mean: Option<f64>,
    pub nonmember_mean: Option<f64>,
    /// Largest `|f(x) - f(baseline) - sum(attributions)|` before correction.
    pub max_completeness_gap: f64,
}

pub fn pca_csv_path(run: &Path) -> PathBuf {
    run.join("explain").join("pca.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: String,
    pub threshold: f64,
    pub layer: String,
    pub shadow: Score,
    pub target: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub rank: usize,
    pub cell: String,
    pub score: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub status: StageStatus,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub version: String,
    pub config_hash: String,
    pub root_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub dataset: String,
    pub arch: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `complete` or `failed`.
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub provenance: ReportProvenance,
    pub stages: Vec<StageSummary>,
    pub classifiers: Vec<ClassifierSummary>,
    pub grid: Vec<GridRow>,
    /// Best selected cell by target accuracy.
    pub best_cell: Option<GridRow>,
    pub ensemble: Option<EnsembleSummary>,
    pub sweep: Vec<SweepPoint>,
    pub importance: Vec<ImportanceRow>,
    pub ssim: Option<SsimSummary>,
    pub figures: Vec<String>,
    pub warnings: Vec<String>,
    /// Run-relative path to SHA-256 of every artifact.
    pub artifacts: BTreeMap<String, String>,
}

pub fn report_path(run: &Path) -> PathBuf {
    run.join("report.json")
}

fn figure_index_path(run: &Path) -> PathBuf {
    run.join("figures").join("index.json")
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct FigureIndex {
    figures: Vec<String>,
    warnings: Vec<String>,
}

/// Grid rows read back from `grid/results.csv`, in file order.
pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<GridRow> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<f64> {
            f(i).parse()
                .map_err(|_| Error::Serialization(format!("{}: bad number '{}'", path.display(), f(i))))
        };
        let score = Score {
            accuracy: num(4)?,
            f1: num(5)?,
        };
        let (method, threshold, layer) = (f(0), num(1)?, f(2));
        let pos = rows
            .iter()
            .position(|g| g.method == method && g.threshold == threshold && g.layer == layer);
        let idx = match pos {
            Some(i) => i,
            None => {
                rows.push(GridRow {
                    method,
                    threshold,
                    layer,
                    shadow: score,
                    target: score,
                });
                rows.len() - 1
            }
        };
        match f(3).as_str() {
            "shadow" => rows[idx].shadow = score,
            _ => rows[idx].target = score,
        }
    }
    Ok(rows)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::Serialization(format!("{}: malformed row", path.display()));
        out.push(SweepPoint {
            k: rec.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            split: rec.get(1).ok_or_else(bad)?.to_string(),
            accuracy: rec.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            f1: rec.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn read_ssim_csv(path: &Path) -> Result<Vec<SsimRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::Serialization(format!("{}: malformed row", path.display()));
        out.push(SsimRow {
            sample: rec.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            membership: rec.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            ssim: rec.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn read_optional<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>, warnings: &mut Vec<String>) -> Option<T> {
    if !path.exists() {
        return None;
    }
    match read(path) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("could not read {}: {e}", path.display()));
            None
        }
    }
}

fn rel(run: &Path, p: &Path) -> String {
    p.strip_prefix(run).unwrap_or(p).to_string_lossy().into_owned()
}

/// Draws every figure whose data exists; missing series are skipped with a
/// warning recorded in `figures/index.json`.
pub fn emit_figures(run: &Path) -> Result<Vec<PathBuf>> {
    let dir = run.join("figures");
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let skip = |what: &str, warnings: &mut Vec<String>| {
        let w = format!("skipped {what}: no data");
        warn!("{w}");
        warnings.push(w);
    };

    let grid = read_optional(&GridResult::csv_path(run), read_grid_csv, &mut warnings).unwrap_or_default();
    let mut layers: Vec<String> = Vec::new();
    for g in &grid {
        if !layers.contains(&g.layer) {
            layers.push(g.layer.clone());
        }
    }
    for layer in &layers {
        let mut series: Vec<Series> = Vec::new();
        for g in grid.iter().filter(|g| &g.layer == layer && g.method != "none") {
            let pt = (g.threshold * 100.0, g.target.accuracy);
            match series.iter_mut().find(|s| s.name == g.method) {
                Some(s) => s.points.push(pt),
                None => series.push(Series {
                    name: g.method.clone(),
                    points: vec![pt],
                }),
            }
        }
        let reference: Vec<(String, f64)> = grid
            .iter()
            .filter(|g| &g.layer == layer && g.method == "none")
            .map(|g| ("all neurons".to_string(), g.target.accuracy))
            .collect();
        if series.is_empty() {
            continue;
        }
        let p = dir.join(format!("grid-{layer}.png"));
        line_chart(
            &p,
            &format!("Attack accuracy vs kept neurons ({layer})"),
            ("neurons kept (%)", "target-eval accuracy"),
            &series,
            &reference,
        )?;
        out.push(p);
    }
    if grid.is_empty() {
        skip("grid charts", &mut warnings);
    }
    let baselines: Vec<Series> = {
        let pts: Vec<(f64, f64)> = grid
            .iter()
            .filter(|g| g.method == "none")
            .enumerate()
            .map(|(i, g)| (i as f64 + 1.0, g.target.accuracy))
            .collect();
        if pts.len() >= 2 {
            vec![Series {
                name: "all neurons".into(),
                points: pts,
            }]
        } else {
            vec![]
        }
    };
    if !baselines.is_empty() {
        let p = dir.join("layers.png");
        line_chart(&p, "Unselected attack by layer depth", ("layer (shallow to deep)", "target-eval accuracy"), &baselines, &[])?;
        out.push(p);
    }

    let ranking: Option<ModelRanking> =
        read_optional(&run.join("ensemble").join("ranking.json"), |p| io::read_json(p), &mut warnings);
    match &ranking {
        Some(r) if !r.order.is_empty() => {
            let top: Vec<usize> = r.top(10).to_vec();
            let bars: Vec<(String, f64)> = top.iter().map(|&c| (r.columns[c].name(), r.scores[c])).collect();
            let p = dir.join("importance.png");
            bar_chart(&p, "Top attack models by mean |Shapley value|", "mean |Shapley value|", &bars)?;
            out.push(p);
            if r.values.is_empty() {
                skip("beeswarm", &mut warnings);
            } else {
                let rows: Vec<(String, Vec<f64>)> = top
                    .iter()
                    .map(|&c| (r.columns[c].name(), r.values.iter().map(|v| v[c]).collect()))
                    .collect();
                let p = dir.join("beeswarm.png");
                beeswarm(&p, "Per-record Shapley values", &rows)?;
                out.push(p);
            }
        }
        _ => {
            skip("importance chart", &mut warnings);
            skip("beeswarm", &mut warnings);
        }
    }

    let sweep = read_optional(&sweep_csv_path(run), read_sweep_csv, &mut warnings).unwrap_or_default();
    if sweep.is_empty() {
        skip("ensemble sweep", &mut warnings);
    } else {
        let mut series: Vec<Series> = Vec::new();
        for s in &sweep {
            let pt = (s.k as f64, s.accuracy);
            match series.iter_mut().find(|x| x.name == s.split) {
                Some(x) => x.points.push(pt),
                None => series.push(Series {
                    name: s.split.clone(),
                    points: vec![pt],
                }),
            }
        }
        let p = dir.join("sweep.png");
        line_chart(&p, "Stacked ensemble accuracy vs k", ("k (top models)", "accuracy"), &series, &[])?;
        out.push(p);
    }

    let ssim = read_optional(&run.join("explain").join("ssim.csv"), read_ssim_csv, &mut warnings).unwrap_or_default();
    if ssim.is_empty() {
        skip("SSIM summary", &mut warnings);
    } else {
        let groups: Vec<(String, Vec<f64>)> = [(1u8, "members"), (0, "non-members")]
            .into_iter()
            .map(|(m, name)| {
                (
                    name.to_string(),
                    ssim.iter().filter(|r| r.membership == m).map(|r| r.ssim).collect(),
                )
            })
            .collect();
        let p = dir.join("ssim.png");
        box_chart(&p, "SSIM of target vs attack attributions", "SSIM", &groups)?;
        out.push(p);
    }

    let pca_path = pca_csv_path(run);
    let pca: Vec<(String, f64, f64, u8)> = read_optional(
        &pca_path,
        |p| {
            let mut r = csv::Reader::from_path(p)?;
            let mut v = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                let bad = || Error::Serialization(format!("{}: malformed row", p.display()));
                v.push((
                    rec.get(0).ok_or_else(bad)?.to_string(),
                    rec.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?,
                    rec.get(4).ok_or_else(bad)?.parse().map_err(|_| bad())?,
                    rec.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?,
                ));
            }
            Ok(v)
        },
        &mut warnings,
    )
    .unwrap_or_default();
    let mut masks: Vec<String> = Vec::new();
    for p in &pca {
        if !masks.contains(&p.0) {
            masks.push(p.0.clone());
        }
    }
    if masks.is_empty() {
        skip("PCA scatter", &mut warnings);
    }
    for m in masks {
        let pts: Vec<(f64, f64, u8)> = pca.iter().filter(|p| p.0 == m).map(|p| (p.1, p.2, p.3)).collect();
        let p = dir.join(format!("pca-{m}.png"));
        membership_scatter(&p, &format!("Target activations, PCA ({m})"), &pts)?;
        out.push(p);
    }

    let index = FigureIndex {
        figures: out.iter().map(|p| rel(run, p)).collect(),
        warnings,
    };
    io::write_json(&figure_index_path(run), &index)?;
    out.push(figure_index_path(run));
    Ok(out)
}

const SEED_KEYS: [&str; 9] = [
    "split",
    "split/attack",
    "train/target",
    "train/shadow",
    "grid",
    "ensemble/shapley",
    "ensemble/stack",
    "explain",
    "explain/pca",
];

/// Assembles the report from whatever the run directory holds.
pub fn build_report(run: &Path, config: &RunConfig, failure: Option<(Stage, String)>) -> Result<RunReport> {
    let mut warnings = Vec::new();
    let mut stages = Vec::new();
    let mut artifacts = BTreeMap::new();
    for stage in Stage::ALL {
        let Some(m) = read_optional(&marker_path(run, stage), |p| io::read_json::<StageMarker>(p), &mut warnings)
        else {
            continue;
        };
        if m.status == StageStatus::Complete && stage != Stage::Report {
            artifacts.extend(m.outputs.clone());
        }
        stages.push(StageSummary {
            stage: m.stage,
            status: m.status,
            seconds: m.seconds,
            error: m.error,
        });
    }
    let index: FigureIndex = read_optional(&figure_index_path(run), |p| io::read_json(p), &mut warnings).unwrap_or_default();
    for f in &index.figures {
        artifacts.insert(f.clone(), io::sha256_file(&run.join(f))?);
    }
    warnings.extend(index.warnings.iter().cloned());

    let grid = read_optional(&GridResult::csv_path(run), read_grid_csv, &mut warnings).unwrap_or_default();
    let best_cell = grid
        .iter()
        .filter(|g| g.method != "none")
        .fold(None, |best: Option<&GridRow>, g| match best {
            Some(b) if b.target.accuracy >= g.target.accuracy => Some(b),
            _ => Some(g),
        })
        .cloned();
    let ranking: Option<ModelRanking> =
        read_optional(&run.join("ensemble").join("ranking.json"), |p| io::read_json(p), &mut warnings);
    let importance = ranking
        .map(|r| {
            r.order
                .iter()
                .enumerate()
                .map(|(i, &c)| ImportanceRow {
                    rank: i + 1,
                    cell: r.columns[c].name(),
                    score: r.scores[c],
                    selected: i < r.k,
                })
                .collect()
        })
        .unwrap_or_default();

    Ok(RunReport {
        status: if failure.is_some() { "failed" } else { "complete" }.into(),
        failed_stage: failure.as_ref().map(|f| f.0.id().to_string()),
        error: failure.map(|f| f.1),
        provenance: ReportProvenance {
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            root_seed: config.seed,
            stage_seeds: SEED_KEYS.iter().map(|k| (k.to_string(), config.stage_seed(k))).collect(),
            dataset: config.dataset.clone(),
            arch: config.arch.to_string(),
        },
        stages,
        classifiers: read_optional(&classifier_summary_path(run), |p| io::read_json(p), &mut warnings)
            .unwrap_or_default(),
        grid,
        best_cell,
        ensemble: read_optional(&ensemble_metrics_path(run), |p| io::read_json(p), &mut warnings),
        sweep: read_optional(&sweep_csv_path(run), read_sweep_csv, &mut warnings).unwrap_or_default(),
        importance,
        ssim: read_optional(&run.join("explain").join("summary.json"), |p| io::read_json(p), &mut warnings),
        figures: index.figures,
        warnings,
        artifacts,
    })
}

pub fn write_report(run: &Path, config: &RunConfig, failure: Option<(Stage, String)>) -> Result<PathBuf> {
    let report = build_report(run, config, failure)?;
    let path = report_path(run);
    io::write_json(&path, &report)?;
    Ok(path)
}

/// Checks that every artifact in the manifest exists and hashes the same.
pub fn verify_artifacts(run: &Path, report: &RunReport) -> Result<()> {
    for (rel, hash) in &report.artifacts {
        let actual = io::sha256_file(&run.join(rel))?;
        if &actual != hash {
            return Err(Error::Serialization(format!("{rel}: hash {actual} differs from manifest {hash}")));
        }
    }
    Ok(())
}
