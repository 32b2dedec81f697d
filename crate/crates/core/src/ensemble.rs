//! Shapley ranking of attack models and stacked ensembles over the top k.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{score_predictions, CellKey, GridResult};
use crate::features::FeatureBank;
use crate::io;
use crate::learners::{
    stratified_kfold, DecisionTree, ForestParams, LogisticRegression, Matrix, RandomForest, Svc, SvcParams, TreeParams,
};
use crate::nn::loss::{softmax, softmax_cross_entropy};
use crate::nn::{Dense, Grads, Layer, Network, Optimizer, Tensor};
use crate::selection::SelectionMask;
use crate::zoo::TrainConfig;
use crate::{Error, Result};

/// Member probabilities of several attack models on the same records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMatrix {
    pub rows: usize,
    /// One per attack model, in grid plan order.
    pub columns: Vec<CellKey>,
    /// Row-major `rows x columns`.
    pub data: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ProbabilityMatrix {
    pub fn new(columns: Vec<CellKey>, data: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let rows = labels.len();
        if data.len() != rows * columns.len() {
            return Err(Error::InvalidInput(format!(
                "{} values for {rows} rows x {} columns",
                data.len(),
                columns.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("probability {v} outside [0, 1]")));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        Ok(Self {
            rows,
            columns,
            data,
            labels,
        })
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols() + j]).collect()
    }

    pub fn matrix(&self) -> Matrix {
        Matrix::new(self.rows, self.cols(), self.data.clone())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            columns: self.columns.clone(),
            data,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Accuracy of each column used alone at the 0.5 threshold.
    pub fn column_accuracies(&self) -> Vec<f64> {
        (0..self.cols())
            .map(|j| score_predictions(&self.column(j), &self.labels).0)
            .collect()
    }
}

/// Collects every selected (non-baseline) grid model's member probability
/// on the given rows of the banks, in grid order.
pub fn collect_model_probabilities(
    grid: &GridResult,
    banks: &[&FeatureBank],
    rows: &[usize],
) -> Result<ProbabilityMatrix> {
    let cells: Vec<_> = grid.selected().collect();
    let columns: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|cell| {
            let model = cell
                .model
                .as_ref()
                .ok_or_else(|| Error::Dependency(format!("model for cell {} is not loaded", cell.key.name())))?;
            let bank = banks
                .iter()
                .find(|b| b.layer == cell.key.layer)
                .ok_or_else(|| Error::Dependency(format!("no features for layer {}", cell.key.layer)))?;
            let mask = SelectionMask {
                layer: cell.key.layer.clone(),
                method: cell.key.method,
                threshold: cell.key.threshold,
                indices: cell.mask.clone(),
            };
            let ds = bank.dataset(&mask)?;
            model.predict_dataset(&ds, rows)
        })
        .collect::<Result<_>>()?;
    let labels = match banks.first() {
        Some(b) => rows.iter().map(|&r| b.membership[r]).collect(),
        None => return Err(Error::Dependency("no feature banks".into())),
    };
    let n = rows.len();
    let mut data = Vec::with_capacity(n * columns.len());
    for i in 0..n {
        data.extend(columns.iter().map(|c| c[i]));
    }
    ProbabilityMatrix::new(cells.iter().map(|c| c.key.clone()).collect(), data, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyParams {
    /// Permutations per row; odd counts are rounded up to antithetic pairs.
    pub permutations: usize,
    /// Rows explained; `None` means all.
    pub max_rows: Option<usize>,
}

impl Default for ShapleyParams {
    fn default() -> Self {
        Self {
            permutations: 256,
            max_rows: None,
        }
    }
}

/// A fitted binary classifier over probability columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaClassifier {
    pub network: Network,
}

impl MetaClassifier {
    /// Five fully connected layers ending in two logits.
    pub fn fit(x: &Matrix, y: &[u8], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = [x.cols, 64, 32, 16, 8, 2];
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(Layer::Dense(Dense::new(w[0], w[1], &mut rng)));
            if w[1] != 2 {
                layers.push(Layer::Relu);
            }
        }
        let mut network = Network::new(layers);
        let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &network);
        let mut grads: Grads = network.zero_grads();
        let mut order: Vec<usize> = (0..x.rows).collect();
        for epoch in 0..config.epochs {
            opt.set_learning_rate(config.schedule.rate(config.learning_rate, epoch, config.epochs));
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let xb = Tensor::new(vec![chunk.len(), x.cols], x.select_rows(chunk).data);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i] as usize).collect();
                let trace = network.forward(&xb, true, None, &[]);
                let (loss, g) = softmax_cross_entropy(&trace.output, &yb);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                grads.zero();
                network.backward(&trace, g, &[], Some(&mut grads), false);
                opt.step(&mut network, &grads);
            }
        }
        Ok(Self { network })
    }

    /// Member probability for each row of `x` (`[n, cols]`).
    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        let out = self.network.predict(x);
        (0..out.batch()).map(|i| softmax(out.row(i))[1]).collect()
    }
}

/// Permutation-sampling Shapley values of `f` at `x` against a fixed
/// background. `groups` partitions the features into players; a group's
/// value is shared equally among its members.
///
/// Returns `(phi, base)` with `sum(phi) + base == f(x)` up to rounding.
pub fn permutation_shapley(
    f: &dyn Fn(&Tensor) -> Vec<f64>,
    x: &[f64],
    background: &[f64],
    groups: &[Vec<usize>],
    permutations: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let d = x.len();
    let g = groups.len();
    let pairs = permutations.div_ceil(2).max(1);
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let mut p: Vec<usize> = (0..g).collect();
        p.shuffle(rng);
        let rev: Vec<usize> = p.iter().rev().copied().collect();
        perms.push(p);
        perms.push(rev);
    }
    // one batch: for each permutation, the background then g cumulative swaps
    let mut inputs = Vec::with_capacity(perms.len() * g * d + d);
    inputs.extend_from_slice(background);
    for p in &perms {
        let mut z = background.to_vec();
        for &player in p {
            for &j in &groups[player] {
                z[j] = x[j];
            }
            inputs.extend_from_slice(&z);
        }
    }
    let n = inputs.len() / d;
    let out = f(&Tensor::new(vec![n, d], inputs));
    let base = out[0];
    let mut phi_g = vec![0.0; g];
    for (k, p) in perms.iter().enumerate() {
        let mut prev = base;
        for (s, &player) in p.iter().enumerate() {
            let cur = out[1 + k * g + s];
            phi_g[player] += cur - prev;
            prev = cur;
        }
    }
    let mut phi = vec![0.0; d];
    for (player, members) in groups.iter().enumerate() {
        let share = phi_g[player] / perms.len() as f64 / members.len() as f64;
        for &j in members {
            phi[j] = share;
        }
    }
    (phi, base)
}

/// Groups byte-identical columns so they act as one player.
pub fn identical_column_groups(m: &Matrix) -> Vec<Vec<usize>> {
    let cols: Vec<Vec<u64>> = (0..m.cols)
        .map(|j| m.column(j).iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..m.cols {
        match groups.iter_mut().find(|g| cols[g[0]] == cols[j]) {
            Some(g) => g.push(j),
            None => groups.push(vec![j]),
        }
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub columns: Vec<CellKey>,
    /// Mean absolute Shapley value per column.
    pub scores: Vec<f64>,
    /// Column indices, most important first.
    pub order: Vec<usize>,
    pub k: usize,
    /// Shapley values of each explained row.
    #[serde(default)]
    pub values: Vec<Vec<f64>>,
}

pub const DEFAULT_K: usize = 8;

impl ModelRanking {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    pub fn rank_of(&self, column: usize) -> usize {
        self.order.iter().position(|&c| c == column).expect("column is ranked") + 1
    }

    pub fn csv_path(run: &Path) -> PathBuf {
        run.join("ensemble").join("ranking.csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
        w.write_record(["rank", "method", "threshold", "layer", "score", "selected"])?;
        for (r, &c) in self.order.iter().enumerate() {
            let key = &self.columns[c];
            w.write_record([
                (r + 1).to_string(),
                key.method_id().to_string(),
                format!("{:.2}", key.threshold.fraction()),
                key.layer.clone(),
                io::fmt_f64(self.scores[c]),
                u8::from(r < self.k).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn check_two_classes(labels: &[u8]) -> Result<()> {
    let members = labels.iter().filter(|&&l| l == 1).count();
    if members == 0 || members == labels.len() {
        return Err(Error::InvalidDataset(format!(
            "need both classes, got {members} members of {}",
            labels.len()
        )));
    }
    Ok(())
}

/// Scores each column by the mean |Shapley value| of a fitted
/// meta-classifier over the rows of `probs`.
pub fn shap_rank_models(
    probs: &ProbabilityMatrix,
    meta_config: &TrainConfig,
    params: &ShapleyParams,
    seed: u64,
) -> Result<ModelRanking> {
    if probs.cols() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two columns".into()));
    }
    check_two_classes(&probs.labels)?;
    let x = probs.matrix();
    let meta = MetaClassifier::fit(&x, &probs.labels, meta_config)?;
    rank_with(&|t: &Tensor| meta.predict(t), probs, params, seed)
}

/// Shapley ranking of an arbitrary scalar model over the columns.
pub fn rank_with(
    f: &(dyn Fn(&Tensor) -> Vec<f64> + Sync),
    probs: &ProbabilityMatrix,
    params: &ShapleyParams,
    seed: u64,
) -> Result<ModelRanking> {
    let x = probs.matrix();
    let c = probs.cols();
    let background: Vec<f64> = (0..c)
        .map(|j| x.column(j).iter().sum::<f64>() / x.rows.max(1) as f64)
        .collect();
    let groups = identical_column_groups(&x);
    let rows = params.max_rows.unwrap_or(x.rows).min(x.rows);
    let phis: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            permutation_shapley(f, x.row(i), &background, &groups, params.permutations, &mut rng).0
        })
        .collect();
    if let Some(i) = phis.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericFault {
            index: i,
            what: "non-finite Shapley value".into(),
        });
    }
    let scores: Vec<f64> = (0..c)
        .map(|j| phis.iter().map(|p| p[j].abs()).sum::<f64>() / rows.max(1) as f64)
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ModelRanking {
        columns: probs.columns.clone(),
        scores,
        order,
        k: DEFAULT_K.min(c),
        values: phis,
    })
}

pub const STACK_FOLDS: usize = 5;

/// Decision tree, random forest and RBF SVC over the selected columns,
/// stacked under a logistic regression.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleModel {
    /// Columns of the probability matrix the ensemble reads, in order.
    pub columns: Vec<usize>,
    pub keys: Vec<CellKey>,
    pub tree: DecisionTree,
    pub forest: RandomForest,
    pub svc: Svc,
    pub meta: LogisticRegression,
}

struct Bases {
    tree: DecisionTree,
    forest: RandomForest,
    svc: Svc,
}

impl Bases {
    fn fit(x: &Matrix, y: &[u8], seed: u64) -> Self {
        let samples: Vec<usize> = (0..x.rows).collect();
        let ((tree, forest), svc) = rayon::join(
            || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (
                    DecisionTree::fit(x, y, &samples, &TreeParams::default(), &mut rng),
                    RandomForest::fit(x, y, &ForestParams::default(), seed ^ 0xf0),
                )
            },
            || Svc::fit(x, y, &SvcParams::default(), seed ^ 0x5c),
        );
        Self { tree, forest, svc }
    }

    fn outputs(&self, row: &[f64]) -> [f64; 3] {
        [
            self.tree.predict_proba(row),
            self.forest.predict_proba(row),
            self.svc.predict_proba(row),
        ]
    }
}

pub fn build_stacked_ensemble(
    probs: &ProbabilityMatrix,
    ranking: &ModelRanking,
    k: usize,
    seed: u64,
) -> Result<EnsembleModel> {
    if k == 0 || k > probs.cols() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            probs.cols()
        )));
    }
    check_two_classes(&probs.labels)?;
    let columns = ranking.top(k).to_vec();
    let x = probs.matrix().select_columns(&columns);
    let y = &probs.labels;
    let folds = stratified_kfold(y, STACK_FOLDS, seed);
    let mut oof = vec![[0.0; 3]; x.rows];
    for (f, held) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..x.rows).filter(|i| held.binary_search(i).is_err()).collect();
        let ty: Vec<u8> = train.iter().map(|&i| y[i]).collect();
        if check_two_classes(&ty).is_err() {
            return Err(Error::InvalidDataset("a stacking fold lacks one class".into()));
        }
        let bases = Bases::fit(&x.select_rows(&train), &ty, seed.wrapping_add(f as u64 + 1));
        for &i in held {
            oof[i] = bases.outputs(x.row(i));
        }
    }
    let meta = LogisticRegression::fit(&Matrix::from_rows(&oof), y, 1.0);
    let bases = Bases::fit(&x, y, seed);
    Ok(EnsembleModel {
        keys: columns.iter().map(|&c| probs.columns[c].clone()).collect(),
        columns,
        tree: bases.tree,
        forest: bases.forest,
        svc: bases.svc,
        meta,
    })
}

impl EnsembleModel {
    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bincode(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_bincode(path)
    }

    /// Predicts every row of a full probability matrix.
    pub fn predict_matrix(&self, probs: &ProbabilityMatrix) -> Result<Vec<f64>> {
        (0..probs.rows)
            .map(|i| {
                let row: Vec<f64> = self.columns.iter().map(|&c| probs.row(i)[c]).collect();
                predict_ensemble(self, &row).map(|(_, p)| p)
            })
            .collect()
    }
}

/// Label and member probability for one row of the `k` selected columns.
pub fn predict_ensemble(model: &EnsembleModel, row: &[f64]) -> Result<(u8, f64)> {
    if row.len() != model.k() {
        return Err(Error::InvalidInput(format!(
            "row has {} values, ensemble expects {}",
            row.len(),
            model.k()
        )));
    }
    if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("probability {v} outside [0, 1]")));
    }
    let bases = [
        model.tree.predict_proba(row),
        model.forest.predict_proba(row),
        model.svc.predict_proba(row),
    ];
    let p = model.meta.predict_proba(&bases);
    Ok((u8::from(p >= 0.5), p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub split: String,
    pub accuracy: f64,
    pub f1: f64,
}

/// Fits an ensemble for each `k` in `1..=kmax` on `fit` and scores it on
/// every named evaluation matrix.
pub fn ensemble_sweep(
    fit: &ProbabilityMatrix,
    ranking: &ModelRanking,
    kmax: usize,
    evals: &[(&str, &ProbabilityMatrix)],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let kmax = kmax.min(fit.cols());
    if kmax == 0 {
        return Err(Error::InvalidArgument("kmax must be at least 1".into()));
    }
    let per_k: Vec<Vec<SweepPoint>> = (1..=kmax)
        .into_par_iter()
        .map(|k| {
            let model = build_stacked_ensemble(fit, ranking, k, seed)?;
            evals
                .iter()
                .map(|(name, m)| {
                    let p = model.predict_matrix(m)?;
                    let (accuracy, f1) = score_predictions(&p, &m.labels);
                    Ok(SweepPoint {
                        k,
                        split: name.to_string(),
                        accuracy,
                        f1,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_k.into_iter().flatten().collect())
}

pub fn sweep_csv_path(run: &Path) -> PathBuf {
    run.join("ensemble").join("sweep.csv")
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["k", "split", "accuracy", "f1"])?;
    for p in points {
        w.write_record([p.k.to_string(), p.split.clone(), io::fmt_f64(p.accuracy), io::fmt_f64(p.f1)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{Method, Threshold};
    use rand::Rng;

    fn keys(n: usize) -> Vec<CellKey> {
        (0..n)
            .map(|j| CellKey {
                method: Some(Method::ALL[j % 5]),
                threshold: Threshold::GRID[(j / 5) % 4],
                layer: "h".into(),
            })
            .collect()
    }

    /// Column `planted` equals the label; the rest are uniform noise.
    pub(crate) fn planted(rows: usize, cols: usize, planted: usize, seed: u64) -> ProbabilityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..rows).map(|i| (i % 2) as u8).collect();
        let mut data = Vec::new();
        for &y in &labels {
            for j in 0..cols {
                data.push(if j == planted { y as f64 } else { rng.gen() });
            }
        }
        ProbabilityMatrix::new(keys(cols), data, labels).unwrap()
    }

    #[test]
    fn shapley_axioms_on_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [0.5, -2.0, 0.0, 3.0];
        let linear = |t: &Tensor| -> Vec<f64> {
            (0..t.batch()).map(|i| t.row(i).iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
        };
        let x = [1.0, 2.0, 3.0, 4.0];
        let bg = [0.5, 0.5, 0.5, 0.5];
        let groups: Vec<Vec<usize>> = (0..4).map(|j| vec![j]).collect();
        let (phi, base) = permutation_shapley(&linear, &x, &bg, &groups, 16, &mut rng);
        for j in 0..4 {
            assert!((phi[j] - w[j] * (x[j] - bg[j])).abs() < 1e-12);
        }
        assert!((base - linear(&Tensor::new(vec![1, 4], bg.to_vec()))[0]).abs() < 1e-12);

        let constant = |t: &Tensor| vec![0.3; t.batch()];
        let (phi, base) = permutation_shapley(&constant, &x, &bg, &groups, 16, &mut rng);
        assert!(phi.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(base, 0.3);

        // efficiency for an interaction term
        let inter = |t: &Tensor| -> Vec<f64> { (0..t.batch()).map(|i| t.row(i)[0] * t.row(i)[1] + t.row(i)[3].powi(2)).collect() };
        let (phi, base) = permutation_shapley(&inter, &x, &bg, &groups, 8, &mut rng);
        let fx = 1.0 * 2.0 + 16.0;
        assert!((phi.iter().sum::<f64>() + base - fx).abs() < 1e-9);
    }

    #[test]
    fn planted_label_column_ranks_first() {
        let probs = planted(200, 10, 6, 3);
        let r = shap_rank_models(&probs, &TrainConfig::shap_meta(), &ShapleyParams::default(), 0).unwrap();
        assert_eq!(r.order[0], 6);
        assert!(r.scores.iter().all(|s| *s >= 0.0));
        // leave-one-column-out: dropping the planted column costs the most accuracy
        let full_acc = stack_accuracy(&probs, &(0..10).collect::<Vec<_>>());
        let without: Vec<usize> = (0..10).filter(|&j| j != 6).collect();
        assert!(full_acc - stack_accuracy(&probs, &without) > 0.3);
        let again = shap_rank_models(&probs, &TrainConfig::shap_meta(), &ShapleyParams::default(), 0).unwrap();
        assert_eq!(r, again);
    }

    fn stack_accuracy(probs: &ProbabilityMatrix, cols: &[usize]) -> f64 {
        let x = probs.matrix().select_columns(cols);
        let lr = LogisticRegression::fit(&x, &probs.labels, 1.0);
        let p: Vec<f64> = (0..x.rows).map(|i| lr.predict_proba(x.row(i))).collect();
        score_predictions(&p, &probs.labels).0
    }

    #[test]
    fn identical_columns_share_importance() {
        let base = planted(120, 4, 0, 5);
        let mut data = Vec::new();
        for i in 0..base.rows {
            data.extend_from_slice(base.row(i));
            data.push(base.row(i)[1]);
        }
        let probs = ProbabilityMatrix::new(keys(5), data, base.labels.clone()).unwrap();
        let r = shap_rank_models(&probs, &TrainConfig::shap_meta(), &ShapleyParams::default(), 1).unwrap();
        let (a, b) = (r.scores[1], r.scores[4]);
        assert!((a - b).abs() <= 0.05 * a.max(b), "{a} vs {b}");
        assert_eq!(identical_column_groups(&probs.matrix()), vec![vec![0], vec![1, 4], vec![2], vec![3]]);
    }

    #[test]
    fn constant_model_has_zero_importance() {
        let probs = planted(50, 4, 0, 7);
        let r = rank_with(&|t: &Tensor| vec![0.7; t.batch()], &probs, &ShapleyParams::default(), 0).unwrap();
        assert!(r.scores.iter().all(|s| s.abs() < 1e-6));
    }

    #[test]
    fn ranking_preconditions() {
        let probs = planted(20, 1, 0, 1);
        assert!(matches!(
            shap_rank_models(&probs, &TrainConfig::shap_meta(), &ShapleyParams::default(), 0),
            Err(Error::InvalidArgument(_))
        ));
        let mut probs = planted(20, 3, 0, 1);
        probs.labels.fill(1);
        assert!(matches!(
            shap_rank_models(&probs, &TrainConfig::shap_meta(), &ShapleyParams::default(), 0),
            Err(Error::InvalidDataset(_))
        ));
        assert!(ProbabilityMatrix::new(keys(1), vec![1.5], vec![1]).is_err());
    }

    fn identity_ranking(c: usize) -> ModelRanking {
        ModelRanking {
            columns: keys(c),
            scores: vec![1.0; c],
            order: (0..c).collect(),
            k: c,
            values: vec![],
        }
    }

    #[test]
    fn stacking_on_a_label_column() {
        let fit = planted(200, 5, 0, 11);
        let held = planted(200, 5, 0, 12);
        let m = build_stacked_ensemble(&fit, &identity_ranking(5), 1, 0).unwrap();
        let p = m.predict_matrix(&held).unwrap();
        assert!(score_predictions(&p, &held.labels).0 >= 0.99);
        assert_eq!(predict_ensemble(&m, &[1.0]).unwrap().0, 1);
        assert!(matches!(predict_ensemble(&m, &[1.5]), Err(Error::InvalidInput(_))));
        assert!(matches!(predict_ensemble(&m, &[0.5, 0.5]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            build_stacked_ensemble(&fit, &identity_ranking(5), 6, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(build_stacked_ensemble(&fit, &identity_ranking(5), 0, 0).is_err());
    }

    /// Three copies of one predictor whose 0.5 cut agrees with the label.
    fn copies(rows: usize, seed: u64) -> ProbabilityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..rows).map(|i| (i % 2) as u8).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&y| {
                let u = rng.gen_range(0.05..0.45);
                let v = if y == 1 { 0.5 + u } else { 0.5 - u };
                [v, v, v]
            })
            .collect();
        ProbabilityMatrix::new(keys(3), data, labels).unwrap()
    }

    #[test]
    fn identical_predictors_stack_to_the_same_decisions() {
        let m = build_stacked_ensemble(&copies(150, 2), &identity_ranking(3), 3, 4).unwrap();
        let held = copies(200, 3);
        for i in 0..held.rows {
            let single = u8::from(held.row(i)[0] >= 0.5);
            assert_eq!(predict_ensemble(&m, held.row(i)).unwrap().0, single, "row {i}");
        }
    }

    #[test]
    fn symmetric_fit_gives_even_odds_at_the_midpoint() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            rows.extend([a, b]);
            labels.push(1);
            rows.extend([b, a]);
            labels.push(0);
        }
        let probs = ProbabilityMatrix::new(keys(2), rows, labels).unwrap();
        let m = build_stacked_ensemble(&probs, &identity_ranking(2), 2, 0).unwrap();
        let (_, p) = predict_ensemble(&m, &[0.5, 0.5]).unwrap();
        assert!((p - 0.5).abs() <= 0.05, "{p}");
    }

    #[test]
    fn sweep_writes_every_k() {
        let fit = planted(120, 4, 2, 1);
        let held = planted(80, 4, 2, 2);
        let pts = ensemble_sweep(&fit, &identity_ranking(4), 12, &[("holdout", &held)], 0).unwrap();
        assert_eq!(pts.iter().map(|p| p.k).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = sweep_csv_path(dir.path());
        write_sweep_csv(&pts, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);
    }
}
