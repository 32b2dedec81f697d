//! Attack models over the five feature components, and the
//! method x threshold x layer grid.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{AttackBatch, AttackDataset, FeatureBank, FeatureShapes};
use crate::io;
use crate::nn::loss::{softmax, softmax_cross_entropy};
use crate::nn::{BatchNorm, Conv2d, Dense, Grads, Layer, Network, Optimizer, Tensor, Trace};
use crate::selection::{select_top_fraction, Method, NeuronRanking, SelectionMask, Threshold};
use crate::zoo::TrainConfig;
use crate::{Error, Result};

pub const COMPONENTS: [&str; 5] = ["activation", "posterior", "label", "loss", "gradient"];
pub const EMBEDDING: usize = 64;
const DROPOUT: f64 = 0.2;
const PREDICT_BATCH: usize = 256;

/// Five component encoders feeding a four-layer membership classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackModel {
    pub shapes: FeatureShapes,
    /// In [`COMPONENTS`] order. Each starts with a fixed standardization
    /// fitted on the training records.
    pub encoders: Vec<Network>,
    pub head: Network,
    pub config: TrainConfig,
}

fn dense_encoder(width: usize, stats: (Vec<f64>, Vec<f64>), rng: &mut ChaCha8Rng) -> Network {
    Network::new(vec![
        Layer::Normalize { mean: stats.0, std: stats.1 },
        Layer::Dense(Dense::new(width, 128, rng)),
        Layer::Relu,
        Layer::Dropout { rate: DROPOUT },
        Layer::Dense(Dense::new(128, EMBEDDING, rng)),
        Layer::Relu,
        Layer::Dropout { rate: DROPOUT },
    ])
}

fn gradient_encoder(shape: [usize; 2], stats: (Vec<f64>, Vec<f64>), rng: &mut ChaCha8Rng) -> Network {
    let pool = if shape[0] >= 2 && shape[1] >= 2 { 2 } else { 1 };
    let flat = (shape[0] / pool) * (shape[1] / pool);
    Network::new(vec![
        Layer::Normalize { mean: stats.0, std: stats.1 },
        Layer::Conv2d(Conv2d::new(1, 1, 5, 1, 2, rng)),
        Layer::BatchNorm(BatchNorm::new(1)),
        Layer::Relu,
        Layer::MaxPool { size: pool },
        Layer::Flatten,
        Layer::Dense(Dense::new(flat, 256, rng)),
        Layer::Relu,
        Layer::Dropout { rate: DROPOUT },
        Layer::Dense(Dense::new(256, 128, rng)),
        Layer::Relu,
        Layer::Dropout { rate: DROPOUT },
        Layer::Dense(Dense::new(128, EMBEDDING, rng)),
        Layer::Relu,
        Layer::Dropout { rate: DROPOUT },
    ])
}

fn classifier_head(rng: &mut ChaCha8Rng) -> Network {
    let w = 5 * EMBEDDING;
    Network::new(vec![
        Layer::Dense(Dense::new(w, 256, rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(256, 128, rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(128, 64, rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(64, 2, rng)),
    ])
}

fn finish_stats(sum: Vec<f64>, sq: Vec<f64>, n: f64) -> (Vec<f64>, Vec<f64>) {
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let sd = (q / n - m * m).max(0.0).sqrt();
            if sd > 1e-8 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Per-column mean and std of the tabular components, and a single
/// scalar pair for the gradient block.
fn component_stats(ds: &AttackDataset) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let n = ds.len();
    let positions: Vec<usize> = (0..n).collect();
    for chunk in positions.chunks(PREDICT_BATCH) {
        let b = ds.batch(chunk);
        let comps = b.components();
        if sums.is_empty() {
            sums = comps
                .iter()
                .enumerate()
                .map(|(c, t)| {
                    let w = if c == 4 { 1 } else { t.row_len() };
                    (vec![0.0; w], vec![0.0; w])
                })
                .collect();
        }
        for (c, t) in comps.iter().enumerate() {
            let (s, q) = &mut sums[c];
            if c == 4 {
                for v in t.data() {
                    s[0] += v;
                    q[0] += v * v;
                }
                continue;
            }
            for i in 0..t.batch() {
                for (j, v) in t.row(i).iter().enumerate() {
                    s[j] += v;
                    q[j] += v * v;
                }
            }
        }
    }
    let cells = (ds.shapes.gradient[0] * ds.shapes.gradient[1]) as f64;
    sums.into_iter()
        .enumerate()
        .map(|(c, (s, q))| finish_stats(s, q, if c == 4 { n as f64 * cells } else { n as f64 }))
        .collect()
}

fn concat_columns(parts: &[&Tensor]) -> Tensor {
    let n = parts[0].batch();
    let width: usize = parts.iter().map(|p| p.row_len()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![n, width], data)
}

fn split_columns(t: &Tensor, width: usize, parts: usize) -> Vec<Tensor> {
    let n = t.batch();
    (0..parts)
        .map(|p| {
            let mut d = Vec::with_capacity(n * width);
            for i in 0..n {
                d.extend_from_slice(&t.row(i)[p * width..(p + 1) * width]);
            }
            Tensor::new(vec![n, width], d)
        })
        .collect()
}

fn check_batch(shapes: &FeatureShapes, b: &AttackBatch) -> Result<()> {
    let want = [
        vec![shapes.activation],
        vec![shapes.classes],
        vec![shapes.classes],
        vec![1],
        vec![1, shapes.gradient[0], shapes.gradient[1]],
    ];
    for ((t, w), name) in b.components().iter().zip(&want).zip(COMPONENTS) {
        if t.shape()[1..] != w[..] {
            return Err(Error::InvalidInput(format!(
                "{name} features have shape {:?}, model expects {:?}",
                &t.shape()[1..],
                w
            )));
        }
    }
    Ok(())
}

/// Traces of one attack forward pass, kept for backward.
pub struct AttackTrace {
    pub encoders: Vec<Trace>,
    pub head: Trace,
}

impl AttackModel {
    fn init(shapes: FeatureShapes, stats: Vec<(Vec<f64>, Vec<f64>)>, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stats = stats.into_iter();
        let mut next = || stats.next().expect("five components");
        let encoders = vec![
            dense_encoder(shapes.activation, next(), rng),
            dense_encoder(shapes.classes, next(), rng),
            dense_encoder(shapes.classes, next(), rng),
            dense_encoder(1, next(), rng),
            gradient_encoder(shapes.gradient, next(), rng),
        ];
        Self {
            shapes,
            encoders,
            head: classifier_head(rng),
            config: config.clone(),
        }
    }

    pub fn forward(&self, batch: &AttackBatch, train: bool, mut rng: Option<&mut ChaCha8Rng>) -> AttackTrace {
        let encoders: Vec<Trace> = self
            .encoders
            .iter()
            .zip(batch.components())
            .map(|(e, x)| e.forward(x, train, rng.as_deref_mut(), &[]))
            .collect();
        let z = concat_columns(&encoders.iter().map(|t| &t.output).collect::<Vec<_>>());
        let head = self.head.forward(&z, train, rng, &[]);
        AttackTrace { encoders, head }
    }

    /// Backpropagates `grad_logits` through head and encoders. Returns the
    /// gradient with respect to each raw input component when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        trace: &AttackTrace,
        grad_logits: Tensor,
        mut grads: Option<(&mut Grads, &mut [Grads])>,
        want_input_grad: bool,
    ) -> Vec<Tensor> {
        let (hg, eg) = match grads.as_mut() {
            Some((h, e)) => (Some(&mut **h), Some(&mut **e)),
            None => (None, None),
        };
        let gz = self.head.backward(&trace.head, grad_logits, &[], hg, true);
        let parts = split_columns(&gz, EMBEDDING, 5);
        let mut eg = eg;
        parts
            .into_iter()
            .enumerate()
            .map(|(c, g)| {
                let slot = eg.as_deref_mut().map(|e| &mut e[c]);
                self.encoders[c].backward(&trace.encoders[c], g, &[], slot, want_input_grad)
            })
            .collect()
    }

    /// Member probability of every row.
    pub fn predict_proba(&self, batch: &AttackBatch) -> Result<Vec<f64>> {
        check_batch(&self.shapes, batch)?;
        let emb: Vec<Tensor> = self
            .encoders
            .iter()
            .zip(batch.components())
            .map(|(e, x)| e.predict(x))
            .collect();
        let logits = self.head.predict(&concat_columns(&emb.iter().collect::<Vec<_>>()));
        Ok((0..logits.batch()).map(|i| softmax(logits.row(i))[1]).collect())
    }

    pub fn predict_dataset(&self, ds: &AttackDataset, positions: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(positions.len());
        for chunk in positions.chunks(PREDICT_BATCH) {
            out.extend(self.predict_proba(&ds.batch(chunk))?);
        }
        Ok(out)
    }

    /// Member probability and its gradient with respect to each raw input
    /// component.
    pub fn member_probability_gradients(&self, batch: &AttackBatch) -> Result<(Vec<f64>, Vec<Tensor>)> {
        check_batch(&self.shapes, batch)?;
        let trace = self.forward(batch, false, None);
        let n = batch.len();
        let mut p1 = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(2 * n);
        for i in 0..n {
            let p = softmax(trace.head.output.row(i));
            p1.push(p[1]);
            let d = p[0] * p[1];
            g.extend([-d, d]);
        }
        let inputs = self.backward(&trace, Tensor::new(vec![n, 2], g), None, true);
        Ok((p1, inputs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bincode(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_bincode(path)
    }
}

fn check_trainable(ds: &AttackDataset) -> Result<()> {
    let labels = ds.labels();
    let members = labels.iter().filter(|&&l| l == 1).count();
    if members == 0 || members == labels.len() {
        return Err(Error::InvalidDataset(format!(
            "attack training needs both classes, got {members} members of {}",
            labels.len()
        )));
    }
    Ok(())
}

pub fn train_attack_model(train: &AttackDataset, config: &TrainConfig) -> Result<AttackModel> {
    config.validate()?;
    check_trainable(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = AttackModel::init(train.shapes, component_stats(train), config, &mut rng);
    let mut head_opt = Optimizer::new(config.optimizer, config.learning_rate, &model.head);
    let mut enc_opt: Vec<Optimizer> = model
        .encoders
        .iter()
        .map(|e| Optimizer::new(config.optimizer, config.learning_rate, e))
        .collect();
    let mut head_grads = model.head.zero_grads();
    let mut enc_grads: Vec<Grads> = model.encoders.iter().map(Network::zero_grads).collect();
    let labels: Vec<usize> = train.labels().iter().map(|&l| l as usize).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.schedule.rate(config.learning_rate, epoch, config.epochs);
        head_opt.set_learning_rate(lr);
        enc_opt.iter_mut().for_each(|o| o.set_learning_rate(lr));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = model.forward(&batch, true, Some(&mut rng));
            let (loss, g) = softmax_cross_entropy(&trace.head.output, &y);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            head_grads.zero();
            enc_grads.iter_mut().for_each(Grads::zero);
            model.backward(&trace, g, Some((&mut head_grads, &mut enc_grads)), false);
            head_opt.step(&mut model.head, &head_grads);
            for (c, enc) in model.encoders.iter_mut().enumerate() {
                enc_opt[c].step(enc, &enc_grads[c]);
                enc.absorb_batch_stats(&trace.encoders[c]);
            }
        }
        log::debug!("attack epoch {epoch}: loss {:.5}", loss_sum / order.len() as f64);
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub accuracy: f64,
    /// Member is the positive class.
    pub f1: f64,
    /// Positions of the evaluated (balanced) rows in the dataset.
    pub positions: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Accuracy and F1 at the fixed 0.5 threshold.
pub fn score_predictions(probabilities: &[f64], labels: &[u8]) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probabilities.iter().zip(labels) {
        let pred = u8::from(p >= 0.5);
        correct += usize::from(pred == y);
        match (pred, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / labels.len().max(1) as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    (acc, f1)
}

/// Evaluates on a seeded class-balanced subsample of `eval`.
pub fn evaluate_attack(model: &AttackModel, eval: &AttackDataset, seed: u64) -> Result<AttackMetrics> {
    if eval.shapes != model.shapes {
        return Err(Error::InvalidInput(format!(
            "evaluation features {:?} do not match model {:?}",
            eval.shapes, model.shapes
        )));
    }
    let positions = eval.balanced_positions(seed);
    if positions.is_empty() {
        return Err(Error::InvalidDataset("evaluation set lacks one of the classes".into()));
    }
    let probabilities = model.predict_dataset(eval, &positions)?;
    let all = eval.labels();
    let labels: Vec<u8> = positions.iter().map(|&p| all[p]).collect();
    let (accuracy, f1) = score_predictions(&probabilities, &labels);
    Ok(AttackMetrics {
        accuracy,
        f1,
        positions,
        probabilities,
        labels,
    })
}

/// One grid cell. `method == None` is the unselected baseline (T = 100%).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Option<Method>,
    pub threshold: Threshold,
    pub layer: String,
}

impl CellKey {
    pub fn baseline(layer: &str) -> Self {
        Self {
            method: None,
            threshold: Threshold::FULL,
            layer: layer.to_string(),
        }
    }

    pub fn method_id(&self) -> &'static str {
        self.method.map_or("none", |m| m.id())
    }

    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.method.map_or("all", |m| m.id()), self.threshold, self.layer)
    }
}

/// Which cells to train. Canonical order: for each selection layer, methods
/// in the given order, thresholds ascending; then one baseline per
/// baseline layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPlan {
    pub methods: Vec<Method>,
    pub thresholds: Vec<Threshold>,
    pub layers: Vec<String>,
    pub baselines: Vec<String>,
}

impl GridPlan {
    pub fn cells(&self) -> Vec<CellKey> {
        let mut thresholds = self.thresholds.clone();
        thresholds.sort();
        let mut out = Vec::new();
        for layer in &self.layers {
            for &m in &self.methods {
                for &t in &thresholds {
                    out.push(CellKey {
                        method: Some(m),
                        threshold: t,
                        layer: layer.clone(),
                    });
                }
            }
        }
        out.extend(self.baselines.iter().map(|l| CellKey::baseline(l)));
        out
    }
}

/// Shadow attack-train, shadow-eval and target-eval features of one layer.
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    pub layer: String,
    pub train: FeatureBank,
    pub shadow_eval: FeatureBank,
    pub target_eval: FeatureBank,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub mask: Vec<usize>,
    pub shadow: AttackMetrics,
    pub target: AttackMetrics,
    #[serde(skip)]
    pub model: Option<AttackModel>,
}

#[derive(Clone, Debug, Default)]
pub struct GridResult {
    /// In plan order.
    pub cells: Vec<CellResult>,
}

impl GridResult {
    pub fn get(&self, key: &CellKey) -> Option<&CellResult> {
        self.cells.iter().find(|c| &c.key == key)
    }

    pub fn selected(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.key.method.is_some())
    }

    /// Best non-baseline cell by target-eval accuracy, earliest on ties.
    pub fn best(&self) -> Option<&CellResult> {
        self.selected().fold(None, |best: Option<&CellResult>, c| match best {
            Some(b) if b.target.accuracy >= c.target.accuracy => Some(b),
            _ => Some(c),
        })
    }

    pub fn csv_path(run: &Path) -> PathBuf {
        run.join("grid").join("results.csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
        w.write_record(["method", "threshold", "layer", "split", "accuracy", "f1"])?;
        for c in &self.cells {
            for (split, m) in [("shadow", &c.shadow), ("target", &c.target)] {
                w.write_record([
                    c.key.method_id().to_string(),
                    format!("{:.2}", c.key.threshold.fraction()),
                    c.key.layer.clone(),
                    split.to_string(),
                    io::fmt_f64(m.accuracy),
                    io::fmt_f64(m.f1),
                ])?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

/// Where finished cells are persisted for resumption.
pub fn cell_paths(cells_dir: &Path, key: &CellKey) -> (PathBuf, PathBuf) {
    (
        cells_dir.join(format!("{}.json", key.name())),
        cells_dir.join(format!("{}.model", key.name())),
    )
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    /// Persist and reuse finished cells here.
    pub cells_dir: Option<PathBuf>,
    /// Stop with [`Error::Halted`] once this many cells were trained in
    /// this call.
    pub halt_after: Option<usize>,
}

/// The mask a cell applies, identical for shadow and target features.
pub fn cell_mask(key: &CellKey, rankings: &[NeuronRanking], neurons: usize) -> Result<SelectionMask> {
    match key.method {
        None => Ok(SelectionMask::full(&key.layer, neurons)),
        Some(m) => {
            let r = rankings
                .iter()
                .find(|r| r.method == m && r.layer == key.layer)
                .ok_or_else(|| Error::Dependency(format!("no {} ranking for layer {}", m.id(), key.layer)))?;
            Ok(select_top_fraction(r, key.threshold))
        }
    }
}

fn run_cell(key: &CellKey, lf: &LayerFeatures, mask: &SelectionMask, config: &TrainConfig) -> Result<CellResult> {
    let seed = io::derive_seed(config.seed, &key.name());
    let train = lf.train.dataset(mask)?;
    let cfg = config.clone().with_seed(seed);
    let model = train_attack_model(&train, &cfg)?;
    let shadow = evaluate_attack(&model, &lf.shadow_eval.dataset(mask)?, seed ^ 1)?;
    let target = evaluate_attack(&model, &lf.target_eval.dataset(mask)?, seed ^ 2)?;
    info!(
        "cell {}: shadow {:.4} target {:.4}",
        key.name(),
        shadow.accuracy,
        target.accuracy
    );
    Ok(CellResult {
        key: key.clone(),
        mask: mask.indices.clone(),
        shadow,
        target,
        model: Some(model),
    })
}

fn load_cell(cells_dir: &Path, key: &CellKey, mask: &SelectionMask) -> Option<CellResult> {
    let (json, model) = cell_paths(cells_dir, key);
    if !json.exists() || !model.exists() {
        return None;
    }
    let mut cell: CellResult = io::read_json(&json).ok()?;
    if cell.key != *key || cell.mask != mask.indices {
        return None;
    }
    cell.model = Some(AttackModel::load(&model).ok()?);
    Some(cell)
}

/// Reads a finished grid back from `cells_dir`, models included.
pub fn load_grid(cells_dir: &Path, plan: &GridPlan) -> Result<GridResult> {
    let cells = plan
        .cells()
        .iter()
        .map(|key| {
            let (json, model) = cell_paths(cells_dir, key);
            let mut cell: CellResult = io::read_json(&json)?;
            if cell.key != *key {
                return Err(Error::Serialization(format!("{} holds cell {}", json.display(), cell.key.name())));
            }
            cell.model = Some(AttackModel::load(&model)?);
            Ok(cell)
        })
        .collect::<Result<_>>()?;
    Ok(GridResult { cells })
}

/// Trains and evaluates every cell of `plan`. Attack models are trained on
/// shadow features and evaluated on shadow-eval and target-eval features
/// under the same mask.
pub fn run_attack_grid(
    features: &[LayerFeatures],
    rankings: &[NeuronRanking],
    plan: &GridPlan,
    config: &TrainConfig,
    options: &GridOptions,
) -> Result<GridResult> {
    config.validate()?;
    let keys = plan.cells();
    let mut jobs = Vec::with_capacity(keys.len());
    for key in &keys {
        let lf = features
            .iter()
            .find(|f| f.layer == key.layer)
            .ok_or_else(|| Error::Dependency(format!("no features for layer {}", key.layer)))?;
        jobs.push((key, lf, cell_mask(key, rankings, lf.train.neurons)?));
    }
    let mut done: Vec<Option<CellResult>> = jobs
        .iter()
        .map(|(k, _, m)| options.cells_dir.as_deref().and_then(|d| load_cell(d, k, m)))
        .collect();
    let reused = done.iter().filter(|d| d.is_some()).count();
    if reused > 0 {
        info!("resuming grid: {reused} of {} cells already complete", keys.len());
    }
    let mut pending: Vec<usize> = (0..jobs.len()).filter(|&i| done[i].is_none()).collect();
    let halted = match options.halt_after {
        Some(n) if n < pending.len() => {
            pending.truncate(n);
            true
        }
        _ => false,
    };
    let fresh: Vec<(usize, Result<CellResult>)> = pending
        .par_iter()
        .map(|&i| {
            let (key, lf, mask) = &jobs[i];
            let res = run_cell(key, lf, mask, config).and_then(|cell| {
                if let Some(dir) = &options.cells_dir {
                    let (json, model) = cell_paths(dir, key);
                    cell.model.as_ref().expect("fresh cell has a model").save(&model)?;
                    io::write_json(&json, &cell)?;
                }
                Ok(cell)
            });
            (i, res)
        })
        .collect();
    let trained = fresh.len();
    for (i, r) in fresh {
        done[i] = Some(r?);
    }
    if halted {
        return Err(Error::Halted { completed: trained });
    }
    Ok(GridResult {
        cells: done.into_iter().map(|c| c.expect("every cell ran")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Source;
    use crate::zoo::LossKind;
    use rand::Rng;
    use std::sync::Arc;

    /// A bank with `n` rows where column 0 of the activations and the loss
    /// carry the label through `signal`.
    pub(crate) fn synthetic_bank(n: usize, neurons: usize, seed: u64, signal: f64) -> FeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let g = [k, 4];
        let membership: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let mut act = Vec::new();
        let mut post = Vec::new();
        let mut pred = Vec::new();
        let mut loss = Vec::new();
        let mut grad = Vec::new();
        for &m in &membership {
            for j in 0..neurons {
                let base: f64 = rng.gen::<f64>();
                act.push((if j == 0 { base * (1.0 - signal) + signal * m as f64 } else { base }) as f32);
            }
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            pred.push(crate::nn::loss::argmax(&p));
            post.extend(p);
            loss.push(rng.gen::<f64>() * (1.0 - signal) + signal * (1 - m) as f64);
            grad.extend((0..g[0] * g[1]).map(|_| rng.gen::<f32>() - 0.5));
        }
        FeatureBank {
            source: Source::Shadow,
            layer: "h".into(),
            rows: n,
            neurons,
            classes: k,
            gradient_shape: g,
            activations: Arc::new(act),
            posteriors: Arc::new(post),
            predicted: Arc::new(pred),
            losses: Arc::new(loss),
            gradients: Arc::new(grad),
            membership,
            indices: (0..n).collect(),
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 15,
            batch_size: 32,
            ..TrainConfig::attack()
        }
    }

    fn full(bank: &FeatureBank) -> AttackDataset {
        bank.dataset(&SelectionMask::full("h", bank.neurons)).unwrap()
    }

    #[test]
    fn separable_loss_is_learned() {
        let train = full(&synthetic_bank(400, 6, 1, 1.0));
        let held = full(&synthetic_bank(200, 6, 2, 1.0));
        let m = train_attack_model(&train, &quick()).unwrap();
        let metrics = evaluate_attack(&m, &held, 0).unwrap();
        assert!(metrics.accuracy >= 0.99, "{}", metrics.accuracy);
        assert!(metrics.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        let again = train_attack_model(&train, &quick()).unwrap();
        assert_eq!(evaluate_attack(&again, &held, 0).unwrap(), metrics);
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let mut bank = synthetic_bank(600, 6, 3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        bank.membership.shuffle(&mut rng);
        let train = full(&bank);
        let held = full(&synthetic_bank(1000, 6, 5, 0.0));
        let m = train_attack_model(&train, &quick()).unwrap();
        let acc = evaluate_attack(&m, &held, 0).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn single_class_is_rejected() {
        let mut bank = synthetic_bank(20, 3, 1, 1.0);
        bank.membership.fill(1);
        assert!(matches!(
            train_attack_model(&full(&bank), &quick()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn f1_matches_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let p: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let mut cm = [[0usize; 2]; 2];
            for i in 0..n {
                cm[y[i] as usize][usize::from(p[i] >= 0.5)] += 1;
            }
            let prec = cm[1][1] as f64 / (cm[1][1] + cm[0][1]) as f64;
            let rec = cm[1][1] as f64 / (cm[1][1] + cm[1][0]) as f64;
            let f1 = if cm[1][1] == 0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            let (acc, got) = score_predictions(&p, &y);
            assert!((got - f1).abs() < 1e-12);
            assert!((acc - (cm[0][0] + cm[1][1]) as f64 / n as f64).abs() < 1e-12);
        }
        let (acc, f1) = score_predictions(&[0.9; 4], &[1, 0, 1, 0]);
        assert_eq!((acc, f1), (0.5, 2.0 / 3.0));
        assert_eq!(score_predictions(&[0.9, 0.1], &[1, 0]), (1.0, 1.0));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let train = full(&synthetic_bank(64, 5, 1, 0.5));
        let cfg = TrainConfig { epochs: 2, ..quick() };
        let m = train_attack_model(&train, &cfg).unwrap();
        let b = train.batch(&[3]);
        let (p, grads) = m.member_probability_gradients(&b).unwrap();
        assert!((p[0] - m.predict_proba(&b).unwrap()[0]).abs() < 1e-12);
        let eps = 1e-6;
        for c in [0usize, 1, 3, 4] {
            for j in 0..b.components()[c].len().min(6) {
                let bump = |d: f64| {
                    let mut bb = b.clone();
                    let t = match c {
                        0 => &mut bb.activation,
                        1 => &mut bb.posterior,
                        3 => &mut bb.loss,
                        _ => &mut bb.gradient,
                    };
                    t.data_mut()[j] += d;
                    m.predict_proba(&bb).unwrap()[0]
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let g = grads[c].data()[j];
                assert!((fd - g).abs() <= 1e-5 * (1.0 + fd.abs()), "component {c} slot {j}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn grid_is_complete_resumable_and_deterministic() {
        let lf = LayerFeatures {
            layer: "h".into(),
            train: synthetic_bank(120, 10, 1, 0.8),
            shadow_eval: synthetic_bank(60, 10, 2, 0.8),
            target_eval: synthetic_bank(60, 10, 3, 0.8),
        };
        let rankings: Vec<NeuronRanking> = Method::ALL
            .iter()
            .map(|&m| NeuronRanking {
                layer: "h".into(),
                method: m,
                scores: (0..10).map(|j| -(j as f64)).collect(),
                p_values: vec![None; 10],
                order: (0..10).collect(),
            })
            .collect();
        let plan = GridPlan {
            methods: Method::ALL.to_vec(),
            thresholds: Threshold::GRID.to_vec(),
            layers: vec!["h".into()],
            baselines: vec!["h".into()],
        };
        let cfg = TrainConfig { epochs: 1, loss: LossKind::BinaryCrossEntropy, ..quick() };
        let dir = tempfile::tempdir().unwrap();
        let opts = GridOptions {
            cells_dir: Some(dir.path().join("cells")),
            halt_after: Some(7),
        };
        let halted = run_attack_grid(&[lf.clone()], &rankings, &plan, &cfg, &opts);
        assert!(matches!(halted, Err(Error::Halted { completed: 7 })));
        let resumed = run_attack_grid(&[lf.clone()], &rankings, &plan, &cfg, &GridOptions { halt_after: None, ..opts }).unwrap();
        assert_eq!(resumed.cells.len(), 21);
        assert_eq!(resumed.selected().count(), 20);
        let fresh = run_attack_grid(&[lf.clone()], &rankings, &plan, &cfg, &GridOptions::default()).unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        resumed.write_csv(&a).unwrap();
        fresh.write_csv(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 21);
        assert!(text.lines().nth(1).unwrap().starts_with("t_test,0.20,h,shadow,"));
        assert!(text.lines().last().unwrap().starts_with("none,1.00,h,target,"));
        let c = resumed.get(&CellKey { method: Some(Method::Bootstrap), threshold: Threshold::GRID[1], layer: "h".into() }).unwrap();
        assert_eq!(c.mask, vec![0, 1, 2, 3]);

        let missing = run_attack_grid(&[lf], &rankings[..2], &plan, &cfg, &GridOptions::default());
        assert!(matches!(missing, Err(Error::Dependency(_))));
    }
}
