//! Attack feature tuples: selected activations, posterior, predicted label,
//! loss and the loss gradient of the classification head's weights.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{Flattening, LayerRegistry, RegisteredLayer};
use crate::data::{LabeledDataset, MembershipSet, Source};
use crate::io;
use crate::nn::loss::{argmax, cross_entropy_from_logits, softmax};
use crate::nn::Tensor;
use crate::selection::{Method, SelectionMask, Threshold};
use crate::zoo::ModelCheckpoint;
use crate::{Error, Result};

/// Posterior, one-hot argmax and per-sample cross-entropy of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFeatures {
    pub posterior: Vec<f64>,
    pub predicted: usize,
    pub loss: f64,
}

impl PredictionFeatures {
    pub fn from_logits(logits: &[f64], y_true: usize) -> Result<Self> {
        let posterior = softmax(logits);
        if posterior.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericFault {
                index: 0,
                what: "non-finite posterior".into(),
            });
        }
        Ok(Self {
            predicted: argmax(&posterior),
            loss: cross_entropy_from_logits(logits, y_true).max(0.0),
            posterior,
        })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.posterior.len()];
        v[self.predicted] = 1.0;
        v
    }
}

fn single(ckpt: &ModelCheckpoint, x: &[f32]) -> Result<Tensor> {
    let [c, h, w] = ckpt.input;
    if x.len() != c * h * w {
        return Err(Error::InvalidInput(format!(
            "image has {} values, model expects {c}x{h}x{w}",
            x.len()
        )));
    }
    Ok(Tensor::new(vec![1, c, h, w], x.iter().map(|&v| v as f64).collect()))
}

pub fn compute_prediction_features(
    ckpt: &ModelCheckpoint,
    x: &[f32],
    y_true: usize,
) -> Result<PredictionFeatures> {
    let logits = ckpt.logits(&single(ckpt, x)?);
    PredictionFeatures::from_logits(logits.row(0), y_true)
}

/// Index of the layer whose output feeds the classification head.
pub(crate) fn head_input(ckpt: &ModelCheckpoint) -> Result<usize> {
    if ckpt.head + 1 != ckpt.network.layers.len() || ckpt.head == 0 {
        return Err(Error::Capability(
            "head gradient needs the dense head to be the final layer".into(),
        ));
    }
    Ok(ckpt.head - 1)
}

/// `dL/dW_head = (p - onehot(y)) (x) h`, shaped `[classes, head inputs]`.
pub fn compute_gradient_features(ckpt: &ModelCheckpoint, x: &[f32], y_true: usize) -> Result<Vec<f64>> {
    let tap = head_input(ckpt)?;
    let (logits, taps) = ckpt.network.predict_with_taps(&single(ckpt, x)?, &[tap]);
    Ok(outer_gradient(&softmax(logits.row(0)), y_true, taps[0].row(0)))
}

fn outer_gradient(p: &[f64], y: usize, h: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(p.len() * h.len());
    for (k, pk) in p.iter().enumerate() {
        let r = pk - if k == y { 1.0 } else { 0.0 };
        g.extend(h.iter().map(|hv| r * hv));
    }
    g
}

/// Feature widths shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShapes {
    pub activation: usize,
    pub classes: usize,
    /// `[rows, cols]` of the gradient block.
    pub gradient: [usize; 2],
}

/// A batch of attack inputs in `f64`, laid out for the attack model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackBatch {
    pub activation: Tensor,
    pub posterior: Tensor,
    pub label: Tensor,
    pub loss: Tensor,
    /// `[n, 1, rows, cols]`.
    pub gradient: Tensor,
}

impl AttackBatch {
    pub fn len(&self) -> usize {
        self.loss.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn components(&self) -> [&Tensor; 5] {
        [&self.activation, &self.posterior, &self.label, &self.loss, &self.gradient]
    }
}

/// Computes attack inputs for a batch of images straight from the model,
/// in `f64` throughout.
pub fn batch_features(
    ckpt: &ModelCheckpoint,
    layer: &RegisteredLayer,
    flattening: Flattening,
    mask: &[usize],
    x: &Tensor,
    labels: &[usize],
) -> Result<AttackBatch> {
    ckpt.check_input(x)?;
    let tap = head_input(ckpt)?;
    let (logits, taps) = ckpt.network.predict_with_taps(x, &[layer.index, tap]);
    assemble_batch(layer, flattening, mask, &logits, &taps[0], &taps[1], labels)
}

/// Masked activation row of one sample, in `f64`.
pub(crate) fn masked_activations(row: &[f64], shape: &[usize], flattening: Flattening, mask: &[usize]) -> Vec<f64> {
    match (flattening, shape.len()) {
        (Flattening::ChannelMean, 3) => {
            let plane = shape[1] * shape[2];
            mask.iter()
                .map(|&c| row[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
                .collect()
        }
        _ => mask.iter().map(|&j| row[j]).collect(),
    }
}

/// Builds attack inputs from the logits, the tapped activations and the
/// head input of a forward pass.
pub(crate) fn assemble_batch(
    layer: &RegisteredLayer,
    flattening: Flattening,
    mask: &[usize],
    logits: &Tensor,
    acts: &Tensor,
    head_in: &Tensor,
    labels: &[usize],
) -> Result<AttackBatch> {
    let n = logits.batch();
    let k = logits.row_len();
    let f = head_in.row_len();
    let mut act = Vec::with_capacity(n * mask.len());
    let mut post = Vec::with_capacity(n * k);
    let mut onehot = Vec::with_capacity(n * k);
    let mut loss = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n * k * f);
    for i in 0..n {
        let pf = PredictionFeatures::from_logits(logits.row(i), labels[i]).map_err(|e| match e {
            Error::NumericFault { what, .. } => Error::NumericFault { index: i, what },
            other => other,
        })?;
        act.extend(masked_activations(acts.row(i), &layer.shape, flattening, mask));
        grad.extend(outer_gradient(&pf.posterior, labels[i], head_in.row(i)));
        onehot.extend(pf.one_hot());
        post.extend_from_slice(&pf.posterior);
        loss.push(pf.loss);
    }
    Ok(AttackBatch {
        activation: Tensor::new(vec![n, mask.len()], act),
        posterior: Tensor::new(vec![n, k], post),
        label: Tensor::new(vec![n, k], onehot),
        loss: Tensor::new(vec![n, 1], loss),
        gradient: Tensor::new(vec![n, 1, k, f], grad),
    })
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    pub layer: String,
    pub method: Option<Method>,
    pub threshold: Threshold,
}

impl Provenance {
    pub fn cell_name(&self) -> String {
        format!("{}-{}-{}", self.method.map_or("all", |m| m.id()), self.threshold, self.layer)
    }
}

/// Layer-independent features of every sample of one source, plus the full
/// activation rows of one layer. Masked datasets are cut from this.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub source: Source,
    pub layer: String,
    pub rows: usize,
    pub neurons: usize,
    pub classes: usize,
    pub gradient_shape: [usize; 2],
    pub activations: Arc<Vec<f32>>,
    pub posteriors: Arc<Vec<f64>>,
    pub predicted: Arc<Vec<usize>>,
    pub losses: Arc<Vec<f64>>,
    pub gradients: Arc<Vec<f32>>,
    pub membership: Vec<u8>,
    pub indices: Vec<usize>,
}

const FEATURE_BATCH: usize = 200;

impl FeatureBank {
    pub fn build(
        ckpt: &ModelCheckpoint,
        registry: &LayerRegistry,
        layer: &str,
        dataset: &LabeledDataset,
        set: &MembershipSet,
    ) -> Result<Self> {
        let reg = registry.get(layer)?;
        let all: Vec<usize> = (0..reg.neurons).collect();
        let indices = set.indices();
        let mut bank = FeatureBank {
            source: set.source,
            layer: layer.to_string(),
            rows: indices.len(),
            neurons: reg.neurons,
            classes: ckpt.classes,
            gradient_shape: [ckpt.classes, ckpt.head_layer().inputs],
            activations: Arc::default(),
            posteriors: Arc::default(),
            predicted: Arc::default(),
            losses: Arc::default(),
            gradients: Arc::default(),
            membership: set.labels(),
            indices: indices.clone(),
        };
        let (mut act, mut post, mut pred, mut loss, mut grad) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (b, chunk) in indices.chunks(FEATURE_BATCH).enumerate() {
            let x = dataset.batch(chunk);
            let y = dataset.batch_labels(chunk);
            let batch = batch_features(ckpt, reg, registry.flattening, &all, &x, &y).map_err(|e| match e {
                Error::NumericFault { index, what } => Error::NumericFault {
                    index: b * FEATURE_BATCH + index,
                    what,
                },
                other => other,
            })?;
            act.extend(batch.activation.data().iter().map(|&v| v as f32));
            post.extend_from_slice(batch.posterior.data());
            for i in 0..chunk.len() {
                pred.push(argmax(batch.label.row(i)));
            }
            loss.extend_from_slice(batch.loss.data());
            grad.extend(batch.gradient.data().iter().map(|&v| v as f32));
        }
        bank.activations = Arc::new(act);
        bank.posteriors = Arc::new(post);
        bank.predicted = Arc::new(pred);
        bank.losses = Arc::new(loss);
        bank.gradients = Arc::new(grad);
        Ok(bank)
    }

    /// Cuts the attack dataset for one selection mask.
    pub fn dataset(&self, mask: &SelectionMask) -> Result<AttackDataset> {
        if mask.indices.is_empty() {
            return Err(Error::InvalidArgument(format!("mask {} is empty", mask.name())));
        }
        if mask.layer != self.layer {
            return Err(Error::InvalidArgument(format!(
                "mask for layer {} applied to features of {}",
                mask.layer, self.layer
            )));
        }
        if let Some(&j) = mask.indices.iter().find(|&&j| j >= self.neurons) {
            return Err(Error::InvalidArgument(format!(
                "mask index {j} outside {} neurons",
                self.neurons
            )));
        }
        let mut act = Vec::with_capacity(self.rows * mask.indices.len());
        for i in 0..self.rows {
            let row = &self.activations[i * self.neurons..(i + 1) * self.neurons];
            act.extend(mask.indices.iter().map(|&j| row[j]));
        }
        Ok(AttackDataset {
            provenance: Provenance {
                source: self.source,
                layer: self.layer.clone(),
                method: mask.method,
                threshold: mask.threshold,
            },
            shapes: FeatureShapes {
                activation: mask.indices.len(),
                classes: self.classes,
                gradient: self.gradient_shape,
            },
            mask: mask.indices.clone(),
            rows: (0..self.rows).collect(),
            activations: Arc::new(act),
            bank: self.clone(),
        })
    }

    /// `split` names the row set, e.g. `shadow-train` or `target-eval`.
    pub fn base_paths(run: &Path, split: &str) -> (PathBuf, PathBuf) {
        let dir = run.join("features");
        (dir.join(format!("{split}-base.bin")), dir.join(format!("{split}-base.json")))
    }

    /// Persists posterior, label, loss and gradient features.
    pub fn save_base(&self, run: &Path, split: &str) -> Result<PathBuf> {
        let (bin, json) = Self::base_paths(run, split);
        let mut values: Vec<f32> = Vec::with_capacity(self.rows * (2 + self.classes) + self.gradients.len());
        values.extend(self.posteriors.iter().map(|&v| v as f32));
        values.extend(self.predicted.iter().map(|&v| v as f32));
        values.extend(self.losses.iter().map(|&v| v as f32));
        values.extend_from_slice(&self.gradients);
        io::write_f32(&bin, &values)?;
        io::write_json(
            &json,
            &serde_json::json!({
                "source": self.source,
                "rows": self.rows,
                "classes": self.classes,
                "gradient_shape": self.gradient_shape,
                "layout": ["posterior[rows x classes]", "predicted[rows]", "loss[rows]", "gradient[rows x g0 x g1]"],
                "indices": self.indices,
                "membership": self.membership,
                "sha256": io::sha256_file(&bin)?,
            }),
        )?;
        Ok(bin)
    }
}

/// Membership-labelled attack records for one (source, layer, mask).
///
/// Row-level views share the underlying feature bank.
#[derive(Clone, Debug)]
pub struct AttackDataset {
    pub provenance: Provenance,
    pub shapes: FeatureShapes,
    pub mask: Vec<usize>,
    /// Bank rows included, in order.
    rows: Vec<usize>,
    /// Masked activations for every bank row.
    activations: Arc<Vec<f32>>,
    bank: FeatureBank,
}

/// One attack record, materialised for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRecord {
    pub activation: Vec<f64>,
    pub posterior: Vec<f64>,
    pub predicted_label: Vec<f64>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub membership: u8,
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|&r| self.bank.membership[r]).collect()
    }

    /// Dataset indices of the underlying samples.
    pub fn sample_indices(&self) -> Vec<usize> {
        self.rows.iter().map(|&r| self.bank.indices[r]).collect()
    }

    pub fn record(&self, i: usize) -> AttackRecord {
        let r = self.rows[i];
        let (a, k) = (self.shapes.activation, self.shapes.classes);
        let g = self.shapes.gradient[0] * self.shapes.gradient[1];
        let mut onehot = vec![0.0; k];
        onehot[self.bank.predicted[r]] = 1.0;
        AttackRecord {
            activation: self.activations[r * a..(r + 1) * a].iter().map(|&v| v as f64).collect(),
            posterior: self.bank.posteriors[r * k..(r + 1) * k].to_vec(),
            predicted_label: onehot,
            loss: self.bank.losses[r],
            gradient: self.bank.gradients[r * g..(r + 1) * g].iter().map(|&v| v as f64).collect(),
            membership: self.bank.membership[r],
        }
    }

    /// A view on a subset of this dataset's rows.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            ..self.clone()
        }
    }

    pub fn batch(&self, positions: &[usize]) -> AttackBatch {
        let n = positions.len();
        let (a, k) = (self.shapes.activation, self.shapes.classes);
        let [g0, g1] = self.shapes.gradient;
        let mut act = Vec::with_capacity(n * a);
        let mut post = Vec::with_capacity(n * k);
        let mut onehot = vec![0.0; n * k];
        let mut loss = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(n * g0 * g1);
        for (i, &p) in positions.iter().enumerate() {
            let r = self.rows[p];
            act.extend(self.activations[r * a..(r + 1) * a].iter().map(|&v| v as f64));
            post.extend_from_slice(&self.bank.posteriors[r * k..(r + 1) * k]);
            onehot[i * k + self.bank.predicted[r]] = 1.0;
            loss.push(self.bank.losses[r]);
            grad.extend(
                self.bank.gradients[r * g0 * g1..(r + 1) * g0 * g1]
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        AttackBatch {
            activation: Tensor::new(vec![n, a], act),
            posterior: Tensor::new(vec![n, k], post),
            label: Tensor::new(vec![n, k], onehot),
            loss: Tensor::new(vec![n, 1], loss),
            gradient: Tensor::new(vec![n, 1, g0, g1], grad),
        }
    }

    /// Positions of a class-balanced subsample (larger class trimmed).
    pub fn balanced_positions(&self, seed: u64) -> Vec<usize> {
        let labels = self.labels();
        let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let keep = pos.len().min(neg.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if pos.len() > keep {
            pos.shuffle(&mut rng);
            pos.truncate(keep);
        }
        if neg.len() > keep {
            neg.shuffle(&mut rng);
            neg.truncate(keep);
        }
        let mut all: Vec<usize> = pos.into_iter().chain(neg).collect();
        all.sort_unstable();
        all
    }

    /// Checks every record invariant.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            let r = self.record(i);
            let sum: f64 = r.posterior.iter().sum();
            if (sum - 1.0).abs() > 1e-5 || r.posterior.iter().any(|p| *p < 0.0) {
                return Err(Error::NumericFault {
                    index: i,
                    what: format!("posterior sums to {sum}"),
                });
            }
            let hot = r.predicted_label.iter().filter(|v| **v != 0.0).count();
            if hot != 1 || r.predicted_label[argmax(&r.posterior)] != 1.0 {
                return Err(Error::NumericFault {
                    index: i,
                    what: "predicted label disagrees with posterior argmax".into(),
                });
            }
            if r.loss < 0.0 || !r.loss.is_finite() {
                return Err(Error::NumericFault {
                    index: i,
                    what: format!("loss {}", r.loss),
                });
            }
        }
        Ok(())
    }

    pub fn paths(run: &Path, provenance: &Provenance, split: &str) -> (PathBuf, PathBuf) {
        let dir = run.join("features");
        let stem = format!("{}-{split}", provenance.cell_name());
        (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
    }

    /// Writes the masked activation block and a manifest pointing at the
    /// shared base features.
    pub fn save(&self, run: &Path, split: &str) -> Result<PathBuf> {
        let (bin, json) = Self::paths(run, &self.provenance, split);
        let a = self.shapes.activation;
        let mut block = Vec::with_capacity(self.len() * a);
        for &r in &self.rows {
            block.extend_from_slice(&self.activations[r * a..(r + 1) * a]);
        }
        io::write_f32(&bin, &block)?;
        let labels = self.labels();
        let members = labels.iter().filter(|&&l| l == 1).count();
        let (base, _) = FeatureBank::base_paths(run, split);
        io::write_json(
            &json,
            &serde_json::json!({
                "provenance": self.provenance,
                "shapes": self.shapes,
                "records": self.len(),
                "members": members,
                "nonmembers": labels.len() - members,
                "mask": self.mask,
                "base": base.file_name().and_then(|s| s.to_str()),
                "sha256": io::sha256_file(&bin)?,
            }),
        )?;
        Ok(bin)
    }
}

/// Builds records for a membership set under one mask.
pub fn build_attack_dataset(
    ckpt: &ModelCheckpoint,
    registry: &LayerRegistry,
    dataset: &LabeledDataset,
    set: &MembershipSet,
    mask: &SelectionMask,
) -> Result<AttackDataset> {
    if mask.indices.is_empty() {
        return Err(Error::InvalidArgument(format!("mask {} is empty", mask.name())));
    }
    FeatureBank::build(ckpt, registry, &mask.layer, dataset, set)?.dataset(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{register_layers, LayerSelector};
    use crate::nn::layers::{Dense, Layer};
    use crate::nn::Network;
    use crate::zoo::Architecture;
    use rand::Rng;

    fn linear_model(seed: u64) -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(vec![Layer::Flatten, Layer::Dense(Dense::new(4, 3, &mut rng))]);
        ModelCheckpoint::from_network(Architecture::Mlp, [1, 2, 2], 3, net, vec![("input".into(), 0)]).unwrap()
    }

    fn toy(n: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pixels = (0..n * 4).map(|_| rng.gen::<f32>()).collect();
        LabeledDataset::new("toy", (2, 2, 1), 3, pixels, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn prediction_feature_examples() {
        let ln = |p: f64| p.ln();
        let pf = PredictionFeatures::from_logits(&[ln(0.1), ln(0.7), ln(0.2)], 2).unwrap();
        assert_eq!(pf.predicted, 1);
        assert_eq!(pf.one_hot(), vec![0.0, 1.0, 0.0]);
        assert!((pf.loss + 0.2f64.ln()).abs() < 1e-12);
        let uniform = PredictionFeatures::from_logits(&[0.0; 10], 4).unwrap();
        assert!((uniform.loss - 10f64.ln()).abs() < 1e-12);
        let sharp = PredictionFeatures::from_logits(&[0.0, 800.0, 0.0], 1).unwrap();
        assert_eq!(sharp.loss, 0.0);
    }

    #[test]
    fn linear_gradient_matches_closed_form_and_finite_differences() {
        let ckpt = linear_model(1);
        let x = [0.3f32, 0.9, 0.1, 0.5];
        let y = 2;
        let g = compute_gradient_features(&ckpt, &x, y).unwrap();
        let d = ckpt.head_layer();
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let logits: Vec<f64> = (0..3)
            .map(|o| d.bias[o] + (0..4).map(|j| d.weight[o * 4 + j] * xs[j]).sum::<f64>())
            .collect();
        let p = softmax(&logits);
        for o in 0..3 {
            for j in 0..4 {
                let hand = (p[o] - if o == y { 1.0 } else { 0.0 }) * xs[j];
                assert!((g[o * 4 + j] - hand).abs() < 1e-12);
            }
        }
        let eps = 1e-4;
        for slot in 0..12 {
            let loss_at = |delta: f64| {
                let mut c = ckpt.clone();
                if let Layer::Dense(d) = &mut c.network.layers[1] {
                    d.weight[slot] += delta;
                }
                compute_prediction_features(&c, &x, y).unwrap().loss
            };
            let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            assert!((fd - g[slot]).abs() <= 1e-3 * fd.abs().max(1e-6), "{slot}: {fd} vs {}", g[slot]);
        }
    }

    #[test]
    fn zero_loss_vertex_has_vanishing_gradient() {
        let mut ckpt = linear_model(2);
        if let Layer::Dense(d) = &mut ckpt.network.layers[1] {
            d.weight.fill(0.0);
            d.bias = vec![0.0, 100.0, 0.0];
        }
        let g = compute_gradient_features(&ckpt, &[0.5; 4], 1).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn datasets_respect_masks_and_invariants() {
        let ckpt = crate::zoo::build_classifier(Architecture::Mlp, [1, 2, 2], 3, &(vec![0.5], vec![0.3]), 5).unwrap();
        let reg = register_layers(&ckpt, &LayerSelector::All, Flattening::Spatial).unwrap();
        let ds = toy(30);
        let set = MembershipSet {
            source: Source::Shadow,
            records: (0..30).map(|i| (i, u8::from(i < 20))).collect(),
        };
        let big = SelectionMask {
            layer: "fc1".into(),
            method: Some(Method::KlDivergence),
            threshold: Threshold::GRID[1],
            indices: vec![7, 3, 40, 11, 0],
        };
        let small = SelectionMask {
            indices: vec![7, 3],
            threshold: Threshold::GRID[0],
            ..big.clone()
        };
        let bank = FeatureBank::build(&ckpt, &reg, "fc1", &ds, &set).unwrap();
        let a = bank.dataset(&big).unwrap();
        let b = bank.dataset(&small).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 20);
        a.validate().unwrap();
        for i in 0..30 {
            assert_eq!(&a.record(i).activation[..2], &b.record(i).activation[..]);
        }
        assert_eq!(a.shapes.gradient, [3, 64]);
        let bal = a.balanced_positions(1);
        assert_eq!(bal.len(), 20);
        let sub = a.subset(&bal);
        assert_eq!(sub.labels().iter().filter(|&&l| l == 0).count(), 10);

        // staged f64 features agree with the stored dataset
        let x = ds.batch(&[4]);
        let reg_l = reg.get("fc1").unwrap();
        let direct = batch_features(&ckpt, reg_l, Flattening::Spatial, &big.indices, &x, &[ds.label(4)]).unwrap();
        let stored = a.batch(&[4]);
        for (d, s) in direct.components().iter().zip(stored.components()) {
            for (u, v) in d.data().iter().zip(s.data()) {
                assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()));
            }
        }

        let empty = SelectionMask { indices: vec![], ..big.clone() };
        assert!(matches!(bank.dataset(&empty), Err(Error::InvalidArgument(_))));

        let dir = tempfile::tempdir().unwrap();
        bank.save_base(dir.path(), "target-eval").unwrap();
        let p = a.save(dir.path(), "target-eval").unwrap();
        assert_eq!(io::read_f32(&p).unwrap().len(), 30 * 5);
        let again = FeatureBank::build(&ckpt, &reg, "fc1", &ds, &set).unwrap().dataset(&big).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p2 = again.save(d2.path(), "target-eval").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(p2).unwrap());
    }
}
