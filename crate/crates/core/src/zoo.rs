//! Classifier architectures, training, evaluation and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::nn::layers::{BatchNorm, Conv2d, Dense, Layer, Residual};
use crate::nn::loss::{argmax, softmax_cross_entropy};
use crate::nn::{Network, Optimizer, OptimizerKind, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Three conv blocks and one hidden dense layer; the acceptance-scale model.
    Desk,
    /// One hidden dense layer over flattened pixels.
    Mlp,
    AlexNet,
    ResNet18,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Desk,
        Architecture::Mlp,
        Architecture::AlexNet,
        Architecture::ResNet18,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Architecture::Desk => "desk",
            Architecture::Mlp => "mlp",
            Architecture::AlexNet => "alexnet",
            Architecture::ResNet18 => "resnet18",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over `epochs`.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Stop as soon as an epoch ends with every training sample correct.
    pub stop_at_full_train_accuracy: bool,
}

impl TrainConfig {
    /// Target/shadow classifier defaults.
    pub fn classifier() -> Self {
        Self {
            learning_rate: 1e-5,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            epochs: 300,
            batch_size: 64,
            loss: LossKind::CrossEntropy,
            seed: 0,
            stop_at_full_train_accuracy: false,
        }
    }

    /// Attack-model defaults.
    pub fn attack() -> Self {
        Self {
            learning_rate: 1e-5,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            epochs: 50,
            batch_size: 64,
            loss: LossKind::BinaryCrossEntropy,
            seed: 0,
            stop_at_full_train_accuracy: false,
        }
    }

    /// Defaults for the meta-classifier explained when ranking attack models.
    pub fn shap_meta() -> Self {
        Self {
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            epochs: 10,
            batch_size: 32,
            loss: LossKind::BinaryCrossEntropy,
            seed: 0,
            stop_at_full_train_accuracy: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A layer whose output can be tapped for activation features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableLayer {
    pub id: String,
    /// Index in `Network::layers` whose output is captured.
    pub index: usize,
    /// Output shape without the batch axis.
    pub shape: Vec<usize>,
    /// True when the output follows a rectifier (all activations >= 0).
    pub rectified: bool,
}

impl ObservableLayer {
    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A trained (or freshly initialised) classifier plus its metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub arch: Architecture,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub network: Network,
    pub observable: Vec<ObservableLayer>,
    /// Index of the final classification `Dense` layer.
    pub head: usize,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub config: Option<TrainConfig>,
}

/// Checkpoint metadata written next to the parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<(String, usize)>,
    pub parameters: usize,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub config: Option<TrainConfig>,
}

impl ModelCheckpoint {
    /// Wraps an arbitrary network; observable entries are validated.
    pub fn from_network(
        arch: Architecture,
        input: [usize; 3],
        classes: usize,
        network: Network,
        observable: Vec<(String, usize)>,
    ) -> Result<Self> {
        let head = network
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense(_)))
            .ok_or_else(|| Error::InvalidArgument("network has no dense head".into()))?;
        let in_shape = [1, input[0], input[1], input[2]];
        let out = network.output_shape(&in_shape);
        if out != [1, classes] {
            return Err(Error::InvalidArgument(format!(
                "network maps {in_shape:?} to {out:?}, expected [1, {classes}]"
            )));
        }
        let mut obs = Vec::with_capacity(observable.len());
        for (id, index) in observable {
            if index >= network.layers.len() {
                return Err(Error::InvalidLayer(format!("{id} at index {index}")));
            }
            let shape = network.shape_after(&in_shape, index)[1..].to_vec();
            let rectified = matches!(network.layers[index], Layer::Relu)
                || (matches!(network.layers[index], Layer::MaxPool { .. } | Layer::Flatten)
                    && index > 0
                    && matches!(network.layers[index - 1], Layer::Relu));
            obs.push(ObservableLayer {
                id,
                index,
                shape,
                rectified,
            });
        }
        Ok(Self {
            arch,
            input,
            classes,
            network,
            observable: obs,
            head,
            train_accuracy: None,
            test_accuracy: None,
            epochs_run: 0,
            config: None,
        })
    }

    pub fn layer(&self, id: &str) -> Result<&ObservableLayer> {
        self.observable
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::InvalidLayer(format!("'{id}' is not observable on {}", self.arch)))
    }

    /// The final classification layer.
    pub fn head_layer(&self) -> &Dense {
        match &self.network.layers[self.head] {
            Layer::Dense(d) => d,
            _ => unreachable!("head index always points at a dense layer"),
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != self.input[..] {
            return Err(Error::InvalidInput(format!(
                "input shape {:?} does not match {}x{}x{}",
                x.shape(),
                self.input[0],
                self.input[1],
                self.input[2]
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.network.predict(x)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            arch: self.arch,
            input: self.input,
            classes: self.classes,
            layers: self
                .observable
                .iter()
                .map(|l| (l.id.clone(), l.neurons()))
                .collect(),
            parameters: self.network.param_count(),
            train_accuracy: self.train_accuracy,
            test_accuracy: self.test_accuracy,
            epochs_run: self.epochs_run,
            config: self.config.clone(),
        }
    }

    /// Writes `<path>` (parameters) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let blob = bincode::serialize(self)?;
        fs::write(path, blob).map_err(|e| Error::io(path, e))?;
        let meta_path = meta_path(path);
        let meta = serde_json::to_string_pretty(&self.meta())?;
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ModelCheckpoint = bincode::deserialize(&blob)?;
        for l in &ckpt.observable {
            let shape = ckpt
                .network
                .shape_after(&[1, ckpt.input[0], ckpt.input[1], ckpt.input[2]], l.index);
            if shape[1..] != l.shape[..] {
                return Err(Error::Serialization(format!(
                    "layer {} metadata {:?} disagrees with parameters {:?}",
                    l.id,
                    l.shape,
                    &shape[1..]
                )));
            }
        }
        Ok(ckpt)
    }
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Builds a freshly initialised classifier.
///
/// `standardization` holds per-channel `(mean, std)` applied as the first
/// layer, so the model consumes raw `[0, 1]` pixels.
pub fn build_classifier(
    arch: Architecture,
    input: [usize; 3],
    classes: usize,
    standardization: &(Vec<f64>, Vec<f64>),
    seed: u64,
) -> Result<ModelCheckpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = input;
    let norm = Layer::Normalize {
        mean: standardization.0.clone(),
        std: standardization.1.clone(),
    };
    let (layers, observable): (Vec<Layer>, Vec<(&str, usize)>) = match arch {
        Architecture::Desk => {
            if h < 8 || w < 8 {
                return Err(Error::InvalidArgument(format!(
                    "desk CNN needs at least 8x8 inputs, got {h}x{w}"
                )));
            }
            let flat = 32 * (h / 8) * (w / 8);
            (
                vec![
                    norm,
                    Layer::Conv2d(Conv2d::new(c, 8, 3, 1, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool { size: 2 },
                    Layer::Conv2d(Conv2d::new(8, 16, 3, 1, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool { size: 2 },
                    Layer::Conv2d(Conv2d::new(16, 32, 3, 1, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool { size: 2 },
                    Layer::Flatten,
                    Layer::Dense(Dense::new(flat, 512, &mut rng)),
                    Layer::Relu,
                    Layer::Dense(Dense::new(512, classes, &mut rng)),
                ],
                vec![("conv1", 3), ("conv2", 6), ("conv3", 9), ("fc1", 12)],
            )
        }
        Architecture::Mlp => (
            vec![
                norm,
                Layer::Flatten,
                Layer::Dense(Dense::new(c * h * w, 64, &mut rng)),
                Layer::Relu,
                Layer::Dense(Dense::new(64, classes, &mut rng)),
            ],
            vec![("fc1", 3)],
        ),
        Architecture::AlexNet => alexnet(norm, input, classes, &mut rng)?,
        Architecture::ResNet18 => resnet18(norm, c, classes, &mut rng),
    };
    let observable = observable
        .into_iter()
        .map(|(id, i)| (id.to_string(), i))
        .collect();
    ModelCheckpoint::from_network(arch, input, classes, Network::new(layers), observable)
}

type Built = (Vec<Layer>, Vec<(&'static str, usize)>);

fn alexnet(norm: Layer, input: [usize; 3], classes: usize, rng: &mut ChaCha8Rng) -> Result<Built> {
    let [c, h, w] = input;
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!(
            "alexnet needs at least 16x16 inputs, got {h}x{w}"
        )));
    }
    let mut layers = vec![
        norm,
        Layer::Conv2d(Conv2d::new(c, 64, 3, 2, 1, rng)),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Conv2d(Conv2d::new(64, 192, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Conv2d(Conv2d::new(192, 384, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(384, 256, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(256, 256, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Flatten,
    ];
    let flat = Network::new(layers.clone()).output_shape(&[1, c, h, w])[1];
    layers.extend([
        Layer::Dropout { rate: 0.5 },
        Layer::Dense(Dense::new(flat, 1024, rng)),
        Layer::Relu,
        Layer::Dropout { rate: 0.5 },
        Layer::Dense(Dense::new(1024, 1024, rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(1024, classes, rng)),
    ]);
    Ok((
        layers,
        vec![
            ("conv1", 3),
            ("conv2", 6),
            ("conv3", 8),
            ("conv4", 10),
            ("conv5", 13),
            ("fc1", 17),
            ("fc2", 20),
        ],
    ))
}

fn basic_block(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer {
    let shortcut = if stride != 1 || cin != cout {
        vec![
            Layer::Conv2d(Conv2d::new(cin, cout, 1, stride, 0, rng)),
            Layer::BatchNorm(BatchNorm::new(cout)),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual(Residual {
        body: vec![
            Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, rng)),
            Layer::BatchNorm(BatchNorm::new(cout)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(cout, cout, 3, 1, 1, rng)),
            Layer::BatchNorm(BatchNorm::new(cout)),
        ],
        shortcut,
    })
}

fn resnet18(norm: Layer, c: usize, classes: usize, rng: &mut ChaCha8Rng) -> Built {
    let mut layers = vec![
        norm,
        Layer::Conv2d(Conv2d::new(c, 64, 3, 1, 1, rng)),
        Layer::BatchNorm(BatchNorm::new(64)),
        Layer::Relu,
    ];
    let mut observable = vec![("stem", 3)];
    let mut cin = 64;
    for (stage, (cout, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
        for b in 0..2 {
            layers.push(basic_block(cin, cout, if b == 0 { stride } else { 1 }, rng));
            layers.push(Layer::Relu);
            cin = cout;
        }
        let id = ["layer1", "layer2", "layer3", "layer4"][stage];
        observable.push((id, layers.len() - 1));
    }
    layers.push(Layer::GlobalAvgPool);
    observable.push(("pool", layers.len() - 1));
    layers.push(Layer::Dense(Dense::new(512, classes, rng)));
    (layers, observable)
}

/// A subset of a dataset addressed by indices.
#[derive(Clone, Copy)]
pub struct DataSlice<'a> {
    pub dataset: &'a LabeledDataset,
    pub indices: &'a [usize],
}

impl<'a> DataSlice<'a> {
    pub fn new(dataset: &'a LabeledDataset, indices: &'a [usize]) -> Self {
        Self { dataset, indices }
    }
}

const EVAL_BATCH: usize = 256;

/// Trains a classifier from scratch and records train/test accuracy.
pub fn train_classifier(
    arch: Architecture,
    train: DataSlice<'_>,
    test: DataSlice<'_>,
    standardization: &(Vec<f64>, Vec<f64>),
    config: &TrainConfig,
) -> Result<ModelCheckpoint> {
    config.validate()?;
    if train.indices.is_empty() {
        return Err(Error::InvalidInput("empty training slice".into()));
    }
    let ds = train.dataset;
    let mut ckpt = build_classifier(arch, ds.chw(), ds.classes, standardization, config.seed)?;
    fit_classifier(&mut ckpt, train, config)?;
    ckpt.train_accuracy = Some(evaluate_classifier(&ckpt, train)?);
    ckpt.test_accuracy = if test.indices.is_empty() {
        None
    } else {
        Some(evaluate_classifier(&ckpt, test)?)
    };
    ckpt.config = Some(config.clone());
    info!(
        "{} trained for {} epochs: train {:.4} test {:?}",
        arch, ckpt.epochs_run, ckpt.train_accuracy.unwrap_or(0.0), ckpt.test_accuracy
    );
    Ok(ckpt)
}

/// Runs the optimisation loop on an existing checkpoint.
pub fn fit_classifier(
    ckpt: &mut ModelCheckpoint,
    train: DataSlice<'_>,
    config: &TrainConfig,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &ckpt.network);
    let mut grads = ckpt.network.zero_grads();
    let mut order: Vec<usize> = train.indices.to_vec();
    for epoch in 0..config.epochs {
        opt.set_learning_rate(config.schedule.rate(config.learning_rate, epoch, config.epochs));
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = train.dataset.batch(batch);
            let y = train.dataset.batch_labels(batch);
            let trace = ckpt.network.forward(&x, true, Some(&mut rng), &[]);
            let (loss, g) = softmax_cross_entropy(&trace.output, &y);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            correct += (0..batch.len())
                .filter(|&i| argmax(trace.output.row(i)) == y[i])
                .count();
            grads.zero();
            ckpt.network.backward(&trace, g, &[], Some(&mut grads), false);
            opt.step(&mut ckpt.network, &grads);
            ckpt.network.absorb_batch_stats(&trace);
        }
        ckpt.epochs_run = epoch + 1;
        debug!(
            "epoch {epoch}: loss {:.5} running acc {:.4}",
            loss_sum / order.len() as f64,
            correct as f64 / order.len() as f64
        );
        if config.stop_at_full_train_accuracy
            && correct == order.len()
            && evaluate_classifier(ckpt, train)? == 1.0
        {
            break;
        }
    }
    Ok(())
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate_classifier(ckpt: &ModelCheckpoint, data: DataSlice<'_>) -> Result<f64> {
    if data.indices.is_empty() {
        return Err(Error::InvalidInput("empty evaluation slice".into()));
    }
    if data.dataset.chw() != ckpt.input {
        return Err(Error::InvalidInput(format!(
            "dataset images {:?} do not match model input {:?}",
            data.dataset.chw(),
            ckpt.input
        )));
    }
    let mut correct = 0;
    for batch in data.indices.chunks(EVAL_BATCH) {
        let out = ckpt.logits(&data.dataset.batch(batch));
        correct += batch
            .iter()
            .enumerate()
            .filter(|(i, &idx)| argmax(out.row(*i)) == data.dataset.label(idx))
            .count();
    }
    Ok(correct as f64 / data.indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_std(c: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; c], vec![1.0; c])
    }

    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { 0.2 } else { 0.8 };
            for _ in 0..4 {
                let v: f64 = centre + rng.gen_range(-0.08..0.08);
                pixels.push(v as f32);
            }
            labels.push(y);
        }
        LabeledDataset::new("blobs", (2, 2, 1), 2, pixels, labels).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 16,
            ..TrainConfig::classifier()
        }
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let ds = blobs(200, 1);
        // Closed-form separability oracle: the midpoint hyperplane between
        // class means separates every sample.
        let mean = |y: usize| {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == y).collect();
            (0..4)
                .map(|d| idx.iter().map(|&i| ds.image(i)[d] as f64).sum::<f64>() / idx.len() as f64)
                .collect::<Vec<f64>>()
        };
        let (m0, m1) = (mean(0), mean(1));
        let w: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
        let b = -0.5 * (m1.iter().map(|v| v * v).sum::<f64>() - m0.iter().map(|v| v * v).sum::<f64>());
        for i in 0..ds.len() {
            let s: f64 = ds.image(i).iter().zip(&w).map(|(x, w)| *x as f64 * w).sum::<f64>() + b;
            assert_eq!(usize::from(s > 0.0), ds.label(i));
        }

        let train: Vec<usize> = (0..100).collect();
        let test: Vec<usize> = (100..200).collect();
        let ckpt = train_classifier(
            Architecture::Mlp,
            DataSlice::new(&ds, &train),
            DataSlice::new(&ds, &test),
            &unit_std(1),
            &quick(),
        )
        .unwrap();
        assert_eq!(ckpt.test_accuracy, Some(1.0));
    }

    #[test]
    fn single_sample_is_memorised() {
        let ds = blobs(10, 2);
        let ckpt = train_classifier(
            Architecture::Mlp,
            DataSlice::new(&ds, &[3]),
            DataSlice::new(&ds, &[]),
            &unit_std(1),
            &quick(),
        )
        .unwrap();
        assert_eq!(ckpt.train_accuracy, Some(1.0));
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_round_trip() {
        let ds = blobs(64, 3);
        let idx: Vec<usize> = (0..48).collect();
        let test: Vec<usize> = (48..64).collect();
        let cfg = TrainConfig { epochs: 3, ..quick() };
        let a = train_classifier(Architecture::Mlp, DataSlice::new(&ds, &idx), DataSlice::new(&ds, &test), &unit_std(1), &cfg).unwrap();
        let b = train_classifier(Architecture::Mlp, DataSlice::new(&ds, &idx), DataSlice::new(&ds, &test), &unit_std(1), &cfg).unwrap();
        assert_eq!(a.test_accuracy, b.test_accuracy);
        assert_eq!(a.network.layers.len(), b.network.layers.len());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target-mlp-blobs.ckpt");
        a.save(&path).unwrap();
        assert!(meta_path(&path).exists());
        let back = ModelCheckpoint::load(&path).unwrap();
        let acc = evaluate_classifier(&back, DataSlice::new(&ds, &test)).unwrap();
        assert_eq!(acc.to_bits(), a.test_accuracy.unwrap().to_bits());
    }

    #[test]
    fn constant_model_scores_half_on_balanced_set() {
        let ds = blobs(20, 4);
        let mut ckpt = build_classifier(Architecture::Mlp, ds.chw(), 2, &unit_std(1), 0).unwrap();
        if let Layer::Dense(d) = &mut ckpt.network.layers[4] {
            d.weight.fill(0.0);
            d.bias = vec![1.0, 0.0];
        }
        let idx: Vec<usize> = (0..20).collect();
        assert_eq!(evaluate_classifier(&ckpt, DataSlice::new(&ds, &idx)).unwrap(), 0.5);
        assert!(matches!(
            evaluate_classifier(&ckpt, DataSlice::new(&ds, &[])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = blobs(20, 5);
        let idx: Vec<usize> = (0..20).collect();
        let mut ckpt = build_classifier(Architecture::Mlp, ds.chw(), 2, &unit_std(1), 0).unwrap();
        if let Layer::Dense(d) = &mut ckpt.network.layers[4] {
            d.bias[0] = f64::NAN;
        }
        let err = fit_classifier(&mut ckpt, DataSlice::new(&ds, &idx), &quick()).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { epoch: 0 }));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { learning_rate: 0.0, ..quick() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..quick() }.validate().is_err());
        assert!("vgg".parse::<Architecture>().is_err());
    }

    #[test]
    fn registry_shapes() {
        let desk = build_classifier(Architecture::Desk, [1, 28, 28], 10, &unit_std(1), 0).unwrap();
        let ids: Vec<_> = desk.observable.iter().map(|l| (l.id.as_str(), l.neurons())).collect();
        assert_eq!(ids, vec![("conv1", 1568), ("conv2", 784), ("conv3", 288), ("fc1", 512)]);
        assert!(desk.observable.iter().all(|l| l.rectified));
        assert_eq!(desk.head_layer().outputs, 10);

        let alex = build_classifier(Architecture::AlexNet, [3, 32, 32], 10, &unit_std(3), 0).unwrap();
        assert_eq!(alex.observable.len(), 7);
        let x = Tensor::zeros(vec![1, 3, 32, 32]);
        assert_eq!(alex.logits(&x).shape(), &[1, 10]);

        let res = build_classifier(Architecture::ResNet18, [1, 28, 28], 10, &unit_std(1), 0).unwrap();
        assert_eq!(res.observable.last().unwrap().neurons(), 512);
        assert_eq!(res.head_layer().inputs, 512);
    }
}
