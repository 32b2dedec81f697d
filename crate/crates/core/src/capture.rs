//! Observable-layer registry and activation extraction.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MembershipSet, Source};
use crate::io;
use crate::zoo::ModelCheckpoint;
use crate::{Error, Result};

/// Which observable layers to register.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelector {
    All,
    LastN(usize),
    Named(Vec<String>),
}

impl FromStr for LayerSelector {
    type Err = Error;

    /// Accepts `all`, `last`, `lastN` or a comma-separated list of ids.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSelector::All);
        }
        if s == "last" {
            return Ok(LayerSelector::LastN(1));
        }
        if let Some(n) = s.strip_prefix("last") {
            return n
                .parse()
                .map(LayerSelector::LastN)
                .map_err(|_| Error::InvalidArgument(format!("bad layer selector '{s}'")));
        }
        let ids: Vec<String> = s
            .split(',')
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty layer selector".into()));
        }
        Ok(LayerSelector::Named(ids))
    }
}

impl std::fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSelector::All => f.write_str("all"),
            LayerSelector::LastN(n) => write!(f, "last{n}"),
            LayerSelector::Named(ids) => f.write_str(&ids.join(",")),
        }
    }
}

/// How a spatial `C x H x W` map becomes a row of neurons.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flattening {
    /// Every spatial position of every channel is a neuron, channel-major.
    #[default]
    Spatial,
    /// One neuron per channel, the mean over its spatial map.
    ChannelMean,
}

impl FromStr for Flattening {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Flattening::Spatial),
            "channel-mean" => Ok(Flattening::ChannelMean),
            _ => Err(Error::InvalidArgument(format!("unknown flattening '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisteredLayer {
    pub id: String,
    /// Index of the tapped layer inside the network.
    pub index: usize,
    pub shape: Vec<usize>,
    pub neurons: usize,
    pub rectified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRegistry {
    pub flattening: Flattening,
    /// Shallowest first.
    pub layers: Vec<RegisteredLayer>,
}

impl LayerRegistry {
    pub fn get(&self, id: &str) -> Result<&RegisteredLayer> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::InvalidLayer(format!("layer '{id}' is not registered")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn deepest(&self) -> &RegisteredLayer {
        self.layers.last().expect("registry is never empty")
    }
}

pub fn register_layers(
    ckpt: &ModelCheckpoint,
    selector: &LayerSelector,
    flattening: Flattening,
) -> Result<LayerRegistry> {
    let all = &ckpt.observable;
    let chosen: Vec<_> = match selector {
        LayerSelector::All => all.iter().collect(),
        LayerSelector::LastN(n) => {
            if *n == 0 || *n > all.len() {
                return Err(Error::InvalidLayer(format!(
                    "last{n} requested but {} has {} observable layers",
                    ckpt.arch,
                    all.len()
                )));
            }
            all[all.len() - n..].iter().collect()
        }
        LayerSelector::Named(ids) => {
            for id in ids {
                ckpt.layer(id)?;
            }
            all.iter().filter(|l| ids.contains(&l.id)).collect()
        }
    };
    let layers = chosen
        .into_iter()
        .map(|l| {
            let neurons = match (flattening, l.shape.len()) {
                (Flattening::ChannelMean, 3) => l.shape[0],
                _ => l.neurons(),
            };
            RegisteredLayer {
                id: l.id.clone(),
                index: l.index,
                shape: l.shape.clone(),
                neurons,
                rectified: l.rectified,
            }
        })
        .collect();
    Ok(LayerRegistry { flattening, layers })
}

/// Activations of one layer: `rows x cols`, row-major, `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub layer: String,
    pub source: Source,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    /// Dataset index of each row.
    pub indices: Vec<usize>,
    /// Membership label of each row.
    pub membership: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ActivationManifest {
    layer: String,
    source: Source,
    rows: usize,
    cols: usize,
    indices: Vec<usize>,
    membership: Vec<u8>,
}

impl ActivationMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j] as f64).collect()
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            layer: self.layer.clone(),
            source: self.source,
            rows: rows.len(),
            cols: self.cols,
            data,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            membership: rows.iter().map(|&r| self.membership[r]).collect(),
        }
    }

    /// Splits rows into (members, non-members).
    pub fn split_membership(&self) -> (Self, Self) {
        let (m, n): (Vec<usize>, Vec<usize>) =
            (0..self.rows).partition(|&r| self.membership[r] == 1);
        (self.select_rows(&m), self.select_rows(&n))
    }

    pub fn paths(run: &Path, source: Source, layer: &str) -> (PathBuf, PathBuf) {
        let dir = run.join("activations");
        (
            dir.join(format!("{source}-{layer}.bin")),
            dir.join(format!("{source}-{layer}.json")),
        )
    }

    pub fn save(&self, run: &Path) -> Result<PathBuf> {
        let (bin, json) = Self::paths(run, self.source, &self.layer);
        io::write_f32(&bin, &self.data)?;
        io::write_json(
            &json,
            &ActivationManifest {
                layer: self.layer.clone(),
                source: self.source,
                rows: self.rows,
                cols: self.cols,
                indices: self.indices.clone(),
                membership: self.membership.clone(),
            },
        )?;
        Ok(bin)
    }

    pub fn load(run: &Path, source: Source, layer: &str) -> Result<Self> {
        let (bin, json) = Self::paths(run, source, layer);
        let m: ActivationManifest = io::read_json(&json)?;
        let data = io::read_f32(&bin)?;
        if data.len() != m.rows * m.cols || m.indices.len() != m.rows || m.membership.len() != m.rows {
            return Err(Error::Serialization(format!(
                "{}: manifest shape {}x{} disagrees with contents",
                bin.display(),
                m.rows,
                m.cols
            )));
        }
        Ok(Self {
            layer: m.layer,
            source: m.source,
            rows: m.rows,
            cols: m.cols,
            data,
            indices: m.indices,
            membership: m.membership,
        })
    }
}

const EXTRACT_BATCH: usize = 200;

pub fn extract_activations(
    ckpt: &ModelCheckpoint,
    registry: &LayerRegistry,
    layer: &str,
    dataset: &LabeledDataset,
    set: &MembershipSet,
) -> Result<ActivationMatrix> {
    let mut out = extract_layers(ckpt, registry, &[layer], dataset, set)?;
    Ok(out.remove(0))
}

/// Extracts several layers with one forward pass per batch.
pub fn extract_layers(
    ckpt: &ModelCheckpoint,
    registry: &LayerRegistry,
    layers: &[&str],
    dataset: &LabeledDataset,
    set: &MembershipSet,
) -> Result<Vec<ActivationMatrix>> {
    let regs: Vec<&RegisteredLayer> = layers
        .iter()
        .map(|id| registry.get(id))
        .collect::<Result<_>>()?;
    let taps: Vec<usize> = regs.iter().map(|l| l.index).collect();
    let indices = set.indices();
    let mut data: Vec<Vec<f32>> = regs
        .iter()
        .map(|l| Vec::with_capacity(indices.len() * l.neurons))
        .collect();
    for (b, chunk) in indices.chunks(EXTRACT_BATCH).enumerate() {
        let x = dataset.batch(chunk);
        ckpt.check_input(&x)?;
        let (_, tapped) = ckpt.network.predict_with_taps(&x, &taps);
        for (k, (t, reg)) in tapped.iter().zip(&regs).enumerate() {
            for i in 0..chunk.len() {
                let row = t.row(i);
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NumericFault {
                        index: b * EXTRACT_BATCH + i,
                        what: format!("activation {j} of layer {}", reg.id),
                    });
                }
                flatten_into(row, &reg.shape, registry.flattening, &mut data[k]);
            }
        }
    }
    Ok(regs
        .into_iter()
        .zip(data)
        .map(|(reg, data)| ActivationMatrix {
            layer: reg.id.clone(),
            source: set.source,
            rows: indices.len(),
            cols: reg.neurons,
            data,
            indices: indices.clone(),
            membership: set.labels(),
        })
        .collect())
}

fn flatten_into(row: &[f64], shape: &[usize], flattening: Flattening, out: &mut Vec<f32>) {
    match (flattening, shape.len()) {
        (Flattening::ChannelMean, 3) => {
            let plane = shape[1] * shape[2];
            for c in 0..shape[0] {
                let s: f64 = row[c * plane..(c + 1) * plane].iter().sum();
                out.push((s / plane as f64) as f32);
            }
        }
        _ => out.extend(row.iter().map(|&v| v as f32)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Dense, Layer};
    use crate::nn::Network;
    use crate::zoo::{build_classifier, Architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(n: usize) -> LabeledDataset {
        let pixels = (0..n * 4).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        LabeledDataset::new("toy", (2, 2, 1), 3, pixels, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    fn members(n: usize) -> MembershipSet {
        MembershipSet {
            source: Source::Shadow,
            records: (0..n).map(|i| (i, (i % 2) as u8)).collect(),
        }
    }

    #[test]
    fn selectors() {
        let desk = build_classifier(Architecture::Desk, [1, 28, 28], 10, &(vec![0.0], vec![1.0]), 0).unwrap();
        let r = register_layers(&desk, &"last3".parse().unwrap(), Flattening::Spatial).unwrap();
        assert_eq!(r.ids(), vec!["conv2", "conv3", "fc1"]);
        let alex = build_classifier(Architecture::AlexNet, [1, 28, 28], 10, &(vec![0.0], vec![1.0]), 0).unwrap();
        assert_eq!(register_layers(&alex, &LayerSelector::All, Flattening::Spatial).unwrap().layers.len(), 7);
        assert!(matches!(
            register_layers(&alex, &LayerSelector::LastN(99), Flattening::Spatial),
            Err(Error::InvalidLayer(_))
        ));
        assert!(matches!(
            register_layers(&alex, &"conv9".parse().unwrap(), Flattening::Spatial),
            Err(Error::InvalidLayer(_))
        ));
        let pooled = register_layers(&desk, &LayerSelector::All, Flattening::ChannelMean).unwrap();
        assert_eq!(pooled.layers[0].neurons, 8);
    }

    #[test]
    fn linear_layer_rows_equal_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dense = Dense::new(4, 3, &mut rng);
        dense.weight = vec![0.5, -1.0, 2.0, 0.0, 1.5, 0.25, -0.5, 1.0, -2.0, 0.0, 0.75, 3.0];
        dense.bias = vec![0.0; 3];
        let net = Network::new(vec![Layer::Flatten, Layer::Dense(dense.clone())]);
        let ckpt = ModelCheckpoint::from_network(
            Architecture::Mlp,
            [1, 2, 2],
            3,
            net,
            vec![("linear".into(), 1)],
        )
        .unwrap();
        let reg = register_layers(&ckpt, &LayerSelector::All, Flattening::Spatial).unwrap();
        let ds = toy_dataset(5);
        let acts = extract_activations(&ckpt, &reg, "linear", &ds, &members(5)).unwrap();
        assert_eq!((acts.rows, acts.cols), (5, 3));
        for i in 0..5 {
            let x = ds.image(i);
            for o in 0..3 {
                let hand: f64 = (0..4).map(|j| dense.weight[o * 4 + j] * x[j] as f64).sum();
                assert!((acts.row(i)[o] as f64 - hand).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn extraction_is_pure_and_ordered() {
        let desk = build_classifier(Architecture::Desk, [1, 8, 8], 3, &(vec![0.5], vec![0.25]), 3).unwrap();
        let before = bincode::serialize(&desk.network).unwrap();
        let pixels: Vec<f32> = (0..6 * 64).map(|i| ((i * 13) % 17) as f32 / 16.0).collect();
        let mut pixels2 = pixels.clone();
        pixels2[64..128].copy_from_slice(&pixels[..64]);
        let ds = LabeledDataset::new("t", (8, 8, 1), 3, pixels2, vec![0, 0, 1, 1, 2, 2]).unwrap();
        let reg = register_layers(&desk, &LayerSelector::All, Flattening::Spatial).unwrap();
        let set = MembershipSet {
            source: Source::Target,
            records: vec![(5, 0), (0, 1), (1, 1), (3, 0)],
        };
        let all = extract_layers(&desk, &reg, &["conv1", "fc1"], &ds, &set).unwrap();
        assert_eq!(bincode::serialize(&desk.network).unwrap(), before);
        let fc = &all[1];
        assert_eq!(fc.row(1), fc.row(2));
        assert_eq!(fc.indices, vec![5, 0, 1, 3]);
        assert_eq!(fc.membership, vec![0, 1, 1, 0]);
        assert!(all.iter().all(|m| m.data.iter().all(|v| *v >= 0.0)));
        let (m, n) = fc.split_membership();
        assert_eq!((m.rows, n.rows), (2, 2));
        assert_eq!(m.row(0), fc.row(1));

        let dir = tempfile::tempdir().unwrap();
        fc.save(dir.path()).unwrap();
        assert_eq!(&ActivationMatrix::load(dir.path(), Source::Target, "fc1").unwrap(), fc);
    }

    #[test]
    fn nan_activation_reports_sample() {
        let mut desk = build_classifier(Architecture::Mlp, [1, 2, 2], 3, &(vec![0.0], vec![1.0]), 0).unwrap();
        if let Layer::Dense(d) = &mut desk.network.layers[2] {
            d.bias[5] = f64::INFINITY;
        }
        let reg = register_layers(&desk, &LayerSelector::All, Flattening::Spatial).unwrap();
        let err = extract_activations(&desk, &reg, "fc1", &toy_dataset(3), &members(3)).unwrap_err();
        assert!(matches!(err, Error::NumericFault { index: 0, .. }));
    }
}
