//! Run configuration: a TOML file of typed keys, validated before any work.
//!
//! ```toml
//! name = "desk"
//! dataset = "fmnist"
//! arch = "desk"
//! split_sizes = "5000,5000,5000,5000"
//! seed = 7
//! grid_layers = "last"
//! baseline_layers = "last3"
//! methods = "all"
//! thresholds = [20, 40, 60, 80]
//!
//! [classifier]
//! learning_rate = 1e-3
//! epochs = 80
//! stop_at_full_train_accuracy = true
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::capture::{register_layers, Flattening, LayerSelector};
use crate::data::{dataset_shape, SplitSizes};
use crate::io;
use crate::nn::OptimizerKind;
use crate::selection::{Method, SelectionParams, Threshold};
use crate::zoo::{build_classifier, Architecture, LrSchedule, TrainConfig};
use crate::{Error, Result};

/// Optional overrides applied on top of a training preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub schedule: Option<LrSchedule>,
    pub optimizer: Option<OptimizerKind>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub stop_at_full_train_accuracy: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, mut base: TrainConfig, seed: u64) -> TrainConfig {
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.schedule {
            base.schedule = v;
        }
        if let Some(v) = self.optimizer {
            base.optimizer = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.stop_at_full_train_accuracy {
            base.stop_at_full_train_accuracy = v;
        }
        base.seed = seed;
        base
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineImage {
    /// Mean image of the target training split.
    #[default]
    Mean,
    Zeros,
}

mod as_string {
    use super::*;

    pub fn serialize<T: std::fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr<Err = Error>,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod methods {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(String),
        Many(Vec<String>),
    }

    pub fn serialize<S: Serializer>(v: &[Method], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|m| m.id()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Method>, D::Error> {
        let names = match Raw::deserialize(d)? {
            Raw::One(s) if s == "all" => return Ok(Method::ALL.to_vec()),
            Raw::One(s) => s.split(',').map(|p| p.trim().to_string()).collect(),
            Raw::Many(v) => v,
        };
        names
            .iter()
            .map(|n| n.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

mod thresholds {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u32),
        Float(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[Threshold], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|t| t.percent()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Threshold>, D::Error> {
        Vec::<Raw>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Raw::Int(p) => p.to_string().parse(),
                Raw::Float(f) => Threshold::from_fraction(f),
                Raw::Text(s) => s.parse(),
            })
            .collect::<Result<_>>()
            .map_err(serde::de::Error::custom)
    }
}

fn default_name() -> String {
    "run".into()
}
fn default_arch() -> Architecture {
    Architecture::Desk
}
fn default_grid_layers() -> LayerSelector {
    LayerSelector::LastN(1)
}
fn default_baseline_layers() -> LayerSelector {
    LayerSelector::LastN(3)
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_thresholds() -> Vec<Threshold> {
    Threshold::GRID.to_vec()
}
fn default_attack_fraction() -> f64 {
    0.6
}
fn default_k() -> usize {
    crate::ensemble::DEFAULT_K
}
fn default_kmax() -> usize {
    12
}
fn default_permutations() -> usize {
    256
}
fn default_samples() -> usize {
    16
}
fn default_steps() -> usize {
    64
}
fn default_pca() -> usize {
    1000
}
fn default_true() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: String,
    /// Dataset directory; falls back to `$MIA_LENS_DATA`, then `/root/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_arch")]
    pub arch: Architecture,
    #[serde(with = "as_string")]
    pub split_sizes: SplitSizes,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flattening: Flattening,
    /// Layers that receive the full method x threshold grid.
    #[serde(default = "default_grid_layers", with = "as_string")]
    pub grid_layers: LayerSelector,
    /// Layers that receive an unselected (T = 100%) attack.
    #[serde(default = "default_baseline_layers", with = "as_string")]
    pub baseline_layers: LayerSelector,
    #[serde(default = "default_methods", with = "methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_thresholds", with = "thresholds")]
    pub thresholds: Vec<Threshold>,
    /// Share of shadow records used to train attack models; the rest is
    /// halved into ensemble fit and holdout sets.
    #[serde(default = "default_attack_fraction")]
    pub attack_train_fraction: f64,
    #[serde(default)]
    pub classifier: TrainOverrides,
    #[serde(default)]
    pub attack: TrainOverrides,
    #[serde(default)]
    pub shap_meta: TrainOverrides,
    #[serde(default)]
    pub selection: SelectionParams,
    #[serde(default = "default_k")]
    pub ensemble_k: usize,
    #[serde(default = "default_kmax")]
    pub sweep_kmax: usize,
    #[serde(default = "default_permutations")]
    pub shapley_permutations: usize,
    #[serde(default)]
    pub shapley_max_rows: Option<usize>,
    #[serde(default = "default_samples")]
    pub explain_samples: usize,
    #[serde(default = "default_steps")]
    pub explain_steps: usize,
    #[serde(default)]
    pub explain_baseline: BaselineImage,
    /// Mask such as `rf-40` on the deepest grid layer; defaults to the best
    /// grid cell by shadow accuracy.
    #[serde(default)]
    pub explain_mask: Option<String>,
    #[serde(default = "default_pca")]
    pub pca_samples: usize,
    /// Write per-cell attack features under `features/`.
    #[serde(default = "default_true")]
    pub save_features: bool,
    #[serde(default = "default_out", skip_serializing)]
    pub out_root: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        let (input, classes) = dataset_shape(&self.dataset).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad(format!("run name '{}' must be non-empty [A-Za-z0-9_-]", self.name));
        }
        let probe = build_classifier(self.arch, input, classes, &(vec![0.0; input[0]], vec![1.0; input[0]]), 0)?;
        let mut grid_layers = 0;
        for (i, sel) in [&self.grid_layers, &self.baseline_layers].into_iter().enumerate() {
            let reg = register_layers(&probe, sel, self.flattening)
                .map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
            if i == 0 {
                grid_layers = reg.layers.len();
            }
        }
        if self.methods.is_empty() {
            return bad("at least one selection method is required".into());
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return bad("selection methods must be distinct".into());
        }
        if self.thresholds.is_empty() {
            return bad("at least one threshold is required".into());
        }
        if let Some(t) = self.thresholds.iter().find(|t| t.percent() % 20 != 0) {
            return bad(format!("threshold {t}% is not one of 20, 40, 60, 80, 100"));
        }
        if grid_layers * self.methods.len() * self.thresholds.len() < 2 {
            return bad("the grid needs at least two selected cells to rank and stack".into());
        }
        if !(self.attack_train_fraction > 0.0 && self.attack_train_fraction < 1.0) {
            return bad(format!("attack_train_fraction {} must be in (0, 1)", self.attack_train_fraction));
        }
        if self.ensemble_k == 0 || self.sweep_kmax == 0 {
            return bad("ensemble_k and sweep_kmax must be at least 1".into());
        }
        if self.shapley_permutations == 0 || self.explain_steps == 0 {
            return bad("shapley_permutations and explain_steps must be at least 1".into());
        }
        for (name, o, base) in [
            ("classifier", &self.classifier, TrainConfig::classifier()),
            ("attack", &self.attack, TrainConfig::attack()),
            ("shap_meta", &self.shap_meta, TrainConfig::shap_meta()),
        ] {
            o.apply(base, 0)
                .validate()
                .map_err(|e| Error::InvalidConfiguration(format!("[{name}] {e}")))?;
        }
        let s = &self.split_sizes;
        if s.target_train == 0 || s.target_test == 0 || s.shadow_train == 0 || s.shadow_test == 0 {
            return bad("every split must be non-empty".into());
        }
        Ok(())
    }

    /// Hash of every setting that affects results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_root = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        io::sha256_hex(&bytes)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root.join(format!("{}-{}", self.name, &self.hash()[..12]))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os("MIA_LENS_DATA").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("/root/data"))
    }

    /// Per-stage seed derived from the root seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        io::derive_seed(self.seed, stage)
    }

    pub fn classifier_config(&self, role: &str) -> TrainConfig {
        self.classifier
            .apply(TrainConfig::classifier(), self.stage_seed(&format!("train/{role}")))
    }

    pub fn attack_config(&self) -> TrainConfig {
        self.attack.apply(TrainConfig::attack(), self.stage_seed("grid"))
    }

    pub fn shap_meta_config(&self) -> TrainConfig {
        self.shap_meta.apply(TrainConfig::shap_meta(), self.stage_seed("ensemble"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
dataset = "fmnist"
split_sizes = "100,100,100,100"
"#;

    #[test]
    fn defaults_and_hash() {
        let c = RunConfig::parse(MIN).unwrap();
        assert_eq!(c.methods.len(), 5);
        assert_eq!(c.thresholds, Threshold::GRID.to_vec());
        assert_eq!(c.grid_layers, LayerSelector::LastN(1));
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.hash(), d.hash());
        let mut e = c.clone();
        e.out_root = "elsewhere".into();
        assert_eq!(c.hash(), e.hash());
        assert_ne!(c.stage_seed("split"), c.stage_seed("train"));
        assert_eq!(c.classifier_config("target").learning_rate, 1e-5);
    }

    #[test]
    fn typed_values() {
        let c = RunConfig::parse(&format!(
            "{MIN}methods = [\"rf\", \"t_test\"]\nthresholds = [0.2, \"40\", 60]\n[attack]\nepochs = 3\n[selection]\nkl_bins = 20\n"
        ))
        .unwrap();
        assert_eq!(c.methods, vec![Method::RandomForest, Method::TTest]);
        assert_eq!(c.thresholds.iter().map(|t| t.percent()).collect::<Vec<_>>(), vec![20, 40, 60]);
        assert_eq!(c.attack_config().epochs, 3);
        assert_eq!(c.selection.kl_bins, 20);
    }

    #[test]
    fn rejects_bad_input() {
        for extra in [
            "colour = 1",
            "methods = [\"magic\"]",
            "thresholds = [30]",
            "grid_layers = \"conv9\"",
            "[attack]\nlearning_rate = -1.0",
            "[selection]\nbins = 3",
            "attack_train_fraction = 1.5",
        ] {
            let r = RunConfig::parse(&format!("{MIN}{extra}\n"));
            assert!(matches!(r, Err(Error::InvalidConfiguration(_))), "{extra}: {r:?}");
        }
        assert!(RunConfig::parse("dataset = \"cifar99\"\nsplit_sizes = \"1,1,1,1\"").is_err());
    }
}
