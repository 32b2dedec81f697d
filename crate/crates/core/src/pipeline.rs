//! Stage executor.
//!
//! Each stage reads its inputs from the run directory, writes its outputs
//! there and records `stages/<stage>.json` with the content hash of every
//! output. A stage whose marker is complete and whose outputs still hash
//! the same is never re-executed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    cell_mask, cell_paths, load_grid, run_attack_grid, score_predictions, CellKey, CellResult, GridOptions, GridPlan,
    GridResult, LayerFeatures,
};
use crate::capture::{extract_layers, register_layers, ActivationMatrix, LayerRegistry, LayerSelector};
use crate::config::{BaselineImage, RunConfig};
use crate::data::{label_membership, load_dataset, partition, LabeledDataset, MembershipSet, Source, SplitSpec};
use crate::ensemble::{
    build_stacked_ensemble, collect_model_probabilities, ensemble_sweep, shap_rank_models, sweep_csv_path,
    write_sweep_csv, ModelRanking, ProbabilityMatrix, ShapleyParams,
};
use crate::explain::{
    attribution_ssim, cascade, explain_pair, mean_ssim, pca_project, render_overlay, save_overlay, write_ssim_csv,
    AttributionConfig, SsimRow,
};
use crate::features::FeatureBank;
use crate::io;
use crate::nn::Tensor;
use crate::selection::{NeuronRanking, SelectionMask, Threshold};
use crate::zoo::{meta_path, train_classifier, DataSlice, ModelCheckpoint};
use crate::{report, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Split,
    Train,
    Extract,
    Rank,
    Features,
    Grid,
    Ensemble,
    Sweep,
    Explain,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Split,
        Stage::Train,
        Stage::Extract,
        Stage::Rank,
        Stage::Features,
        Stage::Grid,
        Stage::Ensemble,
        Stage::Sweep,
        Stage::Explain,
        Stage::Report,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Rank => "rank",
            Stage::Features => "features",
            Stage::Grid => "grid",
            Stage::Ensemble => "ensemble",
            Stage::Sweep => "ensemble-sweep",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Split => &[],
            Stage::Train => &[Stage::Split],
            Stage::Extract => &[Stage::Train],
            Stage::Rank => &[Stage::Extract],
            Stage::Features => &[Stage::Rank],
            Stage::Grid => &[Stage::Features],
            Stage::Ensemble => &[Stage::Grid],
            Stage::Sweep => &[Stage::Ensemble],
            Stage::Explain => &[Stage::Grid],
            Stage::Report => &[Stage::Sweep, Stage::Explain],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub status: StageStatus,
    pub config_hash: String,
    pub seconds: f64,
    /// Run-relative output path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn marker_path(run: &Path, stage: Stage) -> PathBuf {
    run.join("stages").join(format!("{stage}.json"))
}

/// Shadow membership records divided between attack training, ensemble
/// fitting and the ensemble holdout, each stratified by membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSplit {
    pub attack_train: MembershipSet,
    pub ensemble_fit: MembershipSet,
    pub ensemble_holdout: MembershipSet,
}

impl AttackSplit {
    pub fn new(set: &MembershipSet, fraction: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts: [Vec<(usize, u8)>; 3] = Default::default();
        for label in [1u8, 0] {
            let mut recs: Vec<(usize, u8)> = set.records.iter().copied().filter(|r| r.1 == label).collect();
            recs.shuffle(&mut rng);
            let a = (recs.len() as f64 * fraction).round() as usize;
            let f = a + (recs.len() - a).div_ceil(2);
            parts[0].extend_from_slice(&recs[..a]);
            parts[1].extend_from_slice(&recs[a..f]);
            parts[2].extend_from_slice(&recs[f..]);
        }
        for (p, name) in parts.iter_mut().zip(["attack-train", "ensemble-fit", "ensemble-holdout"]) {
            p.sort_unstable();
            if !p.iter().any(|r| r.1 == 1) || !p.iter().any(|r| r.1 == 0) {
                return Err(Error::InvalidDataset(format!("{name} split lacks members or non-members")));
            }
        }
        let [attack_train, ensemble_fit, ensemble_holdout] = parts.map(|records| MembershipSet {
            source: set.source,
            records,
        });
        Ok(Self {
            attack_train,
            ensemble_fit,
            ensemble_holdout,
        })
    }

    /// Ensemble fit records followed by the holdout records.
    pub fn eval_set(&self) -> MembershipSet {
        MembershipSet {
            source: self.ensemble_fit.source,
            records: self
                .ensemble_fit
                .records
                .iter()
                .chain(&self.ensemble_holdout.records)
                .copied()
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Reuse grid cells finished by an interrupted run.
    pub resume: bool,
    /// Stop the grid after this many freshly trained cells.
    pub halt_after_cells: Option<usize>,
}

/// Probability matrices of every selected grid model on the ensemble rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleInputs {
    pub fit: ProbabilityMatrix,
    pub holdout: ProbabilityMatrix,
    pub target: ProbabilityMatrix,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub run: PathBuf,
    options: PipelineOptions,
    executed: Vec<Stage>,
    verified: HashSet<Stage>,
    dataset: Option<Arc<LabeledDataset>>,
    split: Option<Arc<SplitSpec>>,
    attack_split: Option<Arc<AttackSplit>>,
    checkpoints: BTreeMap<&'static str, Arc<ModelCheckpoint>>,
    features: Option<Arc<Vec<LayerFeatures>>>,
    grid: Option<Arc<GridResult>>,
    inputs: Option<Arc<EnsembleInputs>>,
}

impl Pipeline {
    pub fn new(config: RunConfig, options: PipelineOptions) -> Result<Self> {
        config.validate()?;
        let run = config.run_dir();
        std::fs::create_dir_all(&run).map_err(|e| Error::io(&run, e))?;
        io::write_json(&run.join("config.json"), &config)?;
        Ok(Self {
            config,
            run,
            options,
            executed: Vec::new(),
            verified: HashSet::new(),
            dataset: None,
            split: None,
            attack_split: None,
            checkpoints: BTreeMap::new(),
            features: None,
            grid: None,
            inputs: None,
        })
    }

    /// Stages executed (not merely verified) by this pipeline.
    pub fn executed(&self) -> &[Stage] {
        &self.executed
    }

    /// Runs every stage.
    pub fn run_all(&mut self) -> Result<()> {
        self.ensure(Stage::Report)
    }

    /// Brings `stage` and everything it depends on up to date.
    pub fn ensure(&mut self, stage: Stage) -> Result<()> {
        if self.verified.contains(&stage) {
            return Ok(());
        }
        for &d in stage.deps() {
            self.ensure(d)?;
        }
        let upstream_changed = stage.deps().iter().any(|d| self.executed.contains(d));
        if !upstream_changed && self.marker_valid(stage) {
            info!("stage {stage}: up to date");
            self.verified.insert(stage);
            return Ok(());
        }
        self.execute(stage)
    }

    fn marker_valid(&self, stage: Stage) -> bool {
        let Ok(m) = io::read_json::<StageMarker>(&marker_path(&self.run, stage)) else {
            return false;
        };
        m.status == StageStatus::Complete
            && m.config_hash == self.config.hash()
            && m.outputs
                .iter()
                .all(|(rel, hash)| io::sha256_file(&self.run.join(rel)).is_ok_and(|h| &h == hash))
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        info!("stage {stage}: running");
        let marker = marker_path(&self.run, stage);
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        let start = Instant::now();
        let result = match stage {
            Stage::Split => self.stage_split(),
            Stage::Train => self.stage_train(),
            Stage::Extract => self.stage_extract(),
            Stage::Rank => self.stage_rank(),
            Stage::Features => self.stage_features(),
            Stage::Grid => self.stage_grid(),
            Stage::Ensemble => self.stage_ensemble(),
            Stage::Sweep => self.stage_sweep(),
            Stage::Explain => self.stage_explain(),
            Stage::Report => self.stage_report(),
        };
        let seconds = start.elapsed().as_secs_f64();
        match result {
            Ok(paths) => {
                let mut outputs = BTreeMap::new();
                for p in paths {
                    let rel = p.strip_prefix(&self.run).unwrap_or(&p).to_string_lossy().into_owned();
                    outputs.insert(rel, io::sha256_file(&p)?);
                }
                io::write_json(
                    &marker,
                    &StageMarker {
                        stage: stage.id().into(),
                        status: StageStatus::Complete,
                        config_hash: self.config.hash(),
                        seconds,
                        outputs,
                        error: None,
                    },
                )?;
                info!("stage {stage}: done in {seconds:.1}s");
                self.executed.push(stage);
                self.verified.insert(stage);
                Ok(())
            }
            Err(e) => {
                warn!("stage {stage} failed: {e}");
                let _ = io::write_json(
                    &marker,
                    &StageMarker {
                        stage: stage.id().into(),
                        status: StageStatus::Failed,
                        config_hash: self.config.hash(),
                        seconds,
                        outputs: BTreeMap::new(),
                        error: Some(e.to_string()),
                    },
                );
                if let Err(re) = report::write_report(&self.run, &self.config, Some((stage, e.to_string()))) {
                    warn!("could not write failure report: {re}");
                }
                Err(e)
            }
        }
    }

    fn seed(&self, key: &str) -> u64 {
        self.config.stage_seed(key)
    }

    fn dataset(&mut self) -> Result<Arc<LabeledDataset>> {
        if self.dataset.is_none() {
            let ds = load_dataset(&self.config.dataset, &self.config.data_root())?;
            self.dataset = Some(Arc::new(ds));
        }
        Ok(self.dataset.clone().expect("loaded"))
    }

    fn split_path(&self) -> PathBuf {
        self.run.join("splits").join(format!("{}.json", self.config.dataset))
    }

    fn attack_split_path(&self) -> PathBuf {
        self.run.join("splits").join("attack.json")
    }

    fn split(&mut self) -> Result<Arc<SplitSpec>> {
        if self.split.is_none() {
            self.split = Some(Arc::new(SplitSpec::load(&self.split_path())?));
        }
        Ok(self.split.clone().expect("loaded"))
    }

    fn attack_split(&mut self) -> Result<Arc<AttackSplit>> {
        if self.attack_split.is_none() {
            self.attack_split = Some(Arc::new(io::read_json(&self.attack_split_path())?));
        }
        Ok(self.attack_split.clone().expect("loaded"))
    }

    pub fn checkpoint_path(&self, source: Source) -> PathBuf {
        self.run
            .join("checkpoints")
            .join(format!("{source}-{}-{}.ckpt", self.config.arch, self.config.dataset))
    }

    fn checkpoint(&mut self, source: Source) -> Result<Arc<ModelCheckpoint>> {
        if !self.checkpoints.contains_key(source.as_str()) {
            let c = ModelCheckpoint::load(&self.checkpoint_path(source))?;
            self.checkpoints.insert(source.as_str(), Arc::new(c));
        }
        Ok(self.checkpoints[source.as_str()].clone())
    }

    fn layer_ids(&mut self, selector: &LayerSelector) -> Result<Vec<String>> {
        let ckpt = self.checkpoint(Source::Target)?;
        Ok(register_layers(&ckpt, selector, self.config.flattening)?.ids())
    }

    /// Every layer the grid or a baseline reads, shallowest first.
    fn registry(&mut self) -> Result<LayerRegistry> {
        let mut ids = self.layer_ids(&self.config.grid_layers.clone())?;
        ids.extend(self.layer_ids(&self.config.baseline_layers.clone())?);
        let ckpt = self.checkpoint(Source::Target)?;
        register_layers(&ckpt, &LayerSelector::Named(ids), self.config.flattening)
    }

    pub fn plan(&mut self) -> Result<GridPlan> {
        Ok(GridPlan {
            methods: self.config.methods.clone(),
            thresholds: self.config.thresholds.clone(),
            layers: self.layer_ids(&self.config.grid_layers.clone())?,
            baselines: self.layer_ids(&self.config.baseline_layers.clone())?,
        })
    }

    fn rankings(&mut self) -> Result<Vec<NeuronRanking>> {
        let layers = self.layer_ids(&self.config.grid_layers.clone())?;
        let mut out = Vec::new();
        for layer in &layers {
            for &m in &self.config.methods {
                out.push(NeuronRanking::load(&self.run, m, layer)?);
            }
        }
        Ok(out)
    }

    fn layer_features(&mut self) -> Result<Arc<Vec<LayerFeatures>>> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        let ds = self.dataset()?;
        let split = self.split()?;
        let attack = self.attack_split()?;
        let target = self.checkpoint(Source::Target)?;
        let shadow = self.checkpoint(Source::Shadow)?;
        let registry = self.registry()?;
        let eval = attack.eval_set();
        let target_set = label_membership(&split, Source::Target);
        let features = registry
            .ids()
            .iter()
            .map(|layer| {
                Ok(LayerFeatures {
                    layer: layer.clone(),
                    train: FeatureBank::build(&shadow, &registry, layer, &ds, &attack.attack_train)?,
                    shadow_eval: FeatureBank::build(&shadow, &registry, layer, &ds, &eval)?,
                    target_eval: FeatureBank::build(&target, &registry, layer, &ds, &target_set)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let features = Arc::new(features);
        self.features = Some(features.clone());
        Ok(features)
    }

    fn cells_dir(&self) -> PathBuf {
        self.run.join("grid").join("cells")
    }

    pub fn grid(&mut self) -> Result<Arc<GridResult>> {
        if self.grid.is_none() {
            let plan = self.plan()?;
            self.grid = Some(Arc::new(load_grid(&self.cells_dir(), &plan)?));
        }
        Ok(self.grid.clone().expect("loaded"))
    }

    fn inputs_path(&self) -> PathBuf {
        self.run.join("ensemble").join("probabilities.bin")
    }

    fn ranking_json_path(&self) -> PathBuf {
        self.run.join("ensemble").join("ranking.json")
    }

    fn ensemble_inputs(&mut self) -> Result<Arc<EnsembleInputs>> {
        if self.inputs.is_none() {
            self.inputs = Some(Arc::new(io::read_bincode(&self.inputs_path())?));
        }
        Ok(self.inputs.clone().expect("loaded"))
    }

    fn stage_split(&mut self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let split = partition(&ds, self.config.split_sizes, self.seed("split"))?;
        let split_path = split.save(&self.run, &self.config.dataset)?;
        let shadow = label_membership(&split, Source::Shadow);
        let attack = AttackSplit::new(&shadow, self.config.attack_train_fraction, self.seed("split/attack"))?;
        io::write_json(&self.attack_split_path(), &attack)?;
        self.split = Some(Arc::new(split));
        self.attack_split = Some(Arc::new(attack));
        Ok(vec![split_path, self.attack_split_path()])
    }

    fn stage_train(&mut self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let split = self.split()?;
        let arch = self.config.arch;
        let train = |source: Source| {
            let cfg = self.config.classifier_config(source.as_str());
            train_classifier(
                arch,
                DataSlice::new(&ds, split.train(source)),
                DataSlice::new(&ds, split.test(source)),
                split.standardization(source),
                &cfg,
            )
        };
        let (target, shadow) = rayon::join(|| train(Source::Target), || train(Source::Shadow));
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        for (source, ckpt) in [(Source::Target, target?), (Source::Shadow, shadow?)] {
            let path = self.checkpoint_path(source);
            ckpt.save(&path)?;
            summary.push(report::ClassifierSummary {
                role: source.to_string(),
                train_accuracy: ckpt.train_accuracy,
                test_accuracy: ckpt.test_accuracy,
                epochs: ckpt.epochs_run,
            });
            outputs.push(meta_path(&path));
            outputs.push(path);
            self.checkpoints.insert(source.as_str(), Arc::new(ckpt));
        }
        let acc = report::classifier_summary_path(&self.run);
        io::write_json(&acc, &summary)?;
        outputs.push(acc);
        Ok(outputs)
    }

    fn stage_extract(&mut self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let split = self.split()?;
        let registry = self.registry()?;
        let ids = registry.ids();
        let layers: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut outputs = Vec::new();
        for source in [Source::Target, Source::Shadow] {
            let ckpt = self.checkpoint(source)?;
            let set = label_membership(&split, source);
            for m in extract_layers(&ckpt, &registry, &layers, &ds, &set)? {
                m.save(&self.run)?;
                let (bin, json) = ActivationMatrix::paths(&self.run, source, &m.layer);
                outputs.extend([bin, json]);
            }
        }
        Ok(outputs)
    }

    fn stage_rank(&mut self) -> Result<Vec<PathBuf>> {
        let attack = self.attack_split()?;
        let keep: HashSet<usize> = attack.attack_train.indices().into_iter().collect();
        let layers = self.layer_ids(&self.config.grid_layers.clone())?;
        let mut outputs = Vec::new();
        for layer in &layers {
            let acts = ActivationMatrix::load(&self.run, Source::Shadow, layer)?;
            let rows: Vec<usize> = (0..acts.rows).filter(|&r| keep.contains(&acts.indices[r])).collect();
            let (mem, non) = acts.select_rows(&rows).split_membership();
            for &method in &self.config.methods {
                let seed = self.seed(&format!("rank/{}/{layer}", method.id()));
                let ranking = crate::selection::rank_neurons(&mem, &non, method, &self.config.selection, seed)?;
                outputs.push(ranking.save(&self.run)?);
            }
        }
        Ok(outputs)
    }

    fn stage_features(&mut self) -> Result<Vec<PathBuf>> {
        let features = self.layer_features()?;
        let rankings = self.rankings()?;
        let plan = self.plan()?;
        let mut outputs = Vec::new();
        let first = &features[0];
        let splits = |lf: &LayerFeatures| -> [(&'static str, FeatureBank); 3] {
            [
                ("shadow-train", lf.train.clone()),
                ("shadow-eval", lf.shadow_eval.clone()),
                ("target-eval", lf.target_eval.clone()),
            ]
        };
        let manifest = serde_json::json!({
            "classes": first.train.classes,
            "gradient_shape": first.train.gradient_shape,
            "rows": splits(first).iter().map(|(n, b)| (n.to_string(), b.rows)).collect::<BTreeMap<_, _>>(),
            "layers": features.iter().map(|lf| (lf.layer.clone(), lf.train.neurons)).collect::<BTreeMap<_, _>>(),
            "cells": plan.cells().iter().map(CellKey::name).collect::<Vec<_>>(),
        });
        let manifest_path = self.run.join("features").join("manifest.json");
        io::write_json(&manifest_path, &manifest)?;
        outputs.push(manifest_path);
        if self.config.save_features {
            for (name, bank) in splits(first) {
                outputs.push(bank.save_base(&self.run, name)?);
                outputs.push(FeatureBank::base_paths(&self.run, name).1);
            }
            for key in plan.cells() {
                let lf = features.iter().find(|f| f.layer == key.layer).expect("plan layers are registered");
                let mask = cell_mask(&key, &rankings, lf.train.neurons)?;
                for (name, bank) in splits(lf) {
                    let ds = bank.dataset(&mask)?;
                    outputs.push(ds.save(&self.run, name)?);
                    outputs.push(crate::features::AttackDataset::paths(&self.run, &ds.provenance, name).1);
                }
            }
        }
        Ok(outputs)
    }

    fn stage_grid(&mut self) -> Result<Vec<PathBuf>> {
        let features = self.layer_features()?;
        let rankings = self.rankings()?;
        let plan = self.plan()?;
        let cells_dir = self.cells_dir();
        if !self.options.resume && cells_dir.exists() {
            std::fs::remove_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
        }
        let grid = run_attack_grid(
            &features,
            &rankings,
            &plan,
            &self.config.attack_config(),
            &GridOptions {
                cells_dir: Some(cells_dir.clone()),
                halt_after: self.options.halt_after_cells,
            },
        )?;
        let csv = GridResult::csv_path(&self.run);
        grid.write_csv(&csv)?;
        let mut outputs = vec![csv];
        for c in &grid.cells {
            let (json, model) = cell_paths(&cells_dir, &c.key);
            outputs.extend([json, model]);
        }
        self.grid = Some(Arc::new(grid));
        Ok(outputs)
    }

    fn stage_ensemble(&mut self) -> Result<Vec<PathBuf>> {
        let grid = self.grid()?;
        let features = self.layer_features()?;
        let attack = self.attack_split()?;
        let nf = attack.ensemble_fit.records.len();
        let shadow_banks: Vec<&FeatureBank> = features.iter().map(|f| &f.shadow_eval).collect();
        let target_banks: Vec<&FeatureBank> = features.iter().map(|f| &f.target_eval).collect();
        let ne = shadow_banks[0].rows;
        let nt = target_banks[0].rows;
        let fit = collect_model_probabilities(&grid, &shadow_banks, &(0..nf).collect::<Vec<_>>())?;
        let holdout = collect_model_probabilities(&grid, &shadow_banks, &(nf..ne).collect::<Vec<_>>())?;
        let target = collect_model_probabilities(&grid, &target_banks, &(0..nt).collect::<Vec<_>>())?;
        let inputs = EnsembleInputs { fit, holdout, target };
        io::write_bincode(&self.inputs_path(), &inputs)?;

        let params = ShapleyParams {
            permutations: self.config.shapley_permutations,
            max_rows: self.config.shapley_max_rows,
        };
        let mut ranking = shap_rank_models(
            &inputs.fit,
            &self.config.shap_meta_config(),
            &params,
            self.seed("ensemble/shapley"),
        )?;
        let k = self.config.ensemble_k.min(inputs.fit.cols());
        ranking.k = k;
        let ranking_csv = ModelRanking::csv_path(&self.run);
        ranking.write_csv(&ranking_csv)?;
        io::write_json(&self.ranking_json_path(), &ranking)?;

        let model = build_stacked_ensemble(&inputs.fit, &ranking, k, self.seed("ensemble/stack"))?;
        let model_path = self.run.join("ensemble").join("ensemble.bin");
        model.save(&model_path)?;

        let mut scores = BTreeMap::new();
        for (name, m) in [("holdout", &inputs.holdout), ("target", &inputs.target)] {
            let p = model.predict_matrix(m)?;
            let (accuracy, f1) = score_predictions(&p, &m.labels);
            scores.insert(name.to_string(), report::Score { accuracy, f1 });
        }
        let singles = singles_rows(&inputs);
        let singles_path = report::singles_csv_path(&self.run);
        report::write_singles_csv(&singles, &singles_path)?;
        let summary = report::EnsembleSummary {
            k,
            members: model.keys.iter().map(CellKey::name).collect(),
            scores,
        };
        let metrics_path = report::ensemble_metrics_path(&self.run);
        io::write_json(&metrics_path, &summary)?;
        self.inputs = Some(Arc::new(inputs));
        Ok(vec![
            self.inputs_path(),
            ranking_csv,
            self.ranking_json_path(),
            model_path,
            singles_path,
            metrics_path,
        ])
    }

    fn stage_sweep(&mut self) -> Result<Vec<PathBuf>> {
        let inputs = self.ensemble_inputs()?;
        let ranking: ModelRanking = io::read_json(&self.ranking_json_path())?;
        let points = ensemble_sweep(
            &inputs.fit,
            &ranking,
            self.config.sweep_kmax,
            &[("holdout", &inputs.holdout), ("target", &inputs.target)],
            self.seed("ensemble/stack"),
        )?;
        let path = sweep_csv_path(&self.run);
        write_sweep_csv(&points, &path)?;
        Ok(vec![path])
    }

    /// The grid cell whose model drives the attributions.
    pub fn explain_cell(&mut self) -> Result<CellResult> {
        let grid = self.grid()?;
        let layers = self.layer_ids(&self.config.grid_layers.clone())?;
        let deepest = layers.last().expect("validated non-empty").clone();
        let cell = match &self.config.explain_mask {
            Some(spec) => {
                let key = parse_mask_name(spec, &deepest)?;
                grid.get(&key)
                    .ok_or_else(|| Error::InvalidConfiguration(format!("explain_mask {spec} is not a grid cell")))?
            }
            None => grid
                .selected()
                .filter(|c| c.key.layer == deepest)
                .fold(None, |best: Option<&CellResult>, c| match best {
                    Some(b) if b.shadow.accuracy >= c.shadow.accuracy => Some(b),
                    _ => Some(c),
                })
                .ok_or_else(|| Error::Dependency(format!("no grid cells on layer {deepest}")))?,
        };
        Ok(cell.clone())
    }

    fn stage_explain(&mut self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let split = self.split()?;
        let target = self.checkpoint(Source::Target)?;
        let registry = self.registry()?;
        let cell = self.explain_cell()?;
        let mask = SelectionMask {
            layer: cell.key.layer.clone(),
            method: cell.key.method,
            threshold: cell.key.threshold,
            indices: cell.mask.clone(),
        };
        let model = cell.model.as_ref().ok_or_else(|| Error::Dependency("grid model not loaded".into()))?;
        let cascaded = cascade(&target, &registry, &mask, model)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed("explain"));
        let n = self.config.explain_samples;
        let pick = |pool: &[usize], k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            pool.choose_multiple(rng, k.min(pool.len())).copied().collect()
        };
        let mut samples: Vec<(usize, u8)> = pick(&split.target_train, n.div_ceil(2), &mut rng)
            .into_iter()
            .map(|i| (i, 1))
            .collect();
        samples.extend(pick(&split.target_test, n / 2, &mut rng).into_iter().map(|i| (i, 0)));

        let [c, h, w] = target.input;
        let baseline = match self.config.explain_baseline {
            BaselineImage::Zeros => Tensor::new(vec![1, c, h, w], vec![0.0; c * h * w]),
            BaselineImage::Mean => {
                let mut mean = vec![0.0; c * h * w];
                for &i in &split.target_train {
                    for (m, &v) in mean.iter_mut().zip(ds.image(i)) {
                        *m += v as f64;
                    }
                }
                let count = split.target_train.len().max(1) as f64;
                mean.iter_mut().for_each(|m| *m /= count);
                Tensor::new(vec![1, c, h, w], mean)
            }
        };
        let attribution = AttributionConfig {
            steps: self.config.explain_steps,
            correct: true,
        };
        let dir = self.run.join("explain");
        let results: Vec<(SsimRow, PathBuf, f64)> = samples
            .par_iter()
            .map(|&(idx, membership)| {
                let x = ds.batch(&[idx]);
                let (t, a) = explain_pair(&target, &cascaded, &x, ds.label(idx), &baseline, &attribution)?;
                let ssim = attribution_ssim(&t, &a)?;
                let png = dir.join(format!("{idx}.png"));
                save_overlay(&render_overlay(&x, &[&t, &a], 8), &png)?;
                let gap = t.raw_gap.abs().max(a.raw_gap.abs());
                Ok((SsimRow { sample: idx, membership, ssim }, png, gap))
            })
            .collect::<Result<_>>()?;
        let rows: Vec<SsimRow> = results.iter().map(|r| r.0.clone()).collect();
        let ssim_csv = dir.join("ssim.csv");
        write_ssim_csv(&rows, &ssim_csv)?;
        let (nonmember_mean, member_mean) = mean_ssim(&rows);
        let summary = report::SsimSummary {
            cell: cell.key.name(),
            samples: rows.len(),
            member_mean,
            nonmember_mean,
            max_completeness_gap: results.iter().map(|r| r.2).fold(0.0, f64::max),
        };
        let summary_path = dir.join("summary.json");
        io::write_json(&summary_path, &summary)?;

        let acts = ActivationMatrix::load(&self.run, Source::Target, &mask.layer)?;
        let mut rows_pca: Vec<usize> = (0..acts.rows).collect();
        rows_pca.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed("explain/pca")));
        rows_pca.truncate(self.config.pca_samples.max(2));
        rows_pca.sort_unstable();
        let acts = acts.select_rows(&rows_pca);
        let full = SelectionMask::full(&mask.layer, acts.cols);
        let pca_path = report::pca_csv_path(&self.run);
        io::ensure_parent(&pca_path)?;
        let mut wr = csv::Writer::from_path(&pca_path)?;
        wr.write_record(["mask", "sample", "membership", "pc1", "pc2"])?;
        for m in [&full, &mask] {
            let proj = pca_project(&acts, Some(m))?;
            for (r, p) in proj.iter().enumerate() {
                wr.write_record([
                    m.name(),
                    acts.indices[r].to_string(),
                    acts.membership[r].to_string(),
                    io::fmt_f64(p[0]),
                    io::fmt_f64(p[1]),
                ])?;
            }
        }
        wr.flush().map_err(|e| Error::io(&pca_path, e))?;

        let mut outputs: Vec<PathBuf> = results.into_iter().map(|r| r.1).collect();
        outputs.extend([ssim_csv, summary_path, pca_path]);
        Ok(outputs)
    }

    fn stage_report(&mut self) -> Result<Vec<PathBuf>> {
        let mut outputs = report::emit_figures(&self.run)?;
        outputs.push(report::write_report(&self.run, &self.config, None)?);
        Ok(outputs)
    }
}

/// Parses `rf-40` or `all-100` into a cell key on `layer`.
pub fn parse_mask_name(spec: &str, layer: &str) -> Result<CellKey> {
    let bad = || Error::InvalidConfiguration(format!("mask '{spec}' is not <method>-<percent>"));
    let (m, t) = spec.rsplit_once('-').ok_or_else(bad)?;
    let threshold: Threshold = t.parse().map_err(|_| bad())?;
    if m == "all" {
        return Ok(CellKey::baseline(layer));
    }
    Ok(CellKey {
        method: Some(m.parse().map_err(|_| bad())?),
        threshold,
        layer: layer.to_string(),
    })
}

fn singles_rows(inputs: &EnsembleInputs) -> Vec<report::SingleRow> {
    let mut rows = Vec::new();
    for (j, key) in inputs.fit.columns.iter().enumerate() {
        for (split, m) in [("holdout", &inputs.holdout), ("target", &inputs.target)] {
            let (accuracy, f1) = score_predictions(&m.column(j), &m.labels);
            rows.push(report::SingleRow {
                cell: key.clone(),
                split: split.to_string(),
                accuracy,
                f1,
            });
        }
    }
    rows
}
