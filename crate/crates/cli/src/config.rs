//! Experiment configuration: a JSON file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use gradlibra::data::{generate, load_csv, DatasetManifest, DatasetSpec, SyntheticDataset};
use gradlibra::experiment::BENCHMARK_BIAS_PRIOR;
use gradlibra::loss::{LossConfig, LossKind};
use gradlibra::model::{Arch, ModelSpec};
use gradlibra::telemetry::TelemetryMode;
use gradlibra::train::OptimSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated per run; the run seed replaces `spec.seed`.
    Spec(DatasetSpec),
    /// A directory written by `generate`, shared by every seed.
    Dir(PathBuf),
}

/// The head; input and output sizes come from the data and the init seed
/// from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub bias_prior: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha_pos: Vec<f64>,
    pub alpha_neg: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            alpha_pos: vec![0.2, 0.4, 0.6, 0.8],
            alpha_neg: vec![0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub optim: OptimSpec,
    /// Loss for `train`, and the base for `sweep`.
    pub loss: LossConfig,
    /// Losses for `compare`.
    pub compare: Vec<LossConfig>,
    pub sweep: SweepGrid,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub telemetry_mode: TelemetryMode,
    /// Iterations between ledger records in telemetry files.
    pub telemetry_stride: u64,
}

impl Default for ExperimentConfig {
    /// The desk-scale benchmark: five paired seeds, cross-entropy against
    /// Grad-Libra with both factors at 0.8.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Spec(DatasetSpec::benchmark(0)),
            model: ModelConfig {
                arch: Arch::Linear,
                hidden_dim: 0,
                bias_prior: Some(BENCHMARK_BIAS_PRIOR),
            },
            optim: OptimSpec::default(),
            loss: LossConfig::grad_libra(0.8, 0.8),
            compare: vec![
                LossConfig::cross_entropy(),
                LossConfig::grad_libra(0.8, 0.8),
            ],
            sweep: SweepGrid::default(),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            telemetry_mode: TelemetryMode::Both,
            telemetry_stride: 10,
        }
    }
}

/// Values given on the command line; each one that is set wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub losses: Vec<LossKind>,
    pub alpha_pos: Option<f64>,
    pub alpha_neg: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub telemetry_mode: Option<TelemetryMode>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if !o.losses.is_empty() {
            let resolved: Vec<LossConfig> = o.losses.iter().map(|&k| self.loss_for(k)).collect();
            self.loss = resolved[0].clone();
            self.compare = resolved;
        }
        let set_alphas = |cfg: &mut LossConfig| {
            if cfg.kind != LossKind::GradLibra {
                return;
            }
            if let Some(a) = o.alpha_pos {
                cfg.alpha_pos = a;
            }
            if let Some(a) = o.alpha_neg {
                cfg.alpha_neg = a;
            }
            if cfg
                .alpha_unified
                .is_some_and(|a| a != cfg.alpha_pos || a != cfg.alpha_neg)
            {
                cfg.alpha_unified = None;
            }
        };
        set_alphas(&mut self.loss);
        self.compare.iter_mut().for_each(set_alphas);
        if let Some(a) = o.alpha_pos {
            self.sweep.alpha_pos = vec![a];
        }
        if let Some(a) = o.alpha_neg {
            self.sweep.alpha_neg = vec![a];
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(mode) = o.telemetry_mode {
            self.telemetry_mode = mode;
        }
    }

    /// The configured loss of this kind, or that kind's defaults.
    fn loss_for(&self, kind: LossKind) -> LossConfig {
        std::iter::once(&self.loss)
            .chain(&self.compare)
            .find(|c| c.kind == kind)
            .cloned()
            .unwrap_or_else(|| LossConfig::default().with_kind(kind))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        match &self.dataset {
            DatasetSource::Spec(spec) => spec.validate()?,
            DatasetSource::Dir(dir) => {
                let manifest = dir.join(DATASET_MANIFEST);
                if !manifest.is_file() {
                    return Err(CliError::Data(format!(
                        "dataset directory {} has no {DATASET_MANIFEST}",
                        dir.display()
                    )));
                }
            }
        }
        if self.model.arch == Arch::Mlp1 && self.model.hidden_dim == 0 {
            return Err(CliError::Config("mlp1 needs hidden_dim >= 1".into()));
        }
        self.optim.validate()?;
        self.loss.validate()?;
        if self.compare.is_empty() {
            return Err(CliError::Config("compare needs at least one loss".into()));
        }
        for c in &self.compare {
            c.validate()?;
        }
        let grid = &self.sweep;
        if grid.alpha_pos.is_empty() || grid.alpha_neg.is_empty() {
            return Err(CliError::Config("sweep grid must not be empty".into()));
        }
        for &a in grid.alpha_pos.iter().chain(&grid.alpha_neg) {
            LossConfig::grad_libra(a, a).validate()?;
        }
        if self.telemetry_stride == 0 {
            return Err(CliError::Config("telemetry_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// The data source as used for `seed`.
    pub fn dataset_for_seed(&self, seed: u64) -> DatasetSource {
        match &self.dataset {
            DatasetSource::Spec(spec) => DatasetSource::Spec(DatasetSpec {
                seed,
                ..spec.clone()
            }),
            dir => dir.clone(),
        }
    }

    pub fn model_spec(&self, data: &SyntheticDataset, seed: u64) -> ModelSpec {
        ModelSpec {
            arch: self.model.arch,
            hidden_dim: self.model.hidden_dim,
            feature_dim: data.train.feature_dim(),
            num_classes: data.train.num_classes(),
            init_seed: seed,
            bias_prior: self.model.bias_prior,
        }
    }
}

/// Generates or loads the data a source describes.
pub fn materialize(source: &DatasetSource) -> Result<SyntheticDataset> {
    match source {
        DatasetSource::Spec(spec) => Ok(generate(spec)?),
        DatasetSource::Dir(dir) => {
            let path = dir.join(DATASET_MANIFEST);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let manifest: DatasetManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let c = manifest.groups.num_classes();
            let train = load_csv(&dir.join(TRAIN_CSV), Some(c))?;
            let test = load_csv(&dir.join(TEST_CSV), Some(c))?;
            Ok(SyntheticDataset {
                train,
                test,
                groups: manifest.groups,
            })
        }
    }
}
