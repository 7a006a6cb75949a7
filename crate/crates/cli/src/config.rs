//! Experiment configuration: one JSON document, unknown keys rejected.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use lotto_core::criteria::{Criterion, DEFAULT_SCORING_BATCH, DEFAULT_SCORING_SEED};
use lotto_core::data::{CorruptionKind, CIFAR_CLASSES, CIFAR_SIDE};
use lotto_core::metrics::CarbonParams;
use lotto_core::model::{build_resnet_for_input, NetworkSpec};
use lotto_core::training::{
    quarter_checkpoints, step_schedule, LrPhase, Rewind, TrainConfig, DEFAULT_BATCH, DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Published JSON Schema for [`ExperimentConfig`].
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub prune: PruneConfig,
    pub report: ReportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub classes: usize,
    #[serde(default = "cifar_side")]
    pub input_size: usize,
}

fn cifar_side() -> usize {
    CIFAR_SIDE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// CIFAR-10 binary batches; relative paths resolve against the config file.
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Synthetic {
        seed: u64,
        n_train: usize,
        n_test: usize,
        separability: f64,
    },
}

/// Training hyperparameters; omitted fields take the toolkit defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_n: usize,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Overrides the step schedule derived from `lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<LrPhase>>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_epochs: Option<BTreeSet<usize>>,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}
fn default_eval_batch() -> usize {
    500
}
fn yes() -> bool {
    true
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_n: self.epochs_n,
            batch_size: self.batch_size,
            lr_schedule: self.lr_schedule.clone().unwrap_or_else(|| step_schedule(self.epochs_n, self.lr)),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            checkpoint_epochs: self.checkpoint_epochs.clone().unwrap_or_else(|| quarter_checkpoints(self.epochs_n)),
            augment: self.augment,
            eval_batch_size: self.eval_batch_size,
        }
    }
}

/// One density or a list of densities, each producing a report row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Densities {
    One(usize),
    Many(Vec<usize>),
}

impl Densities {
    pub fn values(&self) -> Vec<usize> {
        match self {
            Densities::One(p) => vec![*p],
            Densities::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub p: Densities,
    #[serde(default)]
    pub xi: f64,
    /// A checkpoint epoch, `"init"` (pruning at initialization) or `"reinit"`.
    pub rewind: Rewind,
    /// `lth` only: add a row per checkpoint epoch and one for re-initialization.
    #[serde(default)]
    pub rewind_sweep: bool,
    /// `init-lth` only: add a filter-pruning row matched to each layer row.
    #[serde(default)]
    pub filter_baseline: bool,
    #[serde(default = "default_scoring_seed")]
    pub scoring_seed: u64,
    #[serde(default = "default_scoring_batch")]
    pub scoring_batch: usize,
}

fn default_scoring_seed() -> u64 {
    DEFAULT_SCORING_SEED
}
fn default_scoring_batch() -> usize {
    DEFAULT_SCORING_BATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub carbon: CarbonParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketSource {
    Lth,
    InitLth,
}

impl TicketSource {
    pub fn command(self) -> &'static str {
        match self {
            TicketSource::Lth => "lth",
            TicketSource::InitLth => "init-lth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionEntry {
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Which command's sub-network to compare against the dense network.
    #[serde(default = "default_ticket")]
    pub ticket: TicketSource,
    #[serde(default = "default_corruptions")]
    pub corruptions: Vec<CorruptionEntry>,
    #[serde(default)]
    pub corruption_seed: u64,
    /// Extra evaluation sets in CIFAR-10 binary format.
    #[serde(default)]
    pub eval_sets: Vec<PathBuf>,
}

fn default_ticket() -> TicketSource {
    TicketSource::InitLth
}

/// Every kind at severities 1, 3 and 5.
pub fn default_corruptions() -> Vec<CorruptionEntry> {
    CorruptionKind::ALL
        .into_iter()
        .flat_map(|kind| [1, 3, 5].map(|severity| CorruptionEntry { kind, severity }))
        .collect()
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            ticket: default_ticket(),
            corruptions: default_corruptions(),
            corruption_seed: 0,
            eval_sets: Vec::new(),
        }
    }
}

/// Hex SHA-256 of the canonical JSON of `value` (object keys sorted).
pub fn digest<S: Serialize>(value: &S) -> CliResult<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

impl ExperimentConfig {
    /// Parse and validate; relative data paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> CliResult<Self> {
        let mut config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))?;
        config.validate()?;
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Cifar10 { train, test, .. } = &mut self.data {
            train.iter_mut().chain(test.iter_mut()).for_each(fix);
        }
        if let Some(r) = &mut self.robustness {
            r.eval_sets.iter_mut().for_each(fix);
        }
        fix(&mut self.report.out_dir);
    }

    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        self.network().map_err(|e| e.context("model"))?;
        if m.classes < 2 {
            return Err(CliError::validation("model.classes must be at least 2"));
        }
        match &self.data {
            DataConfig::Cifar10 { train, test, .. } => {
                if m.classes != CIFAR_CLASSES || m.input_size != CIFAR_SIDE {
                    return Err(CliError::validation(format!(
                        "CIFAR-10 data needs model.classes = {CIFAR_CLASSES} and model.input_size = {CIFAR_SIDE}"
                    )));
                }
                if train.is_empty() || test.is_empty() {
                    return Err(CliError::validation("data.train and data.test must list at least one file"));
                }
            }
            DataConfig::Synthetic {
                n_train,
                n_test,
                separability,
                ..
            } => {
                if *n_train < m.classes || *n_test < m.classes {
                    return Err(CliError::validation("synthetic n_train and n_test must be at least model.classes"));
                }
                if !(separability.is_finite() && *separability >= 0.0) {
                    return Err(CliError::validation("synthetic separability must be finite and >= 0"));
                }
            }
        }
        self.train_config().validate().map_err(|e| CliError::from(e).context("train"))?;
        let p = &self.prune;
        if !(p.xi.is_finite() && p.xi >= 0.0) {
            return Err(CliError::validation(format!("prune.xi must be >= 0, got {}", p.xi)));
        }
        if p.p.values().is_empty() {
            return Err(CliError::validation("prune.p must name at least one density"));
        }
        if p.scoring_batch == 0 {
            return Err(CliError::validation("prune.scoring_batch must be positive"));
        }
        if let Rewind::Epoch(e) = p.rewind {
            if !self.train_config().checkpoint_epochs.contains(&e) {
                return Err(CliError::validation(format!("prune.rewind epoch {e} is not in train.checkpoint_epochs")));
            }
        }
        let c = &self.report.carbon;
        if !(c.device_watts >= 0.0 && c.grid_g_per_kwh >= 0.0) {
            return Err(CliError::validation("report.carbon values must be >= 0"));
        }
        if let Some(r) = &self.robustness {
            if let Some(bad) = r.corruptions.iter().find(|c| !(1..=5).contains(&c.severity)) {
                return Err(CliError::validation(format!("corruption severity {} outside 1..=5", bad.severity)));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> CliResult<NetworkSpec> {
        let m = &self.model;
        Ok(build_resnet_for_input(m.depth, m.classes, m.width, m.input_size)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config()
    }

    pub fn digest(&self) -> CliResult<String> {
        digest(self)
    }

    /// Digest of the sections that determine the dense run.
    pub fn dense_digest(&self) -> CliResult<String> {
        digest(&(&self.model, &self.data, &self.train))
    }
}
