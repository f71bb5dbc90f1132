//! Run configuration: a TOML document with per-section defaults.
//!
//! Only `[dataset]` and a scheme (either `[scheme]` or one or more
//! `[[arms]]`) are required. Every other section falls back to the default
//! desk-scale benchmark.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::credit::{CreditSettings, ProjectionRole, RuleKind};
use crate::error::{Error, Result};
use crate::harness::{self, BlobsParams, TaskStream, TrainConfig};
use crate::knowledge::{KlSupport, LossWeights, MatchingScheme};
use crate::network::{Activation, MlpSpec};
use crate::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        #[serde(default = "d_num_classes")]
        num_classes: usize,
        #[serde(default = "d_feature_dim")]
        feature_dim: usize,
        #[serde(default = "d_train_per_class")]
        train_per_class: usize,
        #[serde(default = "d_test_per_class")]
        test_per_class: usize,
        #[serde(default = "d_spread")]
        spread: f64,
        /// Fixed data seed; when absent each run uses its own seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "d_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn d_num_classes() -> usize {
    10
}
fn d_feature_dim() -> usize {
    16
}
fn d_train_per_class() -> usize {
    200
}
fn d_test_per_class() -> usize {
    50
}
fn d_spread() -> f64 {
    0.6
}
fn d_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default = "d_classes_per_task")]
    pub classes_per_task: usize,
    #[serde(default = "d_order_seeds")]
    pub class_order_seeds: Vec<u64>,
}

fn d_classes_per_task() -> usize {
    2
}
fn d_order_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            classes_per_task: d_classes_per_task(),
            class_order_seeds: d_order_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: d_hidden(),
            activation: Activation::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub role: ProjectionRole,
}

impl From<CreditConfig> for CreditSettings {
    fn from(c: CreditConfig) -> Self {
        CreditSettings {
            enabled: c.enabled,
            role: c.role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "d_epochs")]
    pub epochs_first: usize,
    #[serde(default = "d_epochs")]
    pub epochs_rest: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub normalize_kl: bool,
    #[serde(default = "d_kl_support")]
    pub kl_support: KlSupport,
    /// Keep every n-th iteration in the diagnostics log; 0 disables it.
    #[serde(default)]
    pub log_every: usize,
}

fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    32
}
fn d_lambda() -> f64 {
    1.0
}
fn d_temperature() -> f64 {
    2.0
}
fn d_kl_support() -> KlSupport {
    KlSupport::Seen
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs_first: d_epochs(),
            epochs_rest: d_epochs(),
            batch_size: d_batch(),
            lambda: d_lambda(),
            temperature: d_temperature(),
            normalize_kl: false,
            kl_support: d_kl_support(),
            log_every: 0,
        }
    }
}

/// One experimental arm; unset fields inherit the top-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub scheme: MatchingScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credit: Option<CreditConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<RuleKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<MatchingScheme>,
    #[serde(default = "d_optimizer")]
    pub optimizer: RuleKind,
    #[serde(default)]
    pub credit: CreditConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<ArmConfig>,
}

fn d_optimizer() -> RuleKind {
    RuleKind::sgd(0.05)
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// An arm with every inherited setting resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedArm {
    pub name: String,
    pub scheme: MatchingScheme,
    pub credit: CreditSettings,
    pub optimizer: RuleKind,
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de =
        toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { "<root>".into() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    /// The default benchmark with the given scheme.
    pub fn default_benchmark(scheme: MatchingScheme) -> Self {
        RunConfig {
            dataset: DatasetConfig::Blobs {
                num_classes: d_num_classes(),
                feature_dim: d_feature_dim(),
                train_per_class: d_train_per_class(),
                test_per_class: d_test_per_class(),
                spread: d_spread(),
                data_seed: None,
            },
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            scheme: Some(scheme),
            optimizer: d_optimizer(),
            credit: CreditConfig::default(),
            training: TrainingConfig::default(),
            seeds: d_seeds(),
            output_dir: d_output_dir(),
            arms: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Blobs {
                num_classes,
                feature_dim,
                train_per_class,
                test_per_class,
                spread,
                ..
            } => {
                positive("dataset.num_classes", *num_classes)?;
                positive("dataset.feature_dim", *feature_dim)?;
                positive("dataset.train_per_class", *train_per_class)?;
                positive("dataset.test_per_class", *test_per_class)?;
                if !(*spread > 0.0 && spread.is_finite()) {
                    return Err(Error::config(
                        "dataset.spread",
                        format!("{spread} must be positive"),
                    ));
                }
                if num_classes % self.stream.classes_per_task.max(1) != 0 {
                    return Err(Error::config(
                        "stream.classes_per_task",
                        format!(
                            "{num_classes} classes are not divisible by {}",
                            self.stream.classes_per_task
                        ),
                    ));
                }
            }
            DatasetConfig::Csv { train_fraction, .. } => {
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(Error::config(
                        "dataset.train_fraction",
                        format!("{train_fraction} is outside (0, 1)"),
                    ));
                }
            }
        }
        positive("stream.classes_per_task", self.stream.classes_per_task)?;
        if self.stream.class_order_seeds.is_empty() {
            return Err(Error::config(
                "stream.class_order_seeds",
                "must not be empty",
            ));
        }
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::config(
                "model.hidden_dims",
                "layer widths must be positive",
            ));
        }
        positive("training.batch_size", self.training.batch_size)?;
        if !(self.training.lambda >= 0.0 && self.training.lambda.is_finite()) {
            return Err(Error::config("training.lambda", "must be non-negative"));
        }
        if !(self.training.temperature > 0.0 && self.training.temperature.is_finite()) {
            return Err(Error::config("training.temperature", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        self.optimizer.validate()?;
        match (&self.scheme, self.arms.is_empty()) {
            (None, true) => {
                return Err(Error::config(
                    "scheme",
                    "missing required key (or give [[arms]])",
                ))
            }
            (Some(s), _) => s.validate()?,
            _ => {}
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            if arm.name.is_empty()
                || !arm
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_+".contains(c))
            {
                return Err(Error::config(
                    format!("arms[{i}].name"),
                    "use letters, digits, `-`, `_` or `+`",
                ));
            }
            if !names.insert(arm.name.as_str()) {
                return Err(Error::config(
                    format!("arms[{i}].name"),
                    format!("duplicate arm `{}`", arm.name),
                ));
            }
            arm.scheme
                .validate()
                .map_err(|e| Error::config(format!("arms[{i}].scheme"), e.to_string()))?;
            if let Some(opt) = &arm.optimizer {
                opt.validate()
                    .map_err(|e| Error::config(format!("arms[{i}].optimizer"), e.to_string()))?;
            }
        }
        Ok(())
    }

    /// The experimental arms; a lone top-level scheme forms a single arm.
    pub fn resolved_arms(&self) -> Vec<ResolvedArm> {
        if self.arms.is_empty() {
            let scheme = self.scheme.expect("validated");
            let mut name = scheme.name();
            if self.credit.enabled {
                name.push_str("+credit");
            }
            return vec![ResolvedArm {
                name: sanitize(&name),
                scheme,
                credit: self.credit.into(),
                optimizer: self.optimizer,
            }];
        }
        self.arms
            .iter()
            .map(|a| ResolvedArm {
                name: a.name.clone(),
                scheme: a.scheme,
                credit: a.credit.unwrap_or(self.credit).into(),
                optimizer: a.optimizer.unwrap_or(self.optimizer),
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of SHA-256 over the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.training.lambda,
            temperature: self.training.temperature,
            normalize_kl: self.training.normalize_kl,
            kl_support: self.training.kl_support,
        }
    }

    pub fn build_stream(&self, seed: u64, class_order_seed: u64) -> Result<TaskStream> {
        match &self.dataset {
            DatasetConfig::Blobs {
                num_classes,
                feature_dim,
                train_per_class,
                test_per_class,
                spread,
                data_seed,
            } => harness::make_blobs_stream(&BlobsParams {
                num_classes: *num_classes,
                classes_per_task: self.stream.classes_per_task,
                feature_dim: *feature_dim,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                spread: *spread,
                class_order_seed,
                data_seed: data_seed.unwrap_or(seed),
            }),
            DatasetConfig::Csv {
                path,
                train_fraction,
                split_seed,
            } => harness::load_csv_stream(
                path,
                self.stream.classes_per_task,
                class_order_seed,
                *train_fraction,
                *split_seed,
            ),
        }
    }

    pub fn model_spec(&self, stream: &TaskStream) -> MlpSpec {
        MlpSpec::new(
            stream.feature_dim,
            self.model.hidden_dims.clone(),
            stream.num_classes,
        )
        .with_activation(self.model.activation)
    }

    /// Total number of tasks, known without generating data for blobs.
    pub fn num_tasks(&self) -> Result<usize> {
        match &self.dataset {
            DatasetConfig::Blobs { num_classes, .. } => {
                Ok(num_classes / self.stream.classes_per_task)
            }
            DatasetConfig::Csv { .. } => Ok(self
                .build_stream(0, self.stream.class_order_seeds[0])?
                .num_tasks()),
        }
    }

    pub fn train_config(&self, arm: &ResolvedArm, seed: u64, exec: Execution) -> TrainConfig {
        TrainConfig {
            scheme: arm.scheme,
            rule: arm.optimizer,
            credit: arm.credit,
            epochs_first: self.training.epochs_first,
            epochs_rest: self.training.epochs_rest,
            batch_size: self.training.batch_size,
            weights: self.loss_weights(),
            seed,
            log_every: self.training.log_every,
            exec,
        }
    }
}

fn positive(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(path, "must be positive"));
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_+".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}
