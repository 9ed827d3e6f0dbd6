//! Experiment configuration in TOML.
//!
//! Training settings live at the top level; `dataset`, `model`, `eval` and
//! `figures` are sections. Every unknown key is rejected. Budgets may be
//! written as fractions such as `"8/255"`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::datasets::{DatasetName, DatasetSpec, CIFAR_RECORD};
use crate::error::{Error, Result};
use crate::eval::{EvalAttack, CO_PERSISTENCE, CO_RHO};
use crate::models::ArchSpec;
use crate::trainer::{Method, TrainConfig};

/// Network family and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Cnn4 {
        #[serde(default = "default_widths")]
        widths: [usize; 4],
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    Linear,
}

fn default_widths() -> [usize; 4] {
    [16, 32, 64, 128]
}

fn default_hidden() -> usize {
    64
}

impl ModelSpec {
    /// `cnn4` for images and `mlp` for feature vectors.
    pub fn default_for(shape: &[usize]) -> Self {
        if shape.len() == 3 {
            ModelSpec::Cnn4 { widths: default_widths() }
        } else {
            ModelSpec::Mlp { hidden: default_hidden() }
        }
    }

    pub fn arch(&self, sample_shape: &[usize], num_classes: usize) -> Result<ArchSpec> {
        let features: usize = sample_shape.iter().product();
        match self {
            ModelSpec::Cnn4 { widths } => match sample_shape {
                &[c, h, w] => Ok(ArchSpec::cnn4([c, h, w], *widths, num_classes)),
                _ => Err(Error::config("model.kind", "cnn4 needs image data")),
            },
            ModelSpec::Mlp { hidden } => Ok(ArchSpec::mlp(features, *hidden, num_classes)),
            ModelSpec::Linear => Ok(ArchSpec::linear(features, num_classes)),
        }
    }
}

/// Periodic and final evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    /// Attacks run on the evaluation split after every `every` epochs.
    #[serde(default = "default_epoch_attacks")]
    pub attacks: Vec<String>,
    #[serde(default = "default_every")]
    pub every: usize,
    /// Attacks of the final report.
    #[serde(default = "default_final_attacks")]
    pub final_attacks: Vec<String>,
    /// Attack swept over `eps_sweep`.
    #[serde(default = "default_sweep_attack")]
    pub sweep_attack: String,
    #[serde(default = "default_sweep")]
    pub eps_sweep: Vec<f64>,
    /// Base seed of evaluation random starts.
    #[serde(default)]
    pub seed: u64,
    /// Drop ratio and persistence of overfitting detection.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_persistence")]
    pub persistence: usize,
    /// Samples of the loss-landscape probe; 0 disables it.
    #[serde(default = "default_landscape_samples")]
    pub landscape_samples: usize,
    #[serde(default = "default_landscape_resolution")]
    pub landscape_resolution: usize,
    #[serde(default = "default_landscape_eta")]
    pub landscape_eta: f64,
}

fn default_epoch_attacks() -> Vec<String> {
    vec!["pgd10".into()]
}
fn default_every() -> usize {
    1
}
fn default_final_attacks() -> Vec<String> {
    vec!["fgsm".into(), "pgd10".into(), "pgd50".into()]
}
fn default_sweep_attack() -> String {
    "pgd50".into()
}
fn default_sweep() -> Vec<f64> {
    [0.0, 2.0, 4.0, 8.0, 12.0, 16.0].iter().map(|e| e / 255.0).collect()
}
fn default_rho() -> f64 {
    CO_RHO
}
fn default_persistence() -> usize {
    CO_PERSISTENCE
}
fn default_landscape_samples() -> usize {
    32
}
fn default_landscape_resolution() -> usize {
    21
}
fn default_landscape_eta() -> f64 {
    8.0 / 255.0
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            attacks: default_epoch_attacks(),
            every: default_every(),
            final_attacks: default_final_attacks(),
            sweep_attack: default_sweep_attack(),
            eps_sweep: default_sweep(),
            seed: 0,
            rho: default_rho(),
            persistence: default_persistence(),
            landscape_samples: default_landscape_samples(),
            landscape_resolution: default_landscape_resolution(),
            landscape_eta: default_landscape_eta(),
        }
    }
}

impl EvalPlan {
    pub fn epoch_attacks(&self, epsilon: f64) -> Result<Vec<EvalAttack>> {
        self.attacks.iter().map(|a| EvalAttack::parse(a, epsilon)).collect()
    }

    pub fn final_attacks(&self, epsilon: f64) -> Result<Vec<EvalAttack>> {
        self.final_attacks.iter().map(|a| EvalAttack::parse(a, epsilon)).collect()
    }

    pub fn sweep_attack(&self, epsilon: f64) -> Result<EvalAttack> {
        EvalAttack::parse(&self.sweep_attack, epsilon)
    }

    fn validate(&self) -> Result<()> {
        for (field, list) in [("eval.attacks", &self.attacks), ("eval.final_attacks", &self.final_attacks)] {
            for a in list {
                EvalAttack::parse(a, 0.0).map_err(|_| Error::config(field, format!("unknown attack {a:?}")))?;
            }
        }
        EvalAttack::parse(&self.sweep_attack, 0.0)
            .map_err(|_| Error::config("eval.sweep_attack", format!("unknown attack {:?}", self.sweep_attack)))?;
        if self.every == 0 {
            return Err(Error::config("eval.every", "must be positive"));
        }
        if self.eps_sweep.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::config("eval.eps_sweep", "budgets must be finite and non-negative"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("eval.rho", "must lie in (0, 1)"));
        }
        if self.persistence == 0 {
            return Err(Error::config("eval.persistence", "must be positive"));
        }
        if self.landscape_samples > 0 && (self.landscape_resolution < 3 || self.landscape_resolution.is_multiple_of(2)) {
            return Err(Error::config("eval.landscape_resolution", "must be odd and at least 3"));
        }
        if !(self.landscape_eta > 0.0) {
            return Err(Error::config("eval.landscape_eta", "must be positive"));
        }
        Ok(())
    }
}

/// Which figures a run emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureToggles {
    #[serde(default = "yes")]
    pub overfitting: bool,
    #[serde(default = "yes")]
    pub sweep: bool,
    #[serde(default = "yes")]
    pub landscape: bool,
}

fn yes() -> bool {
    true
}

impl Default for FigureToggles {
    fn default() -> Self {
        FigureToggles {
            overfitting: true,
            sweep: true,
            landscape: true,
        }
    }
}

/// A complete experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Chosen from the data shape when absent.
    pub model: Option<ModelSpec>,
    pub eval: EvalPlan,
    pub figures: FigureToggles,
    pub output_dir: PathBuf,
    /// Save a checkpoint after every `checkpoint_every` epochs (and the last).
    pub checkpoint_every: usize,
}

const SECTION_KEYS: [&str; 6] = ["dataset", "model", "eval", "figures", "output_dir", "checkpoint_every"];
const FRACTION_KEYS: [&str; 3] = ["epsilon", "alpha", "landscape_eta"];

impl ExperimentConfig {
    pub fn new(method: Method, dataset: DatasetSpec) -> Self {
        ExperimentConfig {
            train: TrainConfig::new(method),
            dataset,
            model: None,
            eval: EvalPlan::default(),
            figures: FigureToggles::default(),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 1,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(error_key(&e).unwrap_or_else(|| "<document>".into()), e.message()))?;
        Self::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<Self> {
        resolve_fractions(&mut table, "")?;
        let mut take = |key: &str| table.remove(key);
        let dataset = match take("dataset") {
            None => return Err(Error::config("dataset", "missing")),
            Some(Value::String(name)) => {
                let name: DatasetName = typed(Value::String(name), "dataset")?;
                DatasetSpec::new(name)
            }
            Some(v) => typed(v, "dataset")?,
        };
        let model = take("model").map(|v| typed(v, "model")).transpose()?;
        let eval = take("eval").map(|v| typed(v, "eval")).transpose()?.unwrap_or_default();
        let figures = take("figures").map(|v| typed(v, "figures")).transpose()?.unwrap_or_default();
        let output_dir = take("output_dir")
            .map(|v| typed(v, "output_dir"))
            .transpose()?
            .unwrap_or_else(|| PathBuf::from("runs"));
        let checkpoint_every = take("checkpoint_every").map(|v| typed(v, "checkpoint_every")).transpose()?.unwrap_or(1);
        let train: TrainConfig = typed(Value::Table(table), "")?;
        let config = ExperimentConfig {
            train,
            dataset,
            model,
            eval,
            figures,
            output_dir,
            checkpoint_every,
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical TOML that loads back to an identical config.
    pub fn to_toml_string(&self) -> Result<String> {
        let mut table = match Value::try_from(&self.train).map_err(ser_err)? {
            Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        table.insert("output_dir".into(), Value::try_from(&self.output_dir).map_err(ser_err)?);
        table.insert("checkpoint_every".into(), Value::Integer(self.checkpoint_every as i64));
        table.insert("dataset".into(), Value::try_from(&self.dataset).map_err(ser_err)?);
        if let Some(m) = &self.model {
            table.insert("model".into(), Value::try_from(m).map_err(ser_err)?);
        }
        table.insert("eval".into(), Value::try_from(&self.eval).map_err(ser_err)?);
        table.insert("figures".into(), Value::try_from(self.figures).map_err(ser_err)?);
        toml::to_string(&table).map_err(ser_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        self.eval.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if !self.dataset.name.is_synthetic() {
            let dir = self.dataset.resolved_dir();
            if !dir.is_dir() {
                return Err(Error::config(
                    "dataset.data_dir",
                    format!("{} does not exist", dir.display()),
                ));
            }
            if let (Some(want), Some(have)) = (self.dataset.subset_size, archive_size(self.dataset.name, &dir)) {
                if want > have {
                    return Err(Error::config(
                        "dataset.subset_size",
                        format!("{want} exceeds the {have} training samples"),
                    ));
                }
            }
        } else if let Some(want) = self.dataset.subset_size {
            if want > self.dataset.train_samples {
                return Err(Error::config(
                    "dataset.subset_size",
                    format!("{want} exceeds the {} generated samples", self.dataset.train_samples),
                ));
            }
        }
        if let (Some(ModelSpec::Cnn4 { .. }), true) = (&self.model, self.dataset.name.is_synthetic()) {
            return Err(Error::config("model.kind", "cnn4 needs image data"));
        }
        Ok(())
    }

    /// The model family actually used.
    pub fn model_for(&self, sample_shape: &[usize]) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| ModelSpec::default_for(sample_shape))
    }
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::config("<file>", format!("{} not found", path.display())),
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    ExperimentConfig::from_toml_str(&text)
}

/// Training-set size of an archive, read from file sizes.
fn archive_size(name: DatasetName, dir: &Path) -> Option<usize> {
    let len = |f: &str| std::fs::metadata(dir.join(f)).ok().map(|m| m.len() as usize);
    match name {
        DatasetName::Cifar10 => (1..=5)
            .map(|i| len(&format!("data_batch_{i}.bin")).map(|b| b / CIFAR_RECORD))
            .sum(),
        DatasetName::Idx => len("train-labels-idx1-ubyte").map(|b| b.saturating_sub(8)),
        _ => None,
    }
}

fn typed<D: DeserializeOwned>(value: Value, prefix: &str) -> Result<D> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = match (prefix.is_empty(), path.as_str()) {
            (true, ".") => "<document>".to_string(),
            (true, _) => path,
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{path}"),
        };
        Error::config(field, e.into_inner().to_string())
    })
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() || prefix == "<document>" {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn error_key(e: &toml::de::Error) -> Option<String> {
    e.span().map(|s| format!("<span {}..{}>", s.start, s.end))
}

fn ser_err(e: impl std::fmt::Display) -> Error {
    Error::config("<serialize>", e.to_string())
}

/// Parse `"a/b"` or a plain number.
pub fn parse_fraction(text: &str) -> Option<f64> {
    let text = text.trim();
    match text.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (b != 0.0).then(|| a / b)
        }
        None => text.parse().ok(),
    }
}

/// Replace fraction strings by numbers for budget-like keys and sweep lists.
fn resolve_fractions(table: &mut Table, prefix: &str) -> Result<()> {
    for (key, value) in table.iter_mut() {
        let path = join(prefix, key);
        match value {
            Value::String(s) if FRACTION_KEYS.contains(&key.as_str()) => {
                *value = Value::Float(parse_fraction(s).ok_or_else(|| Error::config(&path, format!("cannot read {s:?} as a number")))?);
            }
            Value::Integer(i) if FRACTION_KEYS.contains(&key.as_str()) => *value = Value::Float(*i as f64),
            Value::Array(items) if key == "eps_sweep" => {
                for item in items.iter_mut() {
                    let v = match item {
                        Value::String(s) => parse_fraction(s),
                        Value::Integer(i) => Some(*i as f64),
                        Value::Float(f) => Some(*f),
                        _ => None,
                    };
                    *item = Value::Float(v.ok_or_else(|| Error::config(&path, "entries must be numbers or fractions"))?);
                }
            }
            Value::Table(inner) if SECTION_KEYS.contains(&key.as_str()) && prefix.is_empty() => {
                resolve_fractions(inner, key)?
            }
            _ => {}
        }
    }
    Ok(())
}
