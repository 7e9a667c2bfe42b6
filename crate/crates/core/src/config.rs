//! Experiment configuration: JSON file plus `key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::nn::ModelSpec;

/// Protocol under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedcat,
    FedcatGc,
    FedcatDc,
    Fedavg,
    Fedprox,
    Scaffold,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedcat => "fedcat",
            Method::FedcatGc => "fedcat_gc",
            Method::FedcatDc => "fedcat_dc",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::Scaffold => "scaffold",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "fedcat" => Ok(Method::Fedcat),
            "fedcat_gc" => Ok(Method::FedcatGc),
            "fedcat_dc" => Ok(Method::FedcatDc),
            "fedavg" => Ok(Method::Fedavg),
            "fedprox" => Ok(Method::Fedprox),
            "scaffold" => Ok(Method::Scaffold),
            other => Err(SimError::config(
                "method",
                format!("unknown method '{other}'"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synth,
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_synth_classes")]
    pub num_classes: usize,
    #[serde(default = "default_synth_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_synth_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_synth_dim")]
    pub dim: usize,
    #[serde(default = "default_synth_spread")]
    pub spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: default_synth_classes(),
            train_per_class: default_synth_per_class(),
            test_per_class: default_synth_per_class(),
            dim: default_synth_dim(),
            spread: default_synth_spread(),
        }
    }
}

fn default_synth_classes() -> usize {
    10
}
fn default_synth_per_class() -> usize {
    100
}
fn default_synth_dim() -> usize {
    32
}
fn default_synth_spread() -> f64 {
    0.1
}

fn default_participation() -> f64 {
    0.1
}
fn default_local_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    50
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_regroup_cycles() -> usize {
    1
}
fn default_greedy_epsilon() -> f64 {
    0.5
}
fn default_eval_every() -> usize {
    10
}
fn default_mnist_dir() -> String {
    "data/mnist".to_string()
}

/// All protocol hyperparameters of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: DatasetKind,
    pub num_devices: usize,
    #[serde(default = "default_participation")]
    pub participation: f64,
    /// Devices trained per round; defaults to `round(participation * N)`.
    #[serde(default)]
    pub devices_per_round: Option<usize>,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub alpha: f64,
    /// Regroup devices every `regroup_cycles * devices_per_round` rounds.
    #[serde(default = "default_regroup_cycles")]
    pub regroup_cycles: usize,
    /// Probability of the greedy (argmax-weight) selection branch.
    #[serde(default = "default_greedy_epsilon")]
    pub greedy_epsilon: f64,
    /// Proximal-term weight; required when `method` is `fedprox`.
    #[serde(default)]
    pub prox_mu: Option<f64>,
    pub rounds: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub seed: u64,
    /// Model architecture; defaults to one 64-unit hidden layer over the
    /// dataset's input dimension and class count.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default = "default_mnist_dir")]
    pub mnist_dir: String,
    /// Record wall-clock per eval row. Off by default so reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Accuracy threshold backing the summary's rounds-to-threshold field.
    #[serde(default)]
    pub accuracy_threshold: Option<f64>,
    /// Write the per-round selection audit trace next to the metrics CSV.
    #[serde(default)]
    pub selection_trace: bool,
}

impl ExperimentConfig {
    /// Resolved cohort size: devices trained (and groups formed) per round.
    pub fn devices_per_round(&self) -> usize {
        self.devices_per_round
            .unwrap_or_else(|| ((self.participation * self.num_devices as f64).round() as usize).max(1))
    }

    /// Model spec, defaulting per dataset.
    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| match self.dataset {
            DatasetKind::Mnist => ModelSpec::new(784, vec![64], 10),
            DatasetKind::Synth => {
                ModelSpec::new(self.synth.dim, vec![64], self.synth.num_classes)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(SimError::config("num_devices", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(SimError::config("rounds", "must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(SimError::config("participation", "must be in (0, 1]"));
        }
        let k = self.devices_per_round();
        if k == 0 || k > self.num_devices {
            return Err(SimError::config(
                "devices_per_round",
                format!("{k} must be in 1..={}", self.num_devices),
            ));
        }
        if self.local_epochs == 0 {
            return Err(SimError::config("local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(SimError::config("batch_size", "must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(SimError::config("alpha", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.greedy_epsilon) {
            return Err(SimError::config("greedy_epsilon", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SimError::config("momentum", "must be in [0, 1)"));
        }
        if self.regroup_cycles == 0 {
            return Err(SimError::config("regroup_cycles", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(SimError::config("eval_every", "must be at least 1"));
        }
        if self.method == Method::Fedprox {
            match self.prox_mu {
                None => {
                    return Err(SimError::config(
                        "prox_mu",
                        "fedprox requires prox_mu to be set",
                    ))
                }
                Some(mu) if !(mu >= 0.0) => {
                    return Err(SimError::config("prox_mu", "must be non-negative"))
                }
                _ => {}
            }
        }
        self.model_spec().validate()?;
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(json)
            .map_err(|e| SimError::config("config", e.to_string()))?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Apply `key=value` overrides onto a JSON config value. Keys use dotted
/// paths (`synth.spread=0.3`); values parse as JSON when possible and fall
/// back to strings.
pub fn apply_overrides(config_json: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = serde_json::from_str(config_json)
        .map_err(|e| SimError::config("config", e.to_string()))?;
    for entry in overrides {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            SimError::config("--set", format!("expected key=value, got '{entry}'"))
        })?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut cursor = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .as_object_mut()
                .ok_or_else(|| SimError::config(key, "path does not address an object"))?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        cursor
            .as_object_mut()
            .ok_or_else(|| SimError::config(key, "path does not address an object"))?
            .insert(parts[parts.len() - 1].to_string(), parsed);
    }
    let config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| SimError::config("config", e.to_string()))?;
    Ok(config)
}
