//! TOML experiment configuration.
//!
//! ```toml
//! rounds = 60
//! clients = 20
//! participation = 0.4
//! alpha = 0.05
//! seed = 1
//!
//! [data]
//! source = "synthetic"
//! num_classes = 10
//!
//! [proxy]
//! size = 64
//!
//! [aggregation]
//! strategy = "smartfl"
//! ```
//!
//! Every section and field is optional; see [`ExperimentConfig::default`].
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationConfig;
use crate::attack::AttackSpec;
use crate::client::LocalConfig;
use crate::data::ImbalanceSpec;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelKind, ModelSpec};

/// Environment variable that redirects metrics into another directory.
pub const OUT_DIR_ENV: &str = "SMARTFL_OUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    #[default]
    Csv,
    Json,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        }
    }
}

/// Architecture; input and output sizes come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Logistic,
            hidden_dim: 64,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian mixture; train and test share class means.
    Synthetic {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::train_per_class")]
        train_per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
    },
    /// MNIST-style IDX files. Limits keep the first rows only.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

mod defaults {
    pub fn num_classes() -> usize {
        10
    }
    pub fn train_per_class() -> usize {
        200
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn input_dim() -> usize {
        32
    }
    pub fn separation() -> f64 {
        3.0
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            num_classes: defaults::num_classes(),
            train_per_class: defaults::train_per_class(),
            test_per_class: defaults::test_per_class(),
            input_dim: defaults::input_dim(),
            separation: defaults::separation(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub size: usize,
    /// Largest over smallest class count; 1 is balanced.
    pub imbalance: f64,
    /// Whether the server may read proxy labels.
    pub labeled: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            size: 128,
            imbalance: 1.0,
            labeled: true,
        }
    }
}

impl ProxyConfig {
    pub fn imbalance_spec(&self) -> ImbalanceSpec {
        ImbalanceSpec {
            degree: self.imbalance,
            size: self.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub rounds: usize,
    /// Total client count M.
    pub clients: usize,
    /// Fraction C of clients sampled per round.
    pub participation: f64,
    /// Dirichlet concentration of the client partition.
    pub alpha: f64,
    pub seed: u64,
    /// Evaluate on the test set every this many rounds (and always on the
    /// last round).
    pub eval_every: usize,
    pub output: Option<PathBuf>,
    pub format: MetricsFormat,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub proxy: ProxyConfig,
    pub local: LocalConfig,
    pub aggregation: AggregationConfig,
    pub attack: AttackSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 60,
            clients: 20,
            participation: 0.4,
            alpha: 0.05,
            seed: 0,
            eval_every: 1,
            output: None,
            format: MetricsFormat::Csv,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            proxy: ProxyConfig::default(),
            local: LocalConfig::default(),
            aggregation: AggregationConfig::default(),
            attack: AttackSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, applies `key=value` overrides with dotted keys, then
    /// validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml_str(text);
        }
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_scalar(value))?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Number of clients sampled per round, `ceil(C * M)`.
    pub fn clients_per_round(&self) -> usize {
        ((self.participation * self.clients as f64).ceil() as usize).min(self.clients)
    }

    /// Builds the model description once the data dimensions are known.
    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        match self.model.kind {
            ModelKind::Logistic => ModelSpec::logistic(input_dim, num_classes),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.model.hidden_dim, num_classes, self.model.activation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!("participation must lie in (0, 1], got {}", self.participation)));
        }
        if self.participation * self.clients as f64 + 1e-9 < 1.0 {
            return Err(Error::config("participation * clients must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim must be positive"));
        }
        match &self.data {
            DataConfig::Synthetic {
                num_classes,
                train_per_class,
                test_per_class,
                input_dim,
                separation,
            } => {
                if *num_classes < 2 || *train_per_class == 0 || *test_per_class == 0 || *input_dim == 0 {
                    return Err(Error::config("data: need >= 2 classes and positive per-class counts and input_dim"));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return Err(Error::config("data.separation must be finite and >= 0"));
                }
            }
            DataConfig::Idx { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(Error::config("data limits must be positive"));
                }
            }
        }
        if !(self.proxy.imbalance >= 1.0 && self.proxy.imbalance.is_finite()) {
            return Err(Error::config(format!("proxy.imbalance must be >= 1, got {}", self.proxy.imbalance)));
        }
        let strategy = self.aggregation.strategy;
        if strategy.needs_proxy() && self.proxy.size == 0 {
            return Err(Error::config(format!("strategy {} needs proxy.size > 0", strategy.name())));
        }
        if strategy.needs_labeled_proxy() && !self.proxy.labeled {
            return Err(Error::config(format!("strategy {} needs a labeled proxy set", strategy.name())));
        }
        self.local.validate()?;
        self.aggregation.validate()?;
        self.attack.validate()?;
        Ok(())
    }

    /// Output path: `explicit`, else the configured one, else a default name;
    /// an explicit path wins over [`OUT_DIR_ENV`], which otherwise replaces
    /// the directory part.
    pub fn resolve_output(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        let base = self
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("smartfl_metrics.{}", self.format.extension())));
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Path::new(&dir).join(base.file_name().unwrap_or(base.as_os_str())),
            _ => base,
        }
    }
}

/// Interprets an override value as a TOML scalar when it parses as one and as
/// a bare string otherwise, so `smartfl` and `"smartfl"` both work.
fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("bad override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::config(format!("override {arg:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
