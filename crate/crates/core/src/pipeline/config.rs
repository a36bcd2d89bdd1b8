//! Run configuration: a TOML file with sections, plus dotted-path overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::ConsistencyConfig;
use crate::dataio::{Schema, SplitConfig, SyntheticSpec};
use crate::nnet::{Architecture, TrainConfig};
use crate::openset::RejectionConfig;
use crate::{Error, Result};

/// Environment variable consulted when `dataset.path` is empty.
pub const DATA_DIR_ENV: &str = "SOFD_DATA_DIR";

/// File looked up inside `$SOFD_DATA_DIR` when that variable names a
/// directory.
pub const DEFAULT_DATA_FILE: &str = "naval_decay.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Raw plant CSV, labelled from the decay coefficients.
    Raw,
    /// Output of `sofd ingest` / `sofd synth`.
    Prepared,
    /// Generated in memory from the `[synthetic]` section.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: String,
    pub speed: Option<u8>,
    pub known_classes: Vec<usize>,
    pub unknown_class: usize,
    pub per_class: usize,
    pub train_frac: f64,
    /// Split seed; the run seed when absent.
    pub seed: Option<u64>,
    pub schema: Schema,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Raw,
            path: String::new(),
            speed: None,
            known_classes: vec![1, 2, 3],
            unknown_class: 4,
            per_class: 1800,
            train_frac: 0.7,
            seed: None,
            schema: Schema::default(),
        }
    }
}

impl DatasetConfig {
    /// Dataset path, falling back to `$SOFD_DATA_DIR` (or
    /// `$SOFD_DATA_DIR/naval_decay.csv` when it is a directory) when unset.
    /// A relative path is resolved against that directory when it does not
    /// exist as given.
    pub fn resolved_path(&self) -> Result<PathBuf> {
        let env = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        if self.path.is_empty() {
            let dir = env.ok_or_else(|| {
                Error::Config(format!("dataset.path is empty and {DATA_DIR_ENV} is not set"))
            })?;
            return Ok(if dir.is_dir() { dir.join(DEFAULT_DATA_FILE) } else { dir });
        }
        let p = PathBuf::from(&self.path);
        if !p.exists() && p.is_relative() {
            if let Some(dir) = env {
                let candidate = dir.join(&p);
                if candidate.exists() {
                    return Ok(candidate);
                }
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub cov_scale: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { classes: 4, dim: 17, separation: 6.0, cov_scale: 1.0, per_class: 400, seed: 0 }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SyntheticSpec {
        let mut s = SyntheticSpec::separated(self.classes, self.dim, self.separation, self.per_class, self.seed);
        s.cov_scale = self.cov_scale;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub sigma2: f64,
    pub epsilon: f64,
    /// Build the Laplacian from kernel weights rather than the 0/1
    /// adjacency.
    pub use_weights: bool,
    pub cheb_order: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { sigma2: 10.0, epsilon: 0.5, use_weights: true, cheb_order: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub conv_widths: Vec<usize>,
    /// Hidden dense widths for speeds without an entry below.
    pub hidden_widths: Vec<usize>,
    /// Per-speed hidden widths, keyed by speed index.
    pub speed_hidden_widths: BTreeMap<String, Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut speed_hidden_widths = BTreeMap::new();
        speed_hidden_widths.insert("1".to_string(), vec![64, 16]);
        speed_hidden_widths.insert("2".to_string(), vec![64, 16]);
        Self { conv_widths: vec![32, 32, 32], hidden_widths: vec![64, 8], speed_hidden_widths }
    }
}

impl ModelConfig {
    pub fn hidden_for(&self, speed: Option<u8>) -> Vec<usize> {
        speed
            .and_then(|s| self.speed_hidden_widths.get(&s.to_string()))
            .unwrap_or(&self.hidden_widths)
            .clone()
    }

    pub fn architecture(&self, speed: Option<u8>, cheb_order: usize, outputs: usize) -> Architecture {
        Architecture {
            cheb_order,
            conv_widths: self.conv_widths.clone(),
            hidden_widths: self.hidden_for(speed),
            outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Where artifacts are written; empty keeps everything in memory.
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub synthetic: SyntheticConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train_m0: TrainConfig,
    pub train_m1: TrainConfig,
    pub rejection: RejectionConfig,
    pub consistency: ConsistencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "sofd-out".into(),
            dataset: DatasetConfig::default(),
            synthetic: SyntheticConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train_m0: TrainConfig::default(),
            train_m1: TrainConfig::default(),
            rejection: RejectionConfig::default(),
            consistency: ConsistencyConfig::default(),
        }
    }
}

/// Every configuration key with its default, for `--help`.
pub fn documented_keys() -> Vec<(String, String)> {
    let value = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    for (k, v) in [
        ("dataset.speed", "(unset: all speeds)"),
        ("dataset.seed", "(unset: run seed)"),
        ("rejection.priors", "(unset: uniform)"),
    ] {
        out.push((k.to_string(), v.to_string()));
    }
    out.sort();
    out
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses a config and applies `key.path=value` overrides before
    /// deserializing.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("cannot parse config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_m0.validate()?;
        self.train_m1.validate()?;
        self.rejection.validate()?;
        if self.consistency.neighbors == 0 {
            return Err(Error::Config("consistency.neighbors must be at least 1".into()));
        }
        if self.graph.cheb_order == 0 {
            return Err(Error::Config("graph.cheb_order must be at least 1".into()));
        }
        if let Some(s) = self.dataset.speed {
            if !(1..=9).contains(&s) {
                return Err(Error::Config(format!("dataset.speed must be in 1..=9, got {s}")));
            }
        }
        if self.model.conv_widths.is_empty() {
            return Err(Error::Config("model.conv_widths must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with `output_dir` cleared, so the same
    /// experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn split_config(&self) -> SplitConfig {
        let synthetic = self.dataset.source == DataSource::Synthetic;
        SplitConfig {
            known_classes: self.dataset.known_classes.clone(),
            unknown_class: self.dataset.unknown_class,
            speed: if synthetic { None } else { self.dataset.speed },
            per_class: if synthetic { self.synthetic.per_class } else { self.dataset.per_class },
            train_frac: self.dataset.train_frac,
            seed: self.dataset.seed.unwrap_or(self.seed),
        }
    }

    /// Compact configuration for quick synthetic runs at a raised learning
    /// rate.
    pub fn synthetic_demo() -> Self {
        let mut c = RunConfig::default();
        c.dataset.source = DataSource::Synthetic;
        c.output_dir = String::new();
        let train = TrainConfig { learning_rate: 1e-3, batch_size: 64, epochs: 20, ..TrainConfig::default() };
        c.train_m0 = train.clone();
        c.train_m1 = train;
        c
    }
}

/// Sets `a.b.c=value` in a TOML table. The value is parsed as TOML when
/// possible and taken as a plain string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
