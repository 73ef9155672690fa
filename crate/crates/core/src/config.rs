//! Run configuration: a TOML file plus `dot.key=value` overrides, checked
//! against the known key set and resolved into one snapshot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Binarization, LossWeights};
use crate::model::ModelConfig;
use crate::synth::{CorpusConfig, StrokeSpec};
use crate::train::{OptimConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Frames whose ground-truth masks serve as annotations in dataset mode.
    pub annotate: Vec<usize>,
    /// Dataset split to run on; `all` for every clip.
    pub split: String,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            annotate: vec![0],
            split: "val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

/// Everything a run can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Copied into `data.seed`, `model.seed` and `optim.seed` unless those
    /// are set explicitly.
    pub seed: u64,
    pub binarization: Binarization,
    pub data: CorpusConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl AppConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optim: self.optim.clone(),
            loss: self.loss.clone(),
            binarization: self.binarization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.data.smooth.validate()?;
        self.data.motion.validate()?;
        self.data.stroke_spec().validate()?;
        Ok(())
    }

    /// TOML text of the fully resolved configuration.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses `text`, applies `overrides` and resolves the seeds.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        let explicit = |section: &str| {
            table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key("seed"))
        };
        let (data_seed, model_seed, optim_seed) =
            (explicit("data"), explicit("model"), explicit("optim"));
        let mut cfg: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        if !data_seed {
            cfg.data.seed = cfg.seed;
        }
        if !model_seed {
            cfg.model.seed = cfg.seed;
        }
        if !optim_seed {
            cfg.optim.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Applies one `a.b.c=value` assignment. Values are read as TOML and fall
/// back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_owned(), parse_value(raw.trim()));
    Ok(())
}

/// A configuration with every optional section filled, defining the key set.
fn schema() -> toml::Table {
    let mut full = AppConfig::default();
    full.data.stroke = Some(StrokeSpec::for_resolution(64, 64));
    toml::Table::try_from(&full).expect("config serializes")
}

fn collect_unknown(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(ks)), toml::Value::Table(gs)) => {
                collect_unknown(gs, ks, &path, out)
            }
            _ => {}
        }
    }
}

/// Every key of `given` outside the known schema, as dotted paths.
pub fn unknown_keys(given: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    collect_unknown(given, &schema(), "", &mut out);
    out
}
