use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::bench::BenchConfig;
use super::optim::OptimizerConfig;
use crate::backbone::ModelConfig;
use crate::data::SyntheticConfig;
use crate::error::{io_err, Error, Result};
use crate::losses::{Derangement, LossWeights};
use crate::patterns::PatternCalendar;

/// Environment variable consulted for the seed when no `--seed` flag is given.
pub const SEED_ENV: &str = "DUALCAST_SEED";

/// Everything one CLI invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `manifest.json`.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub pairing: Derangement,
    pub calendar: PatternCalendar,
    pub optimizer: OptimizerConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: "data".into(),
            output_dir: "runs".into(),
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            pairing: Derangement::default(),
            calendar: PatternCalendar::default(),
            optimizer: OptimizerConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoint")
    }

    /// Builds a config from an optional JSON file, the seed variable and
    /// `key=value` overrides, in increasing precedence. The resolved seed
    /// also seeds the model.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                serde_json::from_str(&text)?
            }
            None => serde_json::to_value(Self::default())?,
        };
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            set_path(&mut value, "seed", Value::from(seed))?;
        }
        for o in overrides {
            let (key, raw) = parse_override(o)?;
            set_path(&mut value, key, parse_value(raw))?;
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.calendar.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}

/// Splits `--a.b=v` (or `a.b=v`) into the dotted key and the raw value.
pub fn parse_override(arg: &str) -> Result<(&str, &str)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    match body.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k, v)),
        _ => Err(Error::Config(format!("override {arg:?} must look like --key=value"))),
    }
}

/// JSON literal when it parses, plain string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, dotted: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(map) => map,
            other => {
                if other.is_null() {
                    *other = Value::Object(Default::default());
                    other.as_object_mut().expect("just set")
                } else {
                    return Err(Error::Config(format!(
                        "override {dotted}: {} is not an object",
                        parts[..i].join(".")
                    )));
                }
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    Ok(())
}
