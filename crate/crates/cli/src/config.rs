//! Run configuration: a TOML file, then `--set key=value` overrides.
//!
//! ```toml
//! out_dir = "runs/2x2"          # optional; see `resolve_out_dir`
//!
//! [network]
//! n = 2
//! m = 2
//! hidden_layers = [100, 100]
//! revenue_floor = 0.001
//! support = { lo = 0.0, hi = 1.0 }
//!
//! [train]
//! sample_count = 640000
//! epochs = 80
//! batch_size = 128
//! misreport_steps = 25
//! misreport_lr = 0.1
//! model_lr = 0.001
//! multiplier_period = 100
//! rho_init = 1.0
//! rho_increment = 1.0
//! clamp_regret = true
//! seed = 0
//! adam = { beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8 }
//!
//! [eval]
//! setting = "2x2"               # 2x2, 3x3 or 5x5
//! sample_seed = 0               # 5x5 test sample
//! sample_count = 10000
//! regret = { steps = 25, lr = 0.1, restarts = 10, seed = 0 }
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use dauction::drnet::NetworkConfig;
use dauction::evaluation::{RegretConfig, Setting};
use dauction::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "DAUCTION_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub setting: String,
    pub sample_seed: u64,
    pub sample_count: usize,
    pub regret: RegretConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            setting: "2x2".into(),
            sample_seed: 0,
            sample_count: Setting::SAMPLED_COUNT,
            regret: RegretConfig::default(),
        }
    }
}

impl EvalOptions {
    pub fn setting(&self) -> Result<Setting, CliError> {
        let setting: Setting = self.setting.parse()?;
        Ok(match setting {
            Setting::Sampled5x5 { .. } => Setting::Sampled5x5 {
                seed: self.sample_seed,
                count: self.sample_count,
            },
            other => other,
        })
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides in order and validates
    /// the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate()?;
        self.train.validate()?;
        self.eval.setting()?;
        if self.eval.sample_count == 0 {
            return Err(CliError::Config("eval.sample_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Flag, then config file, then the environment, then `runs`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
