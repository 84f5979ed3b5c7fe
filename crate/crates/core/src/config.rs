//! Run configuration: defaults, overridden by a JSON config file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mapper::Difficulty;

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "BLOCKPRUNE_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Regularization strength.
    pub lambda: f64,
    /// Reweighting smoothing term.
    pub epsilon: f64,
    /// Hardening threshold relative to the mean group norm.
    pub tau: f64,
    /// Latency threshold of block-size selection.
    pub beta: f64,
    /// Target per-layer compression rate.
    pub rate: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Samples per policy update.
    pub samples: usize,
    pub iterations: usize,
    pub search_lr: f64,
    pub retrain_epochs: usize,
    pub threads: usize,
    pub runs: usize,
    /// Inferred from the dataset when absent.
    pub difficulty: Option<Difficulty>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            lambda: 1e-2,
            epsilon: 1e-4,
            tau: 0.05,
            beta: crate::mapper::DEFAULT_BETA,
            rate: crate::mapper::DEFAULT_RATE,
            epochs: 10,
            finetune_epochs: 5,
            lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            samples: 4,
            iterations: 30,
            search_lr: 1.0,
            retrain_epochs: 2,
            threads: env_threads().unwrap_or(1),
            runs: 100,
            difficulty: None,
        }
    }
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    let v = std::env::var(THREADS_ENV).ok()?;
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={v:?}: not a positive integer");
            None
        }
    }
}

/// Recursively overlays `over` onto `base`; nulls in `over` are skipped.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => {
            if !v.is_null() {
                *slot = v;
            }
        }
    }
}

impl RunConfig {
    /// Defaults < `file` < `flags` (a JSON object of explicitly given flags).
    pub fn resolve(file: Option<&Path>, flags: Value) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
            merge(&mut v, parsed);
        }
        merge(&mut v, flags);
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.threads == 0 || self.batch_size == 0 || self.runs == 0 {
            return bad("threads, batch_size and runs must be >= 1".into());
        }
        if !(self.rate >= 1.0) {
            return bad(format!("rate must be >= 1, got {}", self.rate));
        }
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) || !(self.epsilon > 0.0) || !(self.tau >= 0.0) {
            return bad("beta, lambda, tau must be >= 0 and epsilon > 0".into());
        }
        Ok(())
    }

    /// An input path that must exist.
    pub fn input(&self, name: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path.clone().ok_or_else(|| Error::InvalidArgument(format!("missing required path `{name}`")))?;
        if !p.exists() {
            return Err(Error::InvalidArgument(format!("{name} path {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn output(&self) -> Result<PathBuf> {
        self.paths.output.clone().ok_or_else(|| Error::InvalidArgument("missing required path `output`".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cfg.json");
        std::fs::write(&f, r#"{"seed": 5, "beta": 0.5, "paths": {"model": "m"}}"#).unwrap();
        let c = RunConfig::resolve(Some(&f), json!({"seed": 9, "lr": null})).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.lr, RunConfig::default().lr);
        assert_eq!(c.paths.model, Some(PathBuf::from("m")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, json!({"sede": 1})).is_err());
    }
}
