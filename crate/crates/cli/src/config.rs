//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ssmkit::bench::BenchConfig;
use ssmkit::learn::train::TrainConfig;
use ssmkit::scaffold::StackConfig;
use ssmkit::tasks::TaskConfig;

use crate::CliError;

pub const WORKERS_ENV: &str = "SSMKIT_WORKERS";

/// Settings for the property suites of `verify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random systems per engine-equivalence length.
    pub systems: usize,
    /// Seeds per initializer for the unit-disk check.
    pub init_seeds: usize,
    /// Replaces every initial transition modulus in the disk check (fault injection).
    pub inject_abar: Option<f64>,
    /// Perturbs analytic gradients before the finite-difference comparison (fault injection).
    pub corrupt_backward: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { systems: 20, init_seeds: 100, inject_abar: None, corrupt_backward: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 defers to `--workers`, then the environment, then 1.
    pub workers: usize,
    pub model: StackConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            model: StackConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies overrides, and validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        for s in sets {
            apply_override(&mut doc, s)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Vocabulary and class count always follow the task.
    pub fn stack(&self) -> StackConfig {
        let mut s = self.model.clone();
        s.vocab = self.task.spec.vocab();
        s.n_classes = self.task.spec.n_classes();
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: ssmkit::SsmError| CliError::Validation(e.to_string());
        self.stack().validate().map_err(v)?;
        self.task.spec.validate().map_err(v)?;
        self.train.validate().map_err(v)?;
        self.bench.validate().map_err(v)?;
        Ok(())
    }

    /// Flag, then config, then environment, then 1.
    pub fn resolve_workers(&self, flag: Option<usize>) -> usize {
        flag.filter(|&w| w > 0)
            .or(Some(self.workers).filter(|&w| w > 0))
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&w| w > 0))
            .unwrap_or(1)
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Validation(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Validation("empty override key".into()))
}
