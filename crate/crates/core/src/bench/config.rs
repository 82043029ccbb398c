use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::SyntheticSpec;
use super::BenchError;
use crate::ensemble::BlendConfig;
use crate::models::{ModelKind, TrainConfig};
use crate::spatial::STANDARD_NODE_COUNTS;
use crate::timeseries::{SplitSpec, SUPPORTED_RATES};

/// Redundancy levels of the published grid.
pub const STANDARD_REDUNDANCIES: [u32; 4] = [0, 20, 60, 100];

/// A black-box univariate forecaster reached through the line protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Blend per-node forecasts with similar neighbours.
    #[serde(default = "default_true")]
    pub blend: bool,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelChoice {
    Builtin(ModelKind),
    /// Index into [`GridSpec::external`].
    External(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub rates: Vec<u32>,
    pub node_counts: Vec<usize>,
    pub redundancies: Vec<u32>,
    pub models: Vec<ModelKind>,
    pub external: Vec<ExternalSpec>,
    pub seeds: Vec<u64>,
    /// Mixed into every per-cell seed.
    pub global_seed: u64,
    pub split: SplitSpec,
    pub training: TrainConfig,
    pub blend: BlendConfig,
    /// Geographic clusters used to pick node subsets.
    pub clusters: usize,
    /// Accept node counts outside 8, 16, 25.
    pub allow_any_k: bool,
    pub hidden: usize,
    pub workers: Option<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rates: SUPPORTED_RATES.to_vec(),
            node_counts: STANDARD_NODE_COUNTS.to_vec(),
            redundancies: STANDARD_REDUNDANCIES.to_vec(),
            models: ModelKind::ALL.to_vec(),
            external: Vec::new(),
            seeds: vec![0, 1, 2],
            global_seed: 0,
            split: SplitSpec::default(),
            training: TrainConfig::default(),
            blend: BlendConfig::default(),
            clusters: 5,
            allow_any_k: false,
            hidden: 64,
            workers: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let spec: GridSpec = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid spec serialises")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |m: String| Err(BenchError::Config(m));
        if self.rates.is_empty() || self.node_counts.is_empty() || self.seeds.is_empty() {
            return err("rates, node_counts and seeds must be non-empty".into());
        }
        if self.models.is_empty() && self.external.is_empty() {
            return err("no models selected".into());
        }
        if let Some(r) = self.rates.iter().find(|r| !SUPPORTED_RATES.contains(r)) {
            return err(format!("unsupported rate {r}"));
        }
        if !self.allow_any_k {
            if let Some(k) = self.node_counts.iter().find(|k| !STANDARD_NODE_COUNTS.contains(k)) {
                return err(format!("node count {k} is not one of 8, 16, 25 (set allow_any_k)"));
            }
        }
        if self.models.iter().any(|m| m.uses_graph()) && self.redundancies.is_empty() {
            return err("graph models need at least one redundancy level".into());
        }
        if let Some(p) = self.redundancies.iter().find(|p| **p > 100) {
            return err(format!("redundancy {p} exceeds 100"));
        }
        if self.clusters == 0 || self.hidden == 0 || self.training.batch_size == 0 {
            return err("clusters, hidden and batch_size must be positive".into());
        }
        if let Some(e) = self.external.iter().find(|e| e.command.is_empty() || e.name.is_empty()) {
            return err(format!("external forecaster {:?} needs a name and a command", e.name));
        }
        Ok(())
    }

    pub fn choices(&self) -> Vec<ModelChoice> {
        let mut v: Vec<ModelChoice> = self.models.iter().copied().map(ModelChoice::Builtin).collect();
        v.extend((0..self.external.len()).map(ModelChoice::External));
        v
    }

    pub fn label(&self, choice: &ModelChoice) -> String {
        match choice {
            ModelChoice::Builtin(k) => k.name().to_string(),
            ModelChoice::External(i) => self.external[*i].name.clone(),
        }
    }
}
