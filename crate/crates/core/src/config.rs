//! TOML configuration files shared by the command-line subcommands.
//!
//! A file holds a `[model]` table and, depending on the subcommand,
//! `[sim]`, `[exact]`, `[ou]`, `[ys]`, `[fclt]` or `[plan]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::des::{QueueModel, SimConfig, SimError, SimMode};
use crate::distributions::{DistSpec, Family};
use crate::experiments::ExperimentPlan;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("missing [{0}] table")]
    MissingSection(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Replications and horizon of a simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBudget {
    pub replications: usize,
    pub horizon: f64,
}

/// Named budgets: desk = 10 x 1e5, paper = 30 x 1e6 time units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    #[default]
    Desk,
    Paper,
}

impl Budget {
    pub fn sim_budget(self) -> SimBudget {
        match self {
            Budget::Desk => SimBudget { replications: 10, horizon: 1e5 },
            Budget::Paper => SimBudget { replications: 30, horizon: 1e6 },
        }
    }

    /// Resolves a budget flag against a budget written in the file. An
    /// explicit budget is kept under `desk` and scaled up by the
    /// paper/desk ratios (3x replications, 10x horizon) under `paper`.
    pub fn resolve(flag: Option<Budget>, explicit: Option<SimBudget>) -> SimBudget {
        match (flag, explicit) {
            (None | Some(Budget::Desk), Some(b)) => b,
            (Some(Budget::Paper), Some(b)) => SimBudget { replications: 3 * b.replications, horizon: 10.0 * b.horizon },
            (f, None) => f.unwrap_or_default().sim_budget(),
        }
    }
}

/// A queue model as written in a config file. Give either `rho` (Poisson
/// arrivals at rate `rho n mu`) or an explicit `arrival` distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub servers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival: Option<DistSpec>,
    pub service: DistSpec,
    pub patience: DistSpec,
}

impl ModelConfig {
    pub fn build(&self) -> Result<QueueModel, ConfigError> {
        match (self.rho, self.arrival) {
            (Some(rho), None) => {
                Ok(QueueModel::with_rho(self.servers, rho, Family::Exponential, self.service, self.patience)?)
            }
            (None, Some(arrival)) => Ok(QueueModel::new(self.servers, arrival, self.service, self.patience)?),
            _ => Err(ConfigError::Invalid("[model] needs exactly one of `rho` and `arrival`".into())),
        }
    }
}

/// Simulation settings; everything is optional and falls back to the
/// budget, a 10% warmup, probes every `gamma / 10` and seed 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon: Option<f64>,
    pub replications: Option<usize>,
    pub warmup: Option<f64>,
    pub probe_interval: Option<f64>,
    /// `false` turns off virtual-wait probes.
    #[serde(default = "yes")]
    pub probes: bool,
    pub seed: Option<u64>,
    #[serde(default)]
    pub mode: SimMode,
}

fn yes() -> bool {
    true
}

impl SimSection {
    pub fn explicit_budget(&self) -> Result<Option<SimBudget>, ConfigError> {
        match (self.replications, self.horizon) {
            (Some(replications), Some(horizon)) => Ok(Some(SimBudget { replications, horizon })),
            (None, None) => Ok(None),
            _ => Err(ConfigError::Invalid("[sim] needs both `horizon` and `replications` or neither".into())),
        }
    }

    pub fn build(&self, model: &QueueModel, budget: Option<Budget>, seed: Option<u64>) -> Result<SimConfig, ConfigError> {
        let b = Budget::resolve(budget, self.explicit_budget()?);
        let mut cfg = SimConfig::for_model(model, b.horizon, b.replications, seed.or(self.seed).unwrap_or(0));
        if let Some(w) = self.warmup {
            // A warmup sized for one horizon is rescaled with it.
            cfg.warmup = w * b.horizon / self.horizon.unwrap_or(b.horizon);
        }
        cfg.probe_interval = if self.probes { self.probe_interval.or(cfg.probe_interval) } else { None };
        cfg.mode = self.mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactSection {
    /// Highest level kept; default `n + ceil(q + 12 sigma_Q)`.
    pub truncation: Option<u32>,
}

/// OU path on the scaled time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuSection {
    pub t_max: f64,
    pub points: usize,
    /// Fixed start; stationary when absent.
    pub x0: Option<f64>,
    pub seed: Option<u64>,
}

/// Stopped-arrival variance over a list of stopping times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YsSection {
    pub s: Vec<f64>,
    /// Variance of the scaled initial state; stationary OU variance when absent.
    pub var_x0: Option<f64>,
    /// Extra `(cA2, cS2)` pairs checked against the limiting closed form.
    #[serde(default)]
    pub variability_grid: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcltSection {
    pub n: u32,
    pub gamma: f64,
    pub interrenewal: DistSpec,
    pub t_max: f64,
    pub points: usize,
    pub replications: usize,
    pub seed: Option<u64>,
    #[serde(default = "yes")]
    pub stationary: bool,
    /// Grid times for the increment test; defaults `t_max / 2` and `t_max`.
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
}

fn default_permutations() -> usize {
    999
}

/// Whole config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelConfig>,
    pub sim: Option<SimSection>,
    pub exact: Option<ExactSection>,
    pub ou: Option<OuSection>,
    pub ys: Option<YsSection>,
    pub fclt: Option<FcltSection>,
    pub plan: Option<ExperimentPlan>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<ConfigFile, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        ConfigFile::parse(&text)
    }

    pub fn model(&self) -> Result<QueueModel, ConfigError> {
        self.model.as_ref().ok_or(ConfigError::MissingSection("model"))?.build()
    }

    pub fn sim_config(&self, model: &QueueModel, budget: Option<Budget>, seed: Option<u64>) -> Result<SimConfig, ConfigError> {
        self.sim.clone().unwrap_or_default().build(model, budget, seed)
    }
}
