use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, ApproxError, GaussianApprox};
use crate::distributions::{DistError, DistSpec, Family};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("event at t = {event} precedes the clock at t = {clock}")]
    EventOrderViolation { clock: f64, event: f64 },
    #[error("need at least 2 replications to aggregate, got {0}")]
    InsufficientReplications(usize),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

/// A `G/GI/n+GI` queue: renewal arrivals, iid services, iid patience,
/// `n` FCFS servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueModel {
    pub servers: u32,
    pub arrival: DistSpec,
    pub service: DistSpec,
    pub patience: DistSpec,
}

impl QueueModel {
    pub fn new(servers: u32, arrival: DistSpec, service: DistSpec, patience: DistSpec) -> Result<QueueModel, SimError> {
        if servers == 0 {
            return Err(SimError::InvalidModel("at least one server is required".into()));
        }
        let model = QueueModel { servers, arrival, service, patience };
        if model.rho() <= 1.0 {
            log::warn!("traffic intensity {:.4} <= 1: the queue is not overloaded", model.rho());
        }
        Ok(model)
    }

    /// Builds a model from a traffic intensity: arrivals of the given family
    /// (Exponential for Poisson) with rate `rho n mu`.
    pub fn with_rho(
        servers: u32,
        rho: f64,
        arrival_family: Family,
        service: DistSpec,
        patience: DistSpec,
    ) -> Result<QueueModel, SimError> {
        if !(rho.is_finite() && rho > 0.0) || servers == 0 {
            return Err(SimError::InvalidModel(format!("rho = {rho}, servers = {servers}")));
        }
        let mean = 1.0 / (rho * servers as f64 * service.rate());
        let arrival = match arrival_family {
            Family::Lognormal => {
                return Err(SimError::InvalidModel("lognormal arrivals need an explicit scv".into()))
            }
            Family::Hyperexp2 => {
                return Err(SimError::InvalidModel("hyperexponential arrivals need explicit parameters".into()))
            }
            f => DistSpec::make(f, &[mean])?,
        };
        QueueModel::new(servers, arrival, service, patience)
    }

    /// Poisson arrivals, exponential patience of mean `gamma`.
    pub fn markovian_abandonment(servers: u32, rho: f64, service: DistSpec, gamma: f64) -> Result<QueueModel, SimError> {
        QueueModel::with_rho(servers, rho, Family::Exponential, service, DistSpec::exponential(gamma)?)
    }

    pub fn lambda(&self) -> f64 {
        self.arrival.rate()
    }

    pub fn mu(&self) -> f64 {
        self.service.rate()
    }

    pub fn rho(&self) -> f64 {
        self.lambda() / (self.servers as f64 * self.mu())
    }

    /// Mean patience.
    pub fn gamma(&self) -> f64 {
        self.patience.mean()
    }

    pub fn ca2(&self) -> f64 {
        self.arrival.scv()
    }

    pub fn cs2(&self) -> f64 {
        self.service.scv()
    }

    /// Fluid queue content `n mu (rho - 1) gamma`, zero when not overloaded.
    pub fn fluid_queue(&self) -> f64 {
        (self.servers as f64 * self.mu() * (self.rho() - 1.0) * self.gamma()).max(0.0)
    }

    /// Diffusion approximation; the general-patience variant is used when
    /// patience is not exponential.
    pub fn approx(&self) -> Result<GaussianApprox, ApproxError> {
        if self.patience.family() == Family::Exponential {
            diffusion::approximate(self.servers, self.mu(), self.rho(), self.gamma(), self.ca2(), self.cs2())
        } else {
            diffusion::general_patience(self.servers, self.mu(), self.rho(), self.ca2(), self.cs2(), &self.patience)
        }
    }

    /// Kendall-style label, e.g. `M/E2/100+M`.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}+{}",
            self.arrival.family().label(),
            self.service.family().label(),
            self.servers,
            self.patience.family().label()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    #[default]
    Standard,
    /// Servers never idle: a server that finds the buffer empty starts a
    /// phantom service for a customer who has not yet arrived.
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub warmup: f64,
    pub replications: usize,
    /// Spacing of virtual-wait probes; `None` disables probing.
    #[serde(default)]
    pub probe_interval: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub mode: SimMode,
}

impl SimConfig {
    /// Warmup of 10% of the horizon and probes every `gamma / 10`.
    pub fn for_model(model: &QueueModel, horizon: f64, replications: usize, seed: u64) -> SimConfig {
        SimConfig {
            horizon,
            warmup: 0.1 * horizon,
            replications,
            probe_interval: Some(model.gamma() / 10.0),
            seed,
            mode: SimMode::Standard,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(SimError::InvalidConfig(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return Err(SimError::InvalidConfig(format!(
                "warmup {} must lie in [0, horizon = {})",
                self.warmup, self.horizon
            )));
        }
        if self.replications == 0 {
            return Err(SimError::InvalidConfig("replications must be positive".into()));
        }
        if let Some(p) = self.probe_interval {
            if !(p.is_finite() && p > 0.0) {
                return Err(SimError::InvalidConfig(format!("probe_interval must be positive, got {p}")));
            }
        }
        Ok(())
    }
}
