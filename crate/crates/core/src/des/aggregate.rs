use std::fmt;

use serde::Serialize;

use crate::diffusion::GaussianApprox;
use crate::numerics::{mean_var, student_t_975};

use super::model::{QueueModel, SimError};
use super::replication::ReplicationStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Measure {
    AbdFraction,
    QueueMean,
    QueueVar,
    WaitMean,
    WaitVar,
    /// `P[X~ > a]` with `X~ = (X - n - q) / sqrt(n gamma)`.
    QueueTail(f64),
    /// `P[W~ > a]` with `W~ = sqrt(n / gamma) (W - w)`.
    WaitTail(f64),
    /// Probability of `state` customers in system.
    StateHistogram(usize),
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::AbdFraction => write!(f, "abd_fraction"),
            Measure::QueueMean => write!(f, "queue_mean"),
            Measure::QueueVar => write!(f, "queue_var"),
            Measure::WaitMean => write!(f, "wait_mean"),
            Measure::WaitVar => write!(f, "wait_var"),
            Measure::QueueTail(a) => write!(f, "queue_tail({a})"),
            Measure::WaitTail(a) => write!(f, "wait_tail({a})"),
            Measure::StateHistogram(i) => write!(f, "state_histogram({i})"),
        }
    }
}

impl Measure {
    /// Abandonment fraction, queue and wait moments, and tails at 0.5, 1, 2.
    pub fn standard_set() -> Vec<Measure> {
        let mut m = vec![Measure::AbdFraction, Measure::QueueMean, Measure::QueueVar, Measure::WaitMean, Measure::WaitVar];
        for a in [0.5, 1.0, 2.0] {
            m.push(Measure::QueueTail(a));
        }
        for a in [0.5, 1.0, 2.0] {
            m.push(Measure::WaitTail(a));
        }
        m
    }

    fn needs_probes(self) -> bool {
        matches!(self, Measure::WaitMean | Measure::WaitVar | Measure::WaitTail(_))
    }

    /// The value of this measure in one replication.
    pub fn per_replication(self, stats: &ReplicationStats, scaling: &Scaling) -> f64 {
        let waits = &stats.probe_waits;
        match self {
            Measure::AbdFraction => stats.abandonment_fraction(),
            Measure::QueueMean => stats.queue_moments(scaling.servers).0,
            Measure::QueueVar => stats.queue_moments(scaling.servers).1,
            Measure::WaitMean => mean_var(waits).0,
            Measure::WaitVar => mean_var(waits).1,
            Measure::QueueTail(a) => stats
                .histogram
                .iter()
                .enumerate()
                .filter(|&(x, _)| scaling.queue(x as f64) > a)
                .map(|(_, p)| p)
                .sum(),
            Measure::WaitTail(a) => {
                waits.iter().filter(|&&w| scaling.wait(w) > a).count() as f64 / waits.len() as f64
            }
            Measure::StateHistogram(i) => stats.histogram.get(i).copied().unwrap_or(0.0),
        }
    }

    /// The diffusion approximation of this measure.
    pub fn approximation(self, approx: &GaussianApprox) -> f64 {
        match self {
            Measure::AbdFraction => approx.alpha,
            Measure::QueueMean => approx.q,
            Measure::QueueVar => approx.sigma2_q,
            Measure::WaitMean => approx.w,
            Measure::WaitVar => approx.sigma2_w,
            Measure::QueueTail(a) => approx.queue_tail(a),
            Measure::WaitTail(a) => approx.wait_tail(a),
            Measure::StateHistogram(i) => approx.state_pmf(i as u64),
        }
    }
}

/// Centring and scaling constants for the scaled queue length and wait.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub servers: u32,
    pub gamma: f64,
    pub q: f64,
    pub w: f64,
}

impl Scaling {
    pub fn from_approx(approx: &GaussianApprox) -> Scaling {
        Scaling { servers: approx.n, gamma: approx.gamma, q: approx.q, w: approx.w }
    }

    pub fn queue(&self, x: f64) -> f64 {
        let n = self.servers as f64;
        (x - n - self.q) / (n * self.gamma).sqrt()
    }

    pub fn wait(&self, w: f64) -> f64 {
        (self.servers as f64 / self.gamma).sqrt() * (w - self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEstimate {
    pub measure: Measure,
    pub value: f64,
    pub half_width_95: f64,
    pub replications: usize,
}

impl SimEstimate {
    /// Across-replication mean with a Student-t 95% half-width.
    pub fn from_samples(measure: Measure, samples: &[f64]) -> Result<SimEstimate, SimError> {
        let r = samples.len();
        if r < 2 {
            return Err(SimError::InsufficientReplications(r));
        }
        let (mean, var) = mean_var(samples);
        let half_width_95 = student_t_975(r - 1) * (var / r as f64).sqrt();
        Ok(SimEstimate { measure, value: mean, half_width_95, replications: r })
    }

    /// Standard error of the mean implied by the half-width.
    pub fn standard_error(&self) -> f64 {
        self.half_width_95 / student_t_975(self.replications - 1)
    }
}

/// Estimates `measures` from replication outputs. Wait measures are
/// skipped when probing was disabled.
pub fn aggregate(model: &QueueModel, stats: &[ReplicationStats], measures: &[Measure]) -> Result<Vec<SimEstimate>, SimError> {
    if stats.len() < 2 {
        return Err(SimError::InsufficientReplications(stats.len()));
    }
    let scaling = Scaling::from_approx(&model.approx()?);
    let probed = stats.iter().all(|s| !s.probe_waits.is_empty());
    measures
        .iter()
        .filter(|m| probed || !m.needs_probes())
        .map(|&m| {
            let samples: Vec<f64> = stats.iter().map(|s| m.per_replication(s, &scaling)).collect();
            SimEstimate::from_samples(m, &samples)
        })
        .collect()
}

/// Across-replication average of the time-in-state histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct StateHistogram {
    pub probabilities: Vec<f64>,
    pub replications: usize,
}

impl StateHistogram {
    pub fn from_stats(stats: &[ReplicationStats]) -> Result<StateHistogram, SimError> {
        if stats.len() < 2 {
            return Err(SimError::InsufficientReplications(stats.len()));
        }
        let len = stats.iter().map(|s| s.histogram.len()).max().unwrap_or(0);
        let mut probabilities = vec![0.0; len];
        for s in stats {
            for (p, h) in probabilities.iter_mut().zip(&s.histogram) {
                *p += h;
            }
        }
        let r = stats.len() as f64;
        probabilities.iter_mut().for_each(|p| *p /= r);
        Ok(StateHistogram { probabilities, replications: stats.len() })
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// Kolmogorov-Smirnov distance between the scaled histogram and the
    /// centred Gaussian with variance `ou_var`, taking the supremum on both
    /// sides of every jump.
    pub fn ks_to_gaussian(&self, scaling: &Scaling, ou_var: f64) -> f64 {
        let sd = ou_var.sqrt();
        let mut cdf = 0.0;
        let mut ks: f64 = 0.0;
        for (x, p) in self.probabilities.iter().enumerate() {
            let g = crate::numerics::norm_cdf(scaling.queue(x as f64) / sd);
            ks = ks.max((g - cdf).abs());
            cdf += p;
            ks = ks.max((g - cdf).abs());
        }
        ks.max(1.0 - cdf.min(1.0))
    }
}
