use rayon::prelude::*;

use crate::rng::{StreamFactory, Substream};

use super::model::{QueueModel, SimConfig, SimError};
use super::probe::{probe_virtual_wait, ProbeScratch};
use super::state::{init_state, FlowCounts};

/// Raw output of one replication. Time averages cover `[warmup, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationStats {
    pub replication: u64,
    /// Length of the observation window.
    pub window: f64,
    pub arrivals: u64,
    pub abandonments: u64,
    pub completions: u64,
    /// `histogram[x]` is the fraction of the window spent with `x` in system.
    pub histogram: Vec<f64>,
    /// Fraction of the window with fewer than `n` customers in system.
    pub below_n_fraction: f64,
    /// Virtual waiting times sampled at the probe epochs.
    pub probe_waits: Vec<f64>,
    pub flow: FlowCounts,
    /// First epoch (from time 0) at which the number in system fell below `n`.
    pub first_idle_time: Option<f64>,
}

impl ReplicationStats {
    /// Abandonments over arrivals within the window; 0 if nobody arrived.
    pub fn abandonment_fraction(&self) -> f64 {
        if self.arrivals == 0 {
            0.0
        } else {
            self.abandonments as f64 / self.arrivals as f64
        }
    }

    /// Time-average mean and variance of the queue length `(X - n)^+`.
    pub fn queue_moments(&self, servers: u32) -> (f64, f64) {
        let n = servers as usize;
        let (mut m1, mut m2) = (0.0, 0.0);
        for (x, p) in self.histogram.iter().enumerate().skip(n + 1) {
            let q = (x - n) as f64;
            m1 += p * q;
            m2 += p * q * q;
        }
        (m1, (m2 - m1 * m1).max(0.0))
    }
}

#[derive(Default)]
struct Accumulator {
    histogram: Vec<f64>,
    below_n: f64,
}

impl Accumulator {
    fn add(&mut self, x: i64, servers: u32, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let x = x.max(0) as usize;
        if x >= self.histogram.len() {
            self.histogram.resize(x + 1, 0.0);
        }
        self.histogram[x] += dt;
        if x < servers as usize {
            self.below_n += dt;
        }
    }
}

/// Simulates one replication of `model` under `config`.
pub fn run_replication(model: &QueueModel, config: &SimConfig, replication: u64) -> Result<ReplicationStats, SimError> {
    config.validate()?;
    let streams = StreamFactory::new(config.seed);
    let mut state = init_state(model, config.mode, &streams, replication)?;
    let mut probe_rng = streams.stream(replication, Substream::Probes);
    let mut scratch = ProbeScratch::default();
    let n = model.servers;
    let (warmup, horizon) = (config.warmup, config.horizon);

    let mut acc = Accumulator::default();
    let mut probe_waits = Vec::new();
    let mut next_probe = config.probe_interval.map(|_| warmup);
    let mut probe_index = 0u64;
    let mut first_idle_time = (state.in_system() < n as i64).then_some(0.0);
    let mut window_start: Option<FlowCounts> = None;

    loop {
        let next = state.next_event_time().unwrap_or(f64::INFINITY).min(horizon);
        // Probes due before the next event see the current state.
        while let Some(t) = next_probe {
            if t > next || t > horizon {
                break;
            }
            let wait = if state.has_idle_server() {
                0.0
            } else {
                probe_virtual_wait(
                    t,
                    state.completion_times(),
                    state.waiting_deadlines(),
                    &model.service,
                    &mut probe_rng,
                    &mut scratch,
                )
            };
            probe_waits.push(wait);
            probe_index += 1;
            next_probe = config.probe_interval.map(|dt| warmup + probe_index as f64 * dt);
        }
        if window_start.is_none() && next >= warmup {
            window_start = Some(state.flow());
        }
        let from = state.now().max(warmup);
        if next > from {
            acc.add(state.in_system(), n, next - from);
        }
        if next >= horizon {
            break;
        }
        let rec = state.step()?;
        if first_idle_time.is_none() && rec.in_system < n as i64 {
            first_idle_time = Some(rec.time);
        }
    }

    let start = window_start.unwrap_or_default();
    let end = state.flow();
    let window = horizon - warmup;
    let histogram: Vec<f64> = acc.histogram.iter().map(|t| t / window).collect();
    Ok(ReplicationStats {
        replication,
        window,
        arrivals: end.arrivals - start.arrivals,
        abandonments: end.abandonments - start.abandonments,
        completions: end.completions - start.completions,
        histogram,
        below_n_fraction: acc.below_n / window,
        probe_waits,
        flow: end,
        first_idle_time,
    })
}

/// Runs `config.replications` replications in parallel; results are in
/// replication order regardless of scheduling.
pub fn run_replications(model: &QueueModel, config: &SimConfig) -> Result<Vec<ReplicationStats>, SimError> {
    config.validate()?;
    (0..config.replications as u64)
        .into_par_iter()
        .map(|r| run_replication(model, config, r))
        .collect()
}
