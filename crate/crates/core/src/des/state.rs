//! Event-driven state of one replication.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use crate::distributions::EquilibriumSpec;
use crate::rng::{RngStream, StreamFactory, Substream};

use super::model::{QueueModel, SimError, SimMode};
use super::probe::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Completion { server: u32 },
    Abandonment { customer: u64 },
    Arrival,
}

impl EventKind {
    // Simultaneous events: completions, then abandonments, then arrivals.
    fn class(self) -> u8 {
        match self {
            EventKind::Completion { .. } => 0,
            EventKind::Abandonment { .. } => 1,
            EventKind::Arrival => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.class().cmp(&other.kind.class()))
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct Waiting {
    deadline: f64,
    alive: bool,
}

/// Whole-run event counts for the conservation identity
/// `x0 + arrivals = completions + phantom_completions + abandonments + x_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlowCounts {
    pub x0: u64,
    pub arrivals: u64,
    pub abandonments: u64,
    pub completions: u64,
    pub phantom_completions: u64,
    pub x_end: i64,
}

impl FlowCounts {
    pub fn balanced(&self) -> bool {
        (self.x0 + self.arrivals) as i128
            == (self.completions + self.phantom_completions + self.abandonments) as i128 + self.x_end as i128
    }
}

/// What [`SystemState::step`] just did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub kind: EventKind,
    /// Number in system after the event.
    pub in_system: i64,
}

/// Servers, buffer, pending events and counters of one replication.
pub struct SystemState {
    model: QueueModel,
    mode: SimMode,
    now: f64,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    completion_at: Vec<f64>,
    real_service: Vec<bool>,
    idle: Vec<u32>,
    buffer: VecDeque<Waiting>,
    buffer_head_id: u64,
    live_waiting: u64,
    /// Perturbed mode: phantom services started and not yet claimed by an arrival.
    debt: u64,
    flow: FlowCounts,
    arrivals_rng: RngStream,
    services_rng: RngStream,
    patience_rng: RngStream,
    diagnostics: Vec<String>,
}

/// Fills all `n` servers with equilibrium residual service times and
/// preloads the buffer with the fluid queue content `round(q)`.
pub fn init_state(
    model: &QueueModel,
    mode: SimMode,
    streams: &StreamFactory,
    replication: u64,
) -> Result<SystemState, SimError> {
    let n = model.servers as usize;
    let mut initial_rng = streams.stream(replication, Substream::Initial);
    let residual = EquilibriumSpec::new(model.service)?;
    let mut state = SystemState {
        model: model.clone(),
        mode,
        now: 0.0,
        events: BinaryHeap::with_capacity(2 * n + 16),
        seq: 0,
        completion_at: vec![f64::INFINITY; n],
        real_service: vec![true; n],
        idle: Vec::new(),
        buffer: VecDeque::new(),
        buffer_head_id: 0,
        live_waiting: 0,
        debt: 0,
        flow: FlowCounts::default(),
        arrivals_rng: streams.stream(replication, Substream::Arrivals),
        services_rng: streams.stream(replication, Substream::Services),
        patience_rng: streams.stream(replication, Substream::Patiences),
        diagnostics: Vec::new(),
    };
    for server in 0..n {
        let t = residual.sample(&mut initial_rng);
        state.completion_at[server] = t;
        state.schedule(t, EventKind::Completion { server: server as u32 });
    }
    let preload = model.fluid_queue().round() as u64;
    if preload > 0 && model.patience.family() != crate::Family::Exponential {
        state
            .diagnostics
            .push("initial waiting customers use fresh patience draws; residual patience is approximate for non-exponential patience".into());
    }
    for _ in 0..preload {
        state.join_buffer();
    }
    state.flow.x0 = n as u64 + preload;
    let first = state.model.arrival.sample(&mut state.arrivals_rng);
    state.schedule(first, EventKind::Arrival);
    Ok(state)
}

impl SystemState {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Reverse(Event { time, seq: self.seq, kind }));
    }

    fn join_buffer(&mut self) {
        let patience = self.model.patience.sample(&mut self.patience_rng);
        let deadline = self.now + patience;
        let id = self.buffer_head_id + self.buffer.len() as u64;
        self.buffer.push_back(Waiting { deadline, alive: true });
        self.live_waiting += 1;
        if deadline.is_finite() {
            self.schedule(deadline, EventKind::Abandonment { customer: id });
        }
    }

    fn start_service(&mut self, server: u32, real: bool) {
        let t = self.now + self.model.service.sample(&mut self.services_rng);
        self.completion_at[server as usize] = t;
        self.real_service[server as usize] = real;
        self.schedule(t, EventKind::Completion { server });
    }

    /// Removes the head-of-line live customer, discarding abandoned entries.
    fn pop_waiting(&mut self) -> bool {
        while let Some(w) = self.buffer.pop_front() {
            self.buffer_head_id += 1;
            if w.alive {
                self.live_waiting -= 1;
                return true;
            }
        }
        false
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn mode(&self) -> SimMode {
        self.mode
    }

    pub fn servers(&self) -> u32 {
        self.model.servers
    }

    /// Number of customers in system; in perturbed mode this is the
    /// perturbed count `Y`, which drops below `n` while phantom services run.
    pub fn in_system(&self) -> i64 {
        let n = self.model.servers as i64;
        match self.mode {
            SimMode::Standard => n - self.idle.len() as i64 + self.live_waiting as i64,
            SimMode::Perturbed => n + self.live_waiting as i64 - self.debt as i64,
        }
    }

    /// Number waiting in the buffer.
    pub fn queue_length(&self) -> u64 {
        self.live_waiting
    }

    pub fn busy_servers(&self) -> u32 {
        self.model.servers - self.idle.len() as u32
    }

    pub fn flow(&self) -> FlowCounts {
        FlowCounts { x_end: self.in_system(), ..self.flow }
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.events.peek().map(|Reverse(e)| e.time)
    }

    /// Per-server completion times (`INFINITY` when idle).
    pub fn completion_times(&self) -> &[f64] {
        &self.completion_at
    }

    /// Abandonment deadlines of waiting customers in FIFO order.
    pub fn waiting_deadlines(&self) -> impl Iterator<Item = f64> + '_ {
        self.buffer.iter().filter(|w| w.alive).map(|w| w.deadline)
    }

    /// Fewer than `n` customers in system (a phantom service counts as idle).
    pub fn has_idle_server(&self) -> bool {
        self.in_system() < self.model.servers as i64
    }

    /// State needed to probe the virtual waiting time at `at >= now`.
    pub fn snapshot_at(&self, at: f64) -> Snapshot {
        let completions = if self.has_idle_server() { vec![f64::INFINITY] } else { self.completion_at.clone() };
        Snapshot { now: at, completions, deadlines: self.waiting_deadlines().collect() }
    }

    /// Processes the next event.
    pub fn step(&mut self) -> Result<StepRecord, SimError> {
        let Reverse(ev) = self.events.pop().expect("an arrival is always pending");
        if ev.time < self.now {
            return Err(SimError::EventOrderViolation { clock: self.now, event: ev.time });
        }
        self.now = ev.time;
        match ev.kind {
            EventKind::Arrival => self.on_arrival(),
            EventKind::Completion { server } => self.on_completion(server),
            EventKind::Abandonment { customer } => self.on_abandonment(customer),
        }
        Ok(StepRecord { time: self.now, kind: ev.kind, in_system: self.in_system() })
    }

    fn on_arrival(&mut self) {
        self.flow.arrivals += 1;
        let gap = self.model.arrival.sample(&mut self.arrivals_rng);
        self.schedule(self.now + gap, EventKind::Arrival);
        match self.mode {
            SimMode::Standard => {
                if let Some(server) = self.idle.pop() {
                    self.start_service(server, true);
                } else {
                    self.join_buffer();
                }
            }
            SimMode::Perturbed => {
                if self.debt > 0 {
                    // Claims a phantom service already started on its behalf.
                    self.debt -= 1;
                } else {
                    self.join_buffer();
                }
            }
        }
    }

    fn on_completion(&mut self, server: u32) {
        if self.real_service[server as usize] {
            self.flow.completions += 1;
        } else {
            self.flow.phantom_completions += 1;
        }
        let admitted = self.pop_waiting();
        match (admitted, self.mode) {
            (true, _) => self.start_service(server, true),
            (false, SimMode::Standard) => {
                self.completion_at[server as usize] = f64::INFINITY;
                self.idle.push(server);
            }
            (false, SimMode::Perturbed) => {
                self.debt += 1;
                self.start_service(server, false);
            }
        }
    }

    fn on_abandonment(&mut self, customer: u64) {
        if customer < self.buffer_head_id {
            return;
        }
        let idx = (customer - self.buffer_head_id) as usize;
        if let Some(w) = self.buffer.get_mut(idx) {
            if w.alive {
                w.alive = false;
                self.live_waiting -= 1;
                self.flow.abandonments += 1;
            }
        }
    }
}
