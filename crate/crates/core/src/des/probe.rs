//! Virtual waiting time by replaying the system with arrivals turned off.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;

use crate::distributions::DistSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Time(pub f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Reusable scratch space for repeated probes.
#[derive(Debug, Default)]
pub struct ProbeScratch {
    heap: BinaryHeap<Reverse<Time>>,
}

/// Time from `now` until some server has no customer in the system whose
/// arrivals stopped at `now`.
///
/// `completions` holds each server's scheduled completion time (`INFINITY`
/// for an idle server); `deadlines` yields the abandonment deadlines of the
/// waiting customers in FIFO order. Service times of admitted customers
/// come from `rng`, so the caller's own streams are untouched.
pub fn probe_virtual_wait<I, R>(
    now: f64,
    completions: &[f64],
    deadlines: I,
    service: &DistSpec,
    rng: &mut R,
    scratch: &mut ProbeScratch,
) -> f64
where
    I: IntoIterator<Item = f64>,
    R: Rng + ?Sized,
{
    if completions.iter().any(|c| !c.is_finite()) || completions.is_empty() {
        return 0.0;
    }
    let heap = &mut scratch.heap;
    heap.clear();
    heap.extend(completions.iter().map(|&c| Reverse(Time(c))));
    let mut waiting = deadlines.into_iter();
    loop {
        let Reverse(Time(free_at)) = heap.pop().expect("one entry per server");
        // Head of line at `free_at`: first customer still patient.
        let admitted = waiting.by_ref().any(|d| d > free_at);
        if !admitted {
            return (free_at - now).max(0.0);
        }
        heap.push(Reverse(Time(free_at + service.sample(rng))));
    }
}

/// Owned copy of the state needed for a probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub now: f64,
    pub completions: Vec<f64>,
    pub deadlines: Vec<f64>,
}

impl Snapshot {
    pub fn probe<R: Rng + ?Sized>(&self, service: &DistSpec, rng: &mut R) -> f64 {
        probe_virtual_wait(
            self.now,
            &self.completions,
            self.deadlines.iter().copied(),
            service,
            rng,
            &mut ProbeScratch::default(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamFactory, Substream};

    fn rng() -> crate::rng::RngStream {
        StreamFactory::new(9).stream(0, Substream::Probes)
    }

    #[test]
    fn idle_server_means_zero_wait() {
        let s = Snapshot { now: 5.0, completions: vec![6.0, f64::INFINITY, 7.0], deadlines: vec![] };
        assert_eq!(s.probe(&DistSpec::exponential(1.0).unwrap(), &mut rng()), 0.0);
    }

    #[test]
    fn expired_deadlines_reduce_to_first_completion() {
        let s = Snapshot { now: 1.0, completions: vec![3.5, 2.25, 4.0], deadlines: vec![1.5, 2.0, 2.25] };
        assert_eq!(s.probe(&DistSpec::exponential(1.0).unwrap(), &mut rng()), 1.25);
    }

    #[test]
    fn deterministic_replay() {
        // Two servers free at 1 and 2; three waiting customers, services of 10.
        // t=1: admit A (deadline 5) -> busy until 11.
        // t=2: B (deadline 1.5) already gone, admit C (deadline 9) -> busy until 12.
        // t=11: queue empty -> wait = 11.
        let s = Snapshot { now: 0.0, completions: vec![2.0, 1.0], deadlines: vec![5.0, 1.5, 9.0] };
        assert_eq!(s.probe(&DistSpec::deterministic(10.0).unwrap(), &mut rng()), 11.0);
    }
}
