//! Monte-Carlo laboratory for the superposition `B_n = N_1 + ... + N_n` of
//! iid stationary renewal processes under space-time scaling
//! `B~_n(t) = (B_n(gamma t) - n mu gamma t) / sqrt(n gamma)`.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DistSpec, EquilibriumSpec};
use crate::numerics::{correlation, mean_var};
use crate::rng::{RngStream, StreamFactory, Substream};
use crate::DistError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FcltError {
    #[error("invalid superposition config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected:.3e} renewals per replication exceeds the cap of {cap:.3e}")]
    MemoryBudgetExceeded { expected: f64, cap: f64 },
    #[error("brownian tests need at least {needed} replications, got {got}")]
    InsufficientReplications { needed: usize, got: usize },
    #[error(transparent)]
    Distribution(#[from] DistError),
}

fn default_true() -> bool {
    true
}

fn default_cap() -> f64 {
    1e8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionConfig {
    pub n: u32,
    pub gamma: f64,
    pub interrenewal: DistSpec,
    pub t_grid: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// First epochs from the equilibrium distribution; `false` starts every
    /// stream with a fresh renewal (non-stationary control).
    #[serde(default = "default_true")]
    pub stationary: bool,
    /// Upper bound on the expected renewals per replication.
    #[serde(default = "default_cap")]
    pub event_cap: f64,
}

impl SuperpositionConfig {
    pub fn new(n: u32, gamma: f64, interrenewal: DistSpec, t_grid: Vec<f64>, replications: usize, seed: u64) -> Self {
        SuperpositionConfig { n, gamma, interrenewal, t_grid, replications, seed, stationary: true, event_cap: default_cap() }
    }

    /// `points` equally spaced grid points on `(0, t_max]`.
    pub fn uniform_grid(t_max: f64, points: usize) -> Vec<f64> {
        (1..=points).map(|k| t_max * k as f64 / points as f64).collect()
    }

    fn mu(&self) -> f64 {
        self.interrenewal.rate()
    }

    pub fn expected_events(&self) -> f64 {
        let t_max = self.t_grid.last().copied().unwrap_or(0.0);
        self.n as f64 * self.gamma * self.mu() * t_max
    }

    pub fn validate(&self) -> Result<(), FcltError> {
        let bad = |m: String| Err(FcltError::InvalidConfig(m));
        if self.n == 0 || self.replications == 0 {
            return bad("n and replications must be positive".into());
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.t_grid.is_empty() || self.t_grid[0] <= 0.0 || self.t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("t_grid must be nonempty, strictly increasing and start above 0".into());
        }
        let expected = self.expected_events();
        if expected > self.event_cap {
            return Err(FcltError::MemoryBudgetExceeded { expected, cap: self.event_cap });
        }
        Ok(())
    }
}

/// Per-stream seeds of one replication, drawn from its master stream.
pub fn stream_seeds(config: &SuperpositionConfig, replication: u64) -> Vec<u64> {
    let mut master = StreamFactory::new(config.seed).stream(replication, Substream::Renewals);
    (0..config.n).map(|_| master.next_u64()).collect()
}

/// Unscaled counts `B_n(gamma t_k)` for the streams seeded by `seeds`.
pub fn superposition_counts(
    config: &SuperpositionConfig,
    equilibrium: &EquilibriumSpec,
    seeds: &[u64],
) -> Vec<u64> {
    let horizon: Vec<f64> = config.t_grid.iter().map(|t| config.gamma * t).collect();
    let end = *horizon.last().expect("validated grid");
    let mut bins = vec![0u64; horizon.len()];
    for &seed in seeds {
        let mut rng = RngStream::seed_from_u64(seed);
        let mut epoch =
            if config.stationary { equilibrium.sample(&mut rng) } else { config.interrenewal.sample(&mut rng) };
        let mut k = 0;
        while epoch <= end {
            while horizon[k] < epoch {
                k += 1;
            }
            bins[k] += 1;
            epoch += config.interrenewal.sample(&mut rng);
        }
    }
    let mut total = 0;
    for b in bins.iter_mut() {
        total += *b;
        *b = total;
    }
    bins
}

/// Per-grid-point moments across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSummary {
    pub t: f64,
    pub mean: f64,
    pub var: f64,
    /// Standard error of `mean`.
    pub se_mean: f64,
    /// Standard error of `var`, from the sample fourth moment.
    pub se_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPathSample {
    pub n: u32,
    pub gamma: f64,
    pub mu: f64,
    pub cs2: f64,
    pub t_grid: Vec<f64>,
    /// `counts[r][k] = B_n(gamma t_k)` in replication `r`.
    pub counts: Vec<Vec<u64>>,
    /// `values[r][k] = B~_n(t_k)` in replication `r`.
    pub values: Vec<Vec<f64>>,
}

impl ScaledPathSample {
    pub fn replications(&self) -> usize {
        self.values.len()
    }

    /// Values of `B~_n(t_k)` across replications.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[k]).collect()
    }

    pub fn summary(&self) -> Vec<GridSummary> {
        (0..self.t_grid.len())
            .map(|k| {
                let col = self.column(k);
                let r = col.len() as f64;
                let (mean, var) = mean_var(&col);
                let m4 = col.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / r;
                GridSummary {
                    t: self.t_grid[k],
                    mean,
                    var,
                    se_mean: (var / r).sqrt(),
                    se_var: ((m4 - var * var * (r - 3.0) / (r - 1.0)) / r).max(0.0).sqrt(),
                }
            })
            .collect()
    }
}

/// Simulates `config.replications` independent superpositions, streaming
/// renewal epochs so memory does not grow with `n gamma`.
pub fn simulate_superposition(config: &SuperpositionConfig) -> Result<ScaledPathSample, FcltError> {
    config.validate()?;
    let equilibrium = EquilibriumSpec::new(config.interrenewal)?;
    let counts: Vec<Vec<u64>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| superposition_counts(config, &equilibrium, &stream_seeds(config, r)))
        .collect();
    let mu = config.mu();
    let scale = (config.n as f64 * config.gamma).sqrt();
    let values = counts
        .iter()
        .map(|row| {
            row.iter()
                .zip(&config.t_grid)
                .map(|(&b, &t)| (b as f64 - config.n as f64 * mu * config.gamma * t) / scale)
                .collect()
        })
        .collect();
    Ok(ScaledPathSample {
        n: config.n,
        gamma: config.gamma,
        mu,
        cs2: config.interrenewal.scv(),
        t_grid: config.t_grid.clone(),
        counts,
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsllnReport {
    /// `sup_k |B_n(gamma t_k) / (n gamma) - mu t_k|` per replication.
    pub sup_deviations: Vec<f64>,
    pub median: f64,
    pub max: f64,
}

/// Fluid-scaled deviation of the superposition from `mu t`.
pub fn fslln_check(config: &SuperpositionConfig) -> Result<FsllnReport, FcltError> {
    let sample = simulate_superposition(config)?;
    Ok(fslln_from_sample(&sample))
}

pub fn fslln_from_sample(sample: &ScaledPathSample) -> FsllnReport {
    let scale = sample.n as f64 * sample.gamma;
    let sup_deviations: Vec<f64> = sample
        .counts
        .iter()
        .map(|row| {
            row.iter()
                .zip(&sample.t_grid)
                .map(|(&b, &t)| (b as f64 / scale - sample.mu * t).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let max = sup_deviations.iter().copied().fold(0.0, f64::max);
    let mut sorted = sup_deviations.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m == 0 {
        0.0
    } else if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    FsllnReport { sup_deviations, median, max }
}

/// Anderson-Darling normality test with mean and variance estimated from
/// the data; returns `(A^2, p-value)` using Stephens' small-sample
/// adjustment.
pub fn anderson_darling_normal(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let (mean, var) = mean_var(xs);
    let sd = var.sqrt();
    let mut z: Vec<f64> = xs.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let lo = crate::numerics::norm_cdf(z[i]).max(1e-300).ln();
        let hi = crate::numerics::norm_sf(z[n - 1 - i]).max(1e-300).ln();
        s += (2.0 * i as f64 + 1.0) * (lo + hi);
    }
    let a2 = -nf - s / nf;
    let a = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if a >= 0.6 {
        (1.2937 - 5.709 * a + 0.0186 * a * a).exp()
    } else if a >= 0.34 {
        (0.9177 - 4.279 * a - 1.38 * a * a).exp()
    } else if a >= 0.2 {
        1.0 - (-8.318 + 42.796 * a - 59.938 * a * a).exp()
    } else {
        1.0 - (-13.436 + 101.14 * a - 223.73 * a * a).exp()
    };
    (a2, p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityResult {
    pub t: f64,
    pub a2: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementTest {
    pub t1: f64,
    pub t2: f64,
    /// Correlation of `B~(t2) - B~(t1)` with `B~(t1)`.
    pub r: f64,
    pub permutation_p_value: f64,
    pub permutations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceSlope {
    pub slope: f64,
    pub intercept: f64,
    /// Limit slope `mu cS2`.
    pub expected: f64,
}

impl VarianceSlope {
    pub fn relative_error(&self) -> f64 {
        (self.slope - self.expected).abs() / self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrownianReport {
    pub replications: usize,
    pub summary: Vec<GridSummary>,
    pub normality: Vec<NormalityResult>,
    pub increments: IncrementTest,
    pub variance_slope: VarianceSlope,
}

pub const MIN_BROWNIAN_REPLICATIONS: usize = 500;

fn nearest_index(grid: &[f64], t: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Normality per grid point, increment-vs-past correlation between the grid
/// points nearest `t1` and `t2`, and the slope of `Var B~(t)` against `t`.
pub fn brownian_tests(
    sample: &ScaledPathSample,
    t1: f64,
    t2: f64,
    permutations: usize,
    seed: u64,
) -> Result<BrownianReport, FcltError> {
    let reps = sample.replications();
    if reps < MIN_BROWNIAN_REPLICATIONS {
        return Err(FcltError::InsufficientReplications { needed: MIN_BROWNIAN_REPLICATIONS, got: reps });
    }
    let (i1, i2) = (nearest_index(&sample.t_grid, t1), nearest_index(&sample.t_grid, t2));
    if i1 >= i2 {
        return Err(FcltError::InvalidConfig(format!("need t1 < t2 on the grid, got {t1} and {t2}")));
    }
    let summary = sample.summary();
    let normality = (0..sample.t_grid.len())
        .map(|k| {
            let (a2, p_value) = anderson_darling_normal(&sample.column(k));
            NormalityResult { t: sample.t_grid[k], a2, p_value }
        })
        .collect();

    let past = sample.column(i1);
    let incr: Vec<f64> = sample.values.iter().map(|row| row[i2] - row[i1]).collect();
    let r = correlation(&incr, &past);
    let mut rng = StreamFactory::new(seed).stream(0, Substream::Auxiliary);
    let mut shuffled = incr.clone();
    let mut extreme = 0;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if correlation(&shuffled, &past).abs() >= r.abs() {
            extreme += 1;
        }
    }
    let increments = IncrementTest {
        t1: sample.t_grid[i1],
        t2: sample.t_grid[i2],
        r,
        permutation_p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
        permutations,
    };

    let ts: Vec<f64> = summary.iter().map(|s| s.t).collect();
    let vs: Vec<f64> = summary.iter().map(|s| s.var).collect();
    let (tm, tv) = mean_var(&ts);
    let vm = vs.iter().sum::<f64>() / vs.len() as f64;
    let slope = if ts.len() > 1 {
        ts.iter().zip(&vs).map(|(t, v)| (t - tm) * (v - vm)).sum::<f64>() / (tv * (ts.len() - 1) as f64)
    } else {
        vs[0] / ts[0]
    };
    let variance_slope = VarianceSlope { slope, intercept: vm - slope * tm, expected: sample.mu * sample.cs2 };

    Ok(BrownianReport { replications: reps, summary, normality, increments, variance_slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(n: u32, gamma: f64, f: DistSpec, reps: usize) -> SuperpositionConfig {
        SuperpositionConfig::new(n, gamma, f, SuperpositionConfig::uniform_grid(1.0, 10), reps, 17)
    }

    #[test]
    fn counts_are_nondecreasing_integers() {
        let s = simulate_superposition(&cfg(20, 5.0, DistSpec::erlang2(1.0).unwrap(), 50)).unwrap();
        for row in &s.counts {
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn reordering_stream_seeds_changes_nothing() {
        let c = cfg(30, 4.0, DistSpec::lognormal(1.0, 1.52).unwrap(), 1);
        let eq = EquilibriumSpec::new(c.interrenewal).unwrap();
        let mut seeds = stream_seeds(&c, 3);
        let a = superposition_counts(&c, &eq, &seeds);
        seeds.shuffle(&mut StreamFactory::new(0).stream(0, Substream::Auxiliary));
        assert_eq!(a, superposition_counts(&c, &eq, &seeds));
    }

    #[test]
    fn deterministic_single_stream_counts_by_hand() {
        // Uniform first epoch u, then renewals at u + 1, u + 2, ...
        let c = SuperpositionConfig::new(1, 1.0, DistSpec::deterministic(1.0).unwrap(), vec![0.5, 2.5, 3.0], 1, 0);
        let eq = EquilibriumSpec::new(c.interrenewal).unwrap();
        let seed = 42;
        let u = eq.sample(&mut RngStream::seed_from_u64(seed));
        let expect = |t: f64| if t < u { 0 } else { ((t - u).floor() as u64) + 1 };
        assert_eq!(superposition_counts(&c, &eq, &[seed]), vec![expect(0.5), expect(2.5), expect(3.0)]);
    }

    #[test]
    fn poisson_case_has_unit_slope() {
        let s = simulate_superposition(&cfg(10, 3.0, DistSpec::exponential(1.0).unwrap(), 4000)).unwrap();
        for g in s.summary() {
            assert!((g.var - g.t).abs() < 4.0 * g.se_var, "{g:?}");
            assert!(g.mean.abs() < 4.0 * g.se_mean, "{g:?}");
        }
    }

    #[test]
    fn deterministic_variance_vanishes_with_time_scaling() {
        // A stationary unit-spaced renewal counts floor(x) or floor(x) + 1
        // points in [0, x], so Var N(x) = f (1 - f) with f the fractional
        // part of x, and Var B~(1) = f (1 - f) / gamma.
        let last = |gamma: f64| {
            let s = simulate_superposition(&cfg(10, gamma, DistSpec::deterministic(1.0).unwrap(), 400)).unwrap();
            *s.summary().last().unwrap()
        };
        for gamma in [2.3, 50.3] {
            let g = last(gamma);
            let exact = 0.21 / gamma;
            assert!((g.var - exact).abs() < 4.0 * g.se_var, "gamma {gamma}: {g:?} vs {exact}");
        }
        assert!(last(50.0).var < 1e-12);
    }

    #[test]
    fn non_stationary_start_shows_up_in_the_mean() {
        let mut c = cfg(100, 1.0, DistSpec::erlang2(1.0).unwrap(), 600);
        c.t_grid = vec![0.25];
        let stat = simulate_superposition(&c).unwrap().summary()[0];
        c.stationary = false;
        let fresh = simulate_superposition(&c).unwrap().summary()[0];
        assert!(stat.mean.abs() < 3.0 * stat.se_mean, "{stat:?}");
        assert!(fresh.mean < -6.0 * fresh.se_mean, "{fresh:?}");
    }

    #[test]
    fn fslln_deviation_shrinks() {
        let mut c = cfg(50, 5.0, DistSpec::erlang2(1.0).unwrap(), 201);
        c.t_grid = SuperpositionConfig::uniform_grid(2.0, 20);
        let small = fslln_check(&c).unwrap().median;
        c.n = 800;
        let large = fslln_check(&c).unwrap().median;
        // Deviations scale like 1/sqrt(n gamma): a factor of 4 here.
        let ratio = small / large;
        assert!(ratio > 3.0 && ratio < 5.3, "{small} {large}");
    }

    #[test]
    fn budget_and_config_errors() {
        let mut c = cfg(1000, 1e6, DistSpec::exponential(1.0).unwrap(), 2);
        assert!(matches!(simulate_superposition(&c), Err(FcltError::MemoryBudgetExceeded { .. })));
        c.gamma = 1.0;
        c.t_grid = vec![0.0, 1.0];
        assert!(matches!(simulate_superposition(&c), Err(FcltError::InvalidConfig(_))));
        let s = simulate_superposition(&cfg(5, 1.0, DistSpec::exponential(1.0).unwrap(), 10)).unwrap();
        assert!(matches!(brownian_tests(&s, 0.5, 1.0, 10, 0), Err(FcltError::InsufficientReplications { .. })));
    }

    #[test]
    fn anderson_darling_separates_normal_from_exponential() {
        let mut rng = StreamFactory::new(3).stream(0, Substream::Auxiliary);
        let normal: Vec<f64> = (0..1000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let expo: Vec<f64> = (0..1000).map(|_| rng.sample(rand_distr::Exp1)).collect();
        assert!(anderson_darling_normal(&normal).1 > 0.01);
        assert!(anderson_darling_normal(&expo).1 < 1e-6);
    }

    #[test]
    fn anderson_darling_reference_statistic() {
        // A^2 for 1..=10 with estimated mean and sample sd, as reported by scipy.
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let (a2, p) = anderson_darling_normal(&xs);
        assert!((a2 - 0.14111).abs() < 5e-5, "{a2}");
        assert!(p > 0.9);
    }
}
