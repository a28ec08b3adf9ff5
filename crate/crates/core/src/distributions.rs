//! Parametric lifetime distributions (interarrival, service and patience
//! times) and their equilibrium (stationary residual-life) distributions.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{bracketed_root, norm_cdf, norm_pdf, norm_sf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("invalid parameters for {family:?}: {reason}")]
    InvalidParams { family: Family, reason: String },
    #[error("{0:?} has no density; hazard rate is undefined")]
    UnsupportedFamily(Family),
    #[error("survival probability at t = {0} underflows")]
    DomainError(f64),
    #[error("equilibrium inverse CDF did not converge at probability {0}")]
    TabulationFailure(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Deterministic,
    Exponential,
    Erlang2,
    Lognormal,
    Hyperexp2,
}

impl Family {
    /// Short Kendall-style label: D, M, E2, LN, H2.
    pub fn label(self) -> &'static str {
        match self {
            Family::Deterministic => "D",
            Family::Exponential => "M",
            Family::Erlang2 => "E2",
            Family::Lognormal => "LN",
            Family::Hyperexp2 => "H2",
        }
    }
}

/// Family-native parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistParams {
    Deterministic { value: f64 },
    Exponential { rate: f64 },
    /// Two exponential stages, each with rate `stage_rate`.
    Erlang2 { stage_rate: f64 },
    /// `ln X ~ Normal(mu_log, sigma_log^2)`.
    Lognormal { mu_log: f64, sigma_log: f64 },
    /// Branch `i` chosen with probability `probs[i]`, then Exp(`rates[i]`).
    Hyperexp2 { probs: [f64; 2], rates: [f64; 2] },
}

/// A validated distribution together with its first two moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistSpec {
    params: DistParams,
    mean: f64,
    scv: f64,
}

fn invalid(family: Family, reason: impl Into<String>) -> DistError {
    DistError::InvalidParams { family, reason: reason.into() }
}

fn check_positive(family: Family, what: &str, v: f64) -> Result<(), DistError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(family, format!("{what} must be positive and finite, got {v}")))
    }
}

impl DistSpec {
    /// Builds a distribution from a family and a flat parameter list.
    ///
    /// | family        | params                    |
    /// |---------------|---------------------------|
    /// | Deterministic | `[mean]`                  |
    /// | Exponential   | `[mean]`                  |
    /// | Erlang2       | `[mean]`                  |
    /// | Lognormal     | `[mean, scv]`             |
    /// | Hyperexp2     | `[p1, mean1, mean2]`      |
    pub fn make(family: Family, params: &[f64]) -> Result<DistSpec, DistError> {
        let want = match family {
            Family::Deterministic | Family::Exponential | Family::Erlang2 => 1,
            Family::Lognormal => 2,
            Family::Hyperexp2 => 3,
        };
        if params.len() != want {
            return Err(invalid(family, format!("expected {want} parameters, got {}", params.len())));
        }
        match family {
            Family::Deterministic => Self::deterministic(params[0]),
            Family::Exponential => Self::exponential(params[0]),
            Family::Erlang2 => Self::erlang2(params[0]),
            Family::Lognormal => Self::lognormal(params[0], params[1]),
            Family::Hyperexp2 => Self::hyperexp2(params[0], params[1], params[2]),
        }
    }

    pub fn deterministic(value: f64) -> Result<DistSpec, DistError> {
        check_positive(Family::Deterministic, "value", value)?;
        Ok(DistSpec { params: DistParams::Deterministic { value }, mean: value, scv: 0.0 })
    }

    pub fn exponential(mean: f64) -> Result<DistSpec, DistError> {
        check_positive(Family::Exponential, "mean", mean)?;
        Ok(DistSpec { params: DistParams::Exponential { rate: 1.0 / mean }, mean, scv: 1.0 })
    }

    /// Erlang with two stages; each stage has rate `2 / mean`, so the SCV is 1/2.
    pub fn erlang2(mean: f64) -> Result<DistSpec, DistError> {
        check_positive(Family::Erlang2, "mean", mean)?;
        Ok(DistSpec { params: DistParams::Erlang2 { stage_rate: 2.0 / mean }, mean, scv: 0.5 })
    }

    /// Log-normal matched to the given mean and SCV:
    /// `sigma_log^2 = ln(1 + scv)`, `mu_log = ln(mean) - sigma_log^2 / 2`.
    pub fn lognormal(mean: f64, scv: f64) -> Result<DistSpec, DistError> {
        check_positive(Family::Lognormal, "mean", mean)?;
        check_positive(Family::Lognormal, "scv", scv)?;
        let s2 = scv.ln_1p();
        Ok(DistSpec {
            params: DistParams::Lognormal { mu_log: mean.ln() - 0.5 * s2, sigma_log: s2.sqrt() },
            mean,
            scv,
        })
    }

    /// Two-branch hyperexponential with branch probabilities `(p1, 1 - p1)`
    /// and branch means `mean1`, `mean2`.
    pub fn hyperexp2(p1: f64, mean1: f64, mean2: f64) -> Result<DistSpec, DistError> {
        let fam = Family::Hyperexp2;
        if !(0.0..=1.0).contains(&p1) {
            return Err(invalid(fam, format!("branch probability {p1} outside [0, 1]")));
        }
        check_positive(fam, "mean1", mean1)?;
        check_positive(fam, "mean2", mean2)?;
        let probs = [p1, 1.0 - p1];
        let means = [mean1, mean2];
        let mean = probs[0] * means[0] + probs[1] * means[1];
        let second = 2.0 * (probs[0] * means[0] * means[0] + probs[1] * means[1] * means[1]);
        let scv = second / (mean * mean) - 1.0;
        Ok(DistSpec {
            params: DistParams::Hyperexp2 { probs, rates: [1.0 / mean1, 1.0 / mean2] },
            mean,
            scv,
        })
    }

    pub fn family(&self) -> Family {
        match self.params {
            DistParams::Deterministic { .. } => Family::Deterministic,
            DistParams::Exponential { .. } => Family::Exponential,
            DistParams::Erlang2 { .. } => Family::Erlang2,
            DistParams::Lognormal { .. } => Family::Lognormal,
            DistParams::Hyperexp2 { .. } => Family::Hyperexp2,
        }
    }

    pub fn params(&self) -> &DistParams {
        &self.params
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Squared coefficient of variation.
    pub fn scv(&self) -> f64 {
        self.scv
    }

    /// `1 / mean`.
    pub fn rate(&self) -> f64 {
        1.0 / self.mean
    }

    /// Mean and SCV recomputed from the native parameters.
    pub fn analytic_moments(&self) -> (f64, f64) {
        let (m1, m2) = (self.raw_moment(1), self.raw_moment(2));
        (m1, m2 / (m1 * m1) - 1.0)
    }

    /// `E[X^k]` for `k` in 1..=3.
    pub fn raw_moment(&self, k: u32) -> f64 {
        let kf = k as f64;
        match self.params {
            DistParams::Deterministic { value } => value.powi(k as i32),
            DistParams::Exponential { rate } => factorial(k) / rate.powi(k as i32),
            DistParams::Erlang2 { stage_rate } => factorial(k + 1) / stage_rate.powi(k as i32),
            DistParams::Lognormal { mu_log, sigma_log } => {
                (kf * mu_log + 0.5 * kf * kf * sigma_log * sigma_log).exp()
            }
            DistParams::Hyperexp2 { probs, rates } => {
                factorial(k) * (probs[0] / rates[0].powi(k as i32) + probs[1] / rates[1].powi(k as i32))
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self.params {
            DistParams::Lognormal { mu_log, sigma_log } => norm_cdf((t.ln() - mu_log) / sigma_log),
            _ => 1.0 - self.survival(t),
        }
    }

    /// `1 - F(t)`.
    pub fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        match self.params {
            DistParams::Deterministic { value } => {
                if t < value {
                    1.0
                } else {
                    0.0
                }
            }
            DistParams::Exponential { rate } => (-rate * t).exp(),
            DistParams::Erlang2 { stage_rate: r } => (-r * t).exp() * (1.0 + r * t),
            DistParams::Lognormal { mu_log, sigma_log } => norm_sf((t.ln() - mu_log) / sigma_log),
            DistParams::Hyperexp2 { probs, rates } => {
                probs[0] * (-rates[0] * t).exp() + probs[1] * (-rates[1] * t).exp()
            }
        }
    }

    /// Density; zero everywhere for the deterministic family.
    pub fn pdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self.params {
            DistParams::Deterministic { .. } => 0.0,
            DistParams::Exponential { rate } => rate * (-rate * t).exp(),
            DistParams::Erlang2 { stage_rate: r } => r * r * t * (-r * t).exp(),
            DistParams::Lognormal { mu_log, sigma_log } => {
                if t == 0.0 {
                    0.0
                } else {
                    norm_pdf((t.ln() - mu_log) / sigma_log) / (t * sigma_log)
                }
            }
            DistParams::Hyperexp2 { probs, rates } => {
                probs[0] * rates[0] * (-rates[0] * t).exp() + probs[1] * rates[1] * (-rates[1] * t).exp()
            }
        }
    }

    /// Hazard rate `f(t) / (1 - F(t))`.
    pub fn hazard(&self, t: f64) -> Result<f64, DistError> {
        let t = t.max(0.0);
        match self.params {
            DistParams::Deterministic { .. } => Err(DistError::UnsupportedFamily(Family::Deterministic)),
            DistParams::Exponential { rate } => Ok(rate),
            DistParams::Erlang2 { stage_rate: r } => Ok(r * r * t / (1.0 + r * t)),
            _ => {
                let s = self.survival(t);
                if s < 1e-300 {
                    return Err(DistError::DomainError(t));
                }
                Ok(self.pdf(t) / s)
            }
        }
    }

    /// `int_0^t (1 - F(u)) du`, in closed form for every family.
    pub fn integrated_survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self.params {
            DistParams::Deterministic { value } => t.min(value),
            DistParams::Exponential { rate } => -(-rate * t).exp_m1() / rate,
            DistParams::Erlang2 { stage_rate: r } => {
                -2.0 * (-r * t).exp_m1() / r - t * (-r * t).exp()
            }
            DistParams::Lognormal { mu_log, sigma_log } => {
                let z = (t.ln() - mu_log) / sigma_log;
                t * norm_sf(z) + self.mean * norm_cdf(z - sigma_log)
            }
            DistParams::Hyperexp2 { probs, rates } => {
                -probs[0] * (-rates[0] * t).exp_m1() / rates[0] - probs[1] * (-rates[1] * t).exp_m1() / rates[1]
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.params {
            DistParams::Deterministic { value } => value,
            DistParams::Exponential { rate } => rng.sample::<f64, _>(Exp1) / rate,
            DistParams::Erlang2 { stage_rate } => {
                (rng.sample::<f64, _>(Exp1) + rng.sample::<f64, _>(Exp1)) / stage_rate
            }
            DistParams::Lognormal { mu_log, sigma_log } => {
                (mu_log + sigma_log * rng.sample::<f64, _>(StandardNormal)).exp()
            }
            DistParams::Hyperexp2 { probs, rates } => {
                let branch = if rng.random::<f64>() < probs[0] { 0 } else { 1 };
                rng.sample::<f64, _>(Exp1) / rates[branch]
            }
        }
    }

    /// The equilibrium distribution `F_e(t) = mu int_0^t (1 - F(u)) du`.
    pub fn equilibrium(&self) -> Result<EquilibriumSpec, DistError> {
        EquilibriumSpec::new(*self)
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// A continuous lifetime law; the interface the general-patience
/// approximation needs. Implemented by [`DistSpec`]; tests and callers can
/// supply other laws.
pub trait Lifetime {
    fn cdf(&self, t: f64) -> f64;
    fn pdf(&self, t: f64) -> f64;
    fn survival(&self, t: f64) -> f64 {
        1.0 - self.cdf(t)
    }
    /// `lim_{t -> inf} F(t)`; below 1 for defective laws.
    fn total_mass(&self) -> f64 {
        1.0
    }
    fn hazard(&self, t: f64) -> Result<f64, DistError> {
        let s = self.survival(t);
        if s < 1e-300 {
            return Err(DistError::DomainError(t));
        }
        Ok(self.pdf(t) / s)
    }
    fn has_density(&self) -> bool {
        true
    }
    fn mean(&self) -> f64;
}

impl Lifetime for DistSpec {
    fn cdf(&self, t: f64) -> f64 {
        DistSpec::cdf(self, t)
    }
    fn pdf(&self, t: f64) -> f64 {
        DistSpec::pdf(self, t)
    }
    fn survival(&self, t: f64) -> f64 {
        DistSpec::survival(self, t)
    }
    fn hazard(&self, t: f64) -> Result<f64, DistError> {
        DistSpec::hazard(self, t)
    }
    fn has_density(&self) -> bool {
        self.family() != Family::Deterministic
    }
    fn mean(&self) -> f64 {
        self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    ClosedForm,
    TabulatedInverseCdf,
}

/// Equilibrium distribution of a base [`DistSpec`], with a sampler.
#[derive(Debug, Clone)]
pub struct EquilibriumSpec {
    base: DistSpec,
    mean_e: f64,
    var_e: f64,
    sampler: EqSampler,
}

#[derive(Debug, Clone)]
enum EqSampler {
    Uniform { upper: f64 },
    Same,
    /// Equal mixture of Exp(r) and Erlang2(r).
    ErlangMix { stage_rate: f64 },
    Hyperexp { probs: [f64; 2], rates: [f64; 2] },
    Table(InverseCdfTable),
}

impl EquilibriumSpec {
    /// Uses the closed-form sampler when one exists, the tabulated inverse
    /// CDF otherwise (log-normal).
    pub fn new(base: DistSpec) -> Result<EquilibriumSpec, DistError> {
        let sampler = match *base.params() {
            DistParams::Deterministic { value } => EqSampler::Uniform { upper: value },
            DistParams::Exponential { .. } => EqSampler::Same,
            DistParams::Erlang2 { stage_rate } => EqSampler::ErlangMix { stage_rate },
            DistParams::Hyperexp2 { probs, rates } => {
                let mu = base.rate();
                let q0 = mu * probs[0] / rates[0];
                EqSampler::Hyperexp { probs: [q0, 1.0 - q0], rates }
            }
            DistParams::Lognormal { .. } => EqSampler::Table(InverseCdfTable::build(&base)?),
        };
        Ok(Self::with_sampler(base, sampler))
    }

    /// Forces the tabulated inverse-CDF sampler regardless of family.
    pub fn tabulated(base: DistSpec) -> Result<EquilibriumSpec, DistError> {
        let table = InverseCdfTable::build(&base)?;
        Ok(Self::with_sampler(base, EqSampler::Table(table)))
    }

    fn with_sampler(base: DistSpec, sampler: EqSampler) -> EquilibriumSpec {
        let mu = base.rate();
        let mean_e = (1.0 + base.scv()) / (2.0 * mu);
        let second_e = mu * base.raw_moment(3) / 3.0;
        EquilibriumSpec { base, mean_e, var_e: (second_e - mean_e * mean_e).max(0.0), sampler }
    }

    pub fn base(&self) -> &DistSpec {
        &self.base
    }

    /// `(1 + scv) / (2 mu)`.
    pub fn mean_e(&self) -> f64 {
        self.mean_e
    }

    pub fn var_e(&self) -> f64 {
        self.var_e
    }

    pub fn sampler_kind(&self) -> SamplerKind {
        match self.sampler {
            EqSampler::Table(_) => SamplerKind::TabulatedInverseCdf,
            _ => SamplerKind::ClosedForm,
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        (self.base.rate() * self.base.integrated_survival(t)).min(1.0)
    }

    /// Equilibrium density `mu (1 - F(t))`.
    pub fn pdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.base.rate() * self.base.survival(t)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.sampler {
            EqSampler::Uniform { upper } => upper * rng.random::<f64>(),
            EqSampler::Same => self.base.sample(rng),
            EqSampler::ErlangMix { stage_rate } => {
                let first: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    first / stage_rate
                } else {
                    (first + rng.sample::<f64, _>(Exp1)) / stage_rate
                }
            }
            EqSampler::Hyperexp { probs, rates } => {
                let branch = if rng.random::<f64>() < probs[0] { 0 } else { 1 };
                rng.sample::<f64, _>(Exp1) / rates[branch]
            }
            EqSampler::Table(table) => table.sample(rng),
        }
    }
}

const MIN_KNOTS: usize = 4096;
const MAX_KNOTS: usize = 1 << 18;
const TAIL_MASS: f64 = 1e-9;
const INVERSION_TOL: f64 = 1e-10;
const INTERP_TOL: f64 = 1e-6;

/// Piecewise-linear inverse of `F_e`, knots placed adaptively in probability.
#[derive(Debug, Clone)]
struct InverseCdfTable {
    probs: Vec<f64>,
    times: Vec<f64>,
}

impl InverseCdfTable {
    fn build(base: &DistSpec) -> Result<InverseCdfTable, DistError> {
        let mu = base.rate();
        let invert = |u: f64, lo_hint: f64| -> Result<f64, DistError> {
            if u <= 0.0 {
                return Ok(0.0);
            }
            let mut hi = lo_hint.max(base.mean()).max(1e-300) * 2.0;
            while mu * base.integrated_survival(hi) < u {
                hi *= 2.0;
                if !hi.is_finite() {
                    return Err(DistError::TabulationFailure(u));
                }
            }
            let g = |t: f64| mu * base.integrated_survival(t) - u;
            let dg = |t: f64| mu * base.survival(t);
            let t = bracketed_root(g, dg, lo_hint.min(hi), hi, 1e-15, INVERSION_TOL * 1e-2)
                .ok_or(DistError::TabulationFailure(u))?;
            if g(t).abs() > INVERSION_TOL {
                return Err(DistError::TabulationFailure(u));
            }
            Ok(t)
        };

        let top = 1.0 - TAIL_MASS;
        let mut probs: Vec<f64> = (0..MIN_KNOTS).map(|k| k as f64 / MIN_KNOTS as f64).collect();
        // Geometric knots into the upper tail.
        let mut gap = 1.0 / MIN_KNOTS as f64;
        loop {
            gap *= 0.5;
            let u = 1.0 - gap;
            if u >= top {
                probs.push(top);
                break;
            }
            probs.push(u);
        }
        let mut times = Vec::with_capacity(probs.len());
        let mut prev = 0.0;
        for &u in &probs {
            let t = invert(u, prev)?;
            times.push(t);
            prev = t;
        }

        // Refine intervals whose midpoint interpolation error is too large.
        loop {
            let mut new_probs = Vec::with_capacity(probs.len() * 2);
            let mut new_times = Vec::with_capacity(probs.len() * 2);
            let mut refined = false;
            for i in 0..probs.len() {
                new_probs.push(probs[i]);
                new_times.push(times[i]);
                if i + 1 == probs.len() {
                    break;
                }
                let um = 0.5 * (probs[i] + probs[i + 1]);
                let tm = invert(um, times[i])?;
                let interp = 0.5 * (times[i] + times[i + 1]);
                if (interp - tm).abs() > INTERP_TOL * (1.0 + tm) {
                    new_probs.push(um);
                    new_times.push(tm);
                    refined = true;
                }
            }
            probs = new_probs;
            times = new_times;
            if !refined || probs.len() > MAX_KNOTS {
                break;
            }
        }
        Ok(InverseCdfTable { probs, times })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let last = self.probs.len() - 1;
        if u >= self.probs[last] {
            return self.times[last];
        }
        let hi = self.probs.partition_point(|&p| p <= u);
        let lo = hi - 1;
        let w = (u - self.probs[lo]) / (self.probs[hi] - self.probs[lo]);
        self.times[lo] + w * (self.times[hi] - self.times[lo])
    }
}

/// Configuration-file representation: either moment form
/// `{ family, mean, scv }` or family-native parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistConfig {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_log: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_log: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<[f64; 2]>,
}

impl DistConfig {
    fn empty(family: Family) -> DistConfig {
        DistConfig { family, mean: None, scv: None, rate: None, mu_log: None, sigma_log: None, probs: None, means: None }
    }
}

impl TryFrom<DistConfig> for DistSpec {
    type Error = DistError;

    fn try_from(c: DistConfig) -> Result<DistSpec, DistError> {
        let fam = c.family;
        let missing = |what: &str| invalid(fam, format!("missing `{what}`"));
        let mean_or_rate = || -> Result<f64, DistError> {
            match (c.mean, c.rate) {
                (Some(m), None) => Ok(m),
                (None, Some(r)) if r > 0.0 => Ok(1.0 / r),
                (None, Some(r)) => Err(invalid(fam, format!("rate must be positive, got {r}"))),
                (Some(_), Some(_)) => Err(invalid(fam, "give either `mean` or `rate`, not both")),
                (None, None) => Err(missing("mean")),
            }
        };
        let spec = match fam {
            Family::Deterministic => Self::deterministic(mean_or_rate()?)?,
            Family::Exponential => Self::exponential(mean_or_rate()?)?,
            Family::Erlang2 => Self::erlang2(mean_or_rate()?)?,
            Family::Lognormal => match (c.mu_log, c.sigma_log) {
                (Some(m), Some(s)) => {
                    check_positive(fam, "sigma_log", s)?;
                    let scv = (s * s).exp_m1();
                    let mean = (m + 0.5 * s * s).exp();
                    DistSpec { params: DistParams::Lognormal { mu_log: m, sigma_log: s }, mean, scv }
                }
                (None, None) => Self::lognormal(c.mean.ok_or_else(|| missing("mean"))?, c.scv.ok_or_else(|| missing("scv"))?)?,
                _ => return Err(invalid(fam, "give both `mu_log` and `sigma_log`")),
            },
            Family::Hyperexp2 => {
                let p = c.probs.ok_or_else(|| missing("probs"))?;
                let m = c.means.ok_or_else(|| missing("means"))?;
                if (p[0] + p[1] - 1.0).abs() > 1e-12 {
                    return Err(invalid(fam, format!("branch probabilities sum to {}", p[0] + p[1])));
                }
                Self::hyperexp2(p[0], m[0], m[1])?
            }
        };
        if let (Some(scv), Family::Deterministic | Family::Exponential | Family::Erlang2) = (c.scv, fam) {
            if (scv - spec.scv).abs() > 1e-12 {
                return Err(invalid(fam, format!("scv {scv} is fixed at {} for this family", spec.scv)));
            }
        }
        Ok(spec)
    }
}

impl From<&DistSpec> for DistConfig {
    fn from(d: &DistSpec) -> DistConfig {
        let mut c = DistConfig::empty(d.family());
        match d.params {
            DistParams::Hyperexp2 { probs, rates } => {
                c.probs = Some(probs);
                c.means = Some([1.0 / rates[0], 1.0 / rates[1]]);
            }
            _ => {
                c.mean = Some(d.mean);
                if d.family() == Family::Lognormal {
                    c.scv = Some(d.scv);
                }
            }
        }
        c
    }
}

impl Serialize for DistSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        DistConfig::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DistSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<DistSpec, D::Error> {
        let c = DistConfig::deserialize(d)?;
        DistSpec::try_from(c).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{integrate, integrate_to_infinity, mean_var};
    use crate::rng::{StreamFactory, Substream};

    fn h2_two_class() -> DistSpec {
        DistSpec::hyperexp2(0.6741, 0.1484, 2.761).unwrap()
    }

    fn all_families() -> Vec<DistSpec> {
        vec![
            DistSpec::deterministic(1.0).unwrap(),
            DistSpec::exponential(2.0).unwrap(),
            DistSpec::erlang2(1.0).unwrap(),
            DistSpec::lognormal(1.0, 1.52).unwrap(),
            h2_two_class(),
        ]
    }

    #[test]
    fn lognormal_log_parameters() {
        let d = DistSpec::lognormal(1.0, 1.52).unwrap();
        let DistParams::Lognormal { mu_log, sigma_log } = *d.params() else { panic!() };
        assert!((sigma_log * sigma_log - 2.52f64.ln()).abs() < 1e-15);
        assert!((sigma_log * sigma_log - 0.924_258_9).abs() < 1e-6);
        assert!((mu_log + 0.462_129_4).abs() < 1e-6);
    }

    #[test]
    fn derived_moments_match_analytic() {
        for d in all_families() {
            let (m, c) = d.analytic_moments();
            assert!(((m - d.mean()) / d.mean()).abs() < 1e-12, "{d:?}");
            if d.scv() == 0.0 {
                assert!(c.abs() < 1e-12);
            } else {
                assert!(((c - d.scv()) / d.scv()).abs() < 1e-12, "{d:?}");
            }
        }
    }

    #[test]
    fn samples_pass_kolmogorov_smirnov() {
        let draws = 100_000;
        // Asymptotic 1% critical value.
        let critical = 1.6276 / (draws as f64).sqrt();
        for (k, d) in all_families().into_iter().enumerate() {
            if d.scv() == 0.0 {
                continue;
            }
            let mut rng = StreamFactory::new(31).stream(k as u64, Substream::Auxiliary);
            let mut xs: Vec<f64> = (0..draws).map(|_| d.sample(&mut rng)).collect();
            xs.sort_by(f64::total_cmp);
            let n = draws as f64;
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = d.cdf(x);
                    (f - i as f64 / n).max((i + 1) as f64 / n - f)
                })
                .fold(0.0, f64::max);
            assert!(ks < critical, "{d:?}: {ks} >= {critical}");
        }
    }

    #[test]
    fn hyperexp_moments() {
        let d = h2_two_class();
        assert!((d.mean() - 1.0).abs() < 2e-4);
        assert!((d.scv() - 4.0).abs() < 1e-3);
        assert_eq!(d.family(), Family::Hyperexp2);
    }

    #[test]
    fn deterministic_has_zero_scv_and_constant_samples() {
        let d = DistSpec::make(Family::Deterministic, &[1.0]).unwrap();
        assert_eq!(d.scv(), 0.0);
        let mut rng = StreamFactory::new(1).stream(0, Substream::Services);
        assert!((0..100).all(|_| d.sample(&mut rng) == 1.0));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(DistSpec::exponential(0.0).is_err());
        assert!(DistSpec::erlang2(-1.0).is_err());
        assert!(DistSpec::lognormal(1.0, 0.0).is_err());
        assert!(DistSpec::lognormal(1.0, -0.5).is_err());
        assert!(DistSpec::hyperexp2(1.2, 1.0, 1.0).is_err());
        assert!(DistSpec::hyperexp2(0.5, 0.0, 1.0).is_err());
        assert!(DistSpec::make(Family::Lognormal, &[1.0]).is_err());
        assert!(DistSpec::deterministic(f64::NAN).is_err());
    }

    #[test]
    fn survival_integrates_to_mean() {
        for d in all_families() {
            let numeric = match d.family() {
                Family::Deterministic => integrate(|t| d.survival(t), 0.0, 1.0, 1e-12, 0.0),
                _ => integrate_to_infinity(|t| d.survival(t), 0.0, 1e-11, 0.0),
            };
            assert!((numeric * d.rate() - 1.0).abs() < 1e-8, "{:?}: {numeric}", d.family());
        }
    }

    #[test]
    fn integrated_survival_matches_quadrature() {
        for d in all_families() {
            for &t in &[0.1, 0.7, 1.3, 4.0] {
                let q = integrate(|u| d.survival(u), 0.0, t, 1e-12, 0.0);
                assert!((q - d.integrated_survival(t)).abs() < 1e-9, "{:?} t={t}", d.family());
            }
        }
    }

    #[test]
    fn hazard_values() {
        let e = DistSpec::exponential(10.0).unwrap();
        for k in 0..50 {
            assert_eq!(e.hazard(k as f64 * 0.37).unwrap(), 0.1);
        }
        let e2 = DistSpec::erlang2(1.0).unwrap();
        assert_eq!(e2.hazard(0.0).unwrap(), 0.0);
        assert!(e2.hazard(1e-9).unwrap() < 1e-8);
        let h0 = h2_two_class().hazard(0.0).unwrap();
        let direct = 0.6741 / 0.1484 + 0.3259 / 2.761;
        assert!((h0 - direct).abs() < 1e-12);
        assert!((h0 - 4.660).abs() < 1e-3);
        assert_eq!(
            DistSpec::deterministic(1.0).unwrap().hazard(0.5),
            Err(DistError::UnsupportedFamily(Family::Deterministic))
        );
        assert!(matches!(
            DistSpec::lognormal(1.0, 0.1).unwrap().hazard(1e6),
            Err(DistError::DomainError(_))
        ));
    }

    #[test]
    fn equilibrium_cdf_shape() {
        for d in all_families() {
            let eq = d.equilibrium().unwrap();
            assert_eq!(eq.cdf(0.0), 0.0);
            assert!((eq.cdf(1e4) - 1.0).abs() < 1e-12);
            let mut prev = 0.0;
            for k in 1..200 {
                let v = eq.cdf(k as f64 * 0.05);
                assert!(v >= prev);
                prev = v;
            }
            assert!((eq.mean_e() - (1.0 + d.scv()) * d.mean() / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equilibrium_sampler_kinds() {
        assert_eq!(DistSpec::erlang2(1.0).unwrap().equilibrium().unwrap().sampler_kind(), SamplerKind::ClosedForm);
        assert_eq!(
            DistSpec::lognormal(1.0, 1.52).unwrap().equilibrium().unwrap().sampler_kind(),
            SamplerKind::TabulatedInverseCdf
        );
    }

    #[test]
    fn closed_form_equilibrium_samplers_match_moments() {
        // Closed forms checked against the first two moments of F_e.
        let f = StreamFactory::new(11);
        for (i, d) in all_families().into_iter().enumerate() {
            if d.family() == Family::Lognormal {
                continue;
            }
            let eq = d.equilibrium().unwrap();
            let mut rng = f.stream(i as u64, Substream::Initial);
            let xs: Vec<f64> = (0..200_000).map(|_| eq.sample(&mut rng)).collect();
            let (m, v) = mean_var(&xs);
            let se = (eq.var_e() / xs.len() as f64).sqrt();
            assert!((m - eq.mean_e()).abs() < 4.0 * se, "{:?}: {m} vs {}", d.family(), eq.mean_e());
            assert!((v / eq.var_e() - 1.0).abs() < 0.05, "{:?}", d.family());
        }
    }

    #[test]
    fn config_forms_round_trip() {
        for d in all_families() {
            let text = toml::to_string(&d).unwrap();
            let back: DistSpec = toml::from_str(&text).unwrap();
            assert_eq!(back, d, "{text}");
        }
        let native: DistSpec = toml::from_str("family = \"exponential\"\nrate = 0.5").unwrap();
        assert_eq!(native, DistSpec::exponential(2.0).unwrap());
        let ln: DistSpec = toml::from_str("family = \"lognormal\"\nmu_log = 0.0\nsigma_log = 1.0").unwrap();
        assert!((ln.mean() - 0.5f64.exp()).abs() < 1e-15);
        assert!(toml::from_str::<DistSpec>("family = \"erlang2\"\nmean = 1.0\nscv = 0.7").is_err());
        assert!(toml::from_str::<DistSpec>("family = \"hyperexp2\"\nprobs = [0.5, 0.6]\nmeans = [1.0, 2.0]").is_err());
    }
}
