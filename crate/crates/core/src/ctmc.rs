//! Exact stationary distribution of `M/M/n+M` and `M/H2/n+M` on a truncated
//! state space.
//!
//! A state is `(X, k1)`: `X` customers in system and `k1` servers busy with
//! a phase-1 service (`k2 = min(X, n) - k1`). Only adjacent levels `X` are
//! connected, so the chain is block tridiagonal and is solved exactly by
//! eliminating levels from the truncation point downwards.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::des::QueueModel;
use crate::diffusion::GaussianApprox;
use crate::distributions::{DistParams, Family};
use crate::numerics::norm_sf;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtmcError {
    #[error("unsupported model: {0}")]
    Unsupported(String),
    #[error("truncation level {level} too small: estimated mass beyond it is {mass:.3e}")]
    TruncationTooSmall { level: u32, mass: f64 },
    #[error("singular system at level {0}")]
    SingularSystem(u32),
    #[error("iterative solve did not reach residual {target:.1e} in {iterations} sweeps (got {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64, target: f64 },
}

/// Service time as a mixture of one or two exponential phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ServicePhases {
    Exponential { rate: f64 },
    Hyperexp2 { p1: f64, rate1: f64, rate2: f64 },
}

impl ServicePhases {
    fn phases(&self) -> usize {
        match self {
            ServicePhases::Exponential { .. } => 1,
            ServicePhases::Hyperexp2 { .. } => 2,
        }
    }

    fn split(&self) -> (f64, f64, f64) {
        match *self {
            ServicePhases::Exponential { rate } => (1.0, rate, rate),
            ServicePhases::Hyperexp2 { p1, rate1, rate2 } => (p1, rate1, rate2),
        }
    }

    pub fn mean(&self) -> f64 {
        let (p1, r1, r2) = self.split();
        p1 / r1 + (1.0 - p1) / r2
    }

    pub fn scv(&self) -> f64 {
        let (p1, r1, r2) = self.split();
        let m2 = 2.0 * (p1 / (r1 * r1) + (1.0 - p1) / (r2 * r2));
        let m = self.mean();
        m2 / (m * m) - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtmcModel {
    pub n: u32,
    pub lambda: f64,
    pub gamma: f64,
    pub service: ServicePhases,
    pub truncation: u32,
}

impl CtmcModel {
    /// Uses the default truncation `n + ceil(q + 12 sigma_Q)`.
    pub fn new(n: u32, lambda: f64, gamma: f64, service: ServicePhases) -> Result<CtmcModel, CtmcError> {
        if n == 0 || !(lambda > 0.0) || !(gamma > 0.0) {
            return Err(CtmcError::Unsupported(format!("n = {n}, lambda = {lambda}, gamma = {gamma}")));
        }
        let mut model = CtmcModel { n, lambda, gamma, service, truncation: 0 };
        model.truncation = model.default_truncation();
        Ok(model)
    }

    pub fn with_truncation(mut self, level: u32) -> CtmcModel {
        self.truncation = level;
        self
    }

    /// Poisson arrivals, exponential patience, exponential or two-phase
    /// hyperexponential service.
    pub fn from_queue(model: &QueueModel) -> Result<CtmcModel, CtmcError> {
        if model.arrival.family() != Family::Exponential || model.patience.family() != Family::Exponential {
            return Err(CtmcError::Unsupported(format!("{} needs Poisson arrivals and exponential patience", model.label())));
        }
        let service = match *model.service.params() {
            DistParams::Exponential { rate } => ServicePhases::Exponential { rate },
            DistParams::Hyperexp2 { probs, rates } => {
                ServicePhases::Hyperexp2 { p1: probs[0], rate1: rates[0], rate2: rates[1] }
            }
            _ => return Err(CtmcError::Unsupported(format!("{} service", model.service.family().label()))),
        };
        CtmcModel::new(model.servers, model.lambda(), model.gamma(), service)
    }

    fn mu(&self) -> f64 {
        1.0 / self.service.mean()
    }

    /// Diffusion estimates `(q, sigma_Q)`, with `q` clipped at 0.
    fn diffusion_scale(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mu = self.mu();
        let rho = self.lambda / (n * mu);
        let q = (n * mu * (rho - 1.0) * self.gamma).max(0.0);
        let var = n * self.gamma * mu * (rho + self.service.scv() + rho - 1.0) / 2.0;
        (q, var.max(1.0).sqrt())
    }

    pub fn default_truncation(&self) -> u32 {
        let (q, sd) = self.diffusion_scale();
        self.n + (q + 12.0 * sd).ceil() as u32
    }

    /// Gaussian estimate of the stationary mass above the truncation level.
    pub fn estimated_tail_mass(&self) -> f64 {
        let (q, sd) = self.diffusion_scale();
        norm_sf((self.truncation as f64 + 0.5 - self.n as f64 - q) / sd)
    }

    fn level_size(&self, x: u32) -> usize {
        match self.service.phases() {
            1 => 1,
            _ => x.min(self.n) as usize + 1,
        }
    }

    /// First state index of every level, plus the total as the last entry.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.truncation as usize + 2);
        let mut total = 0;
        for x in 0..=self.truncation {
            offsets.push(total);
            total += self.level_size(x);
        }
        offsets.push(total);
        offsets
    }

    pub fn num_states(&self) -> usize {
        *self.level_offsets().last().unwrap()
    }

    /// Outgoing transitions of `(x, k1)` as `(level, k1', rate)`, merged.
    fn transitions(&self, x: u32, k1: u32) -> Vec<(u32, u32, f64)> {
        let n = self.n;
        let busy = x.min(n);
        let (p1, r1, r2) = self.service.split();
        let p2 = 1.0 - p1;
        let single = self.service.phases() == 1;
        let k2 = busy - k1;
        let mut out: Vec<(u32, u32, f64)> = Vec::with_capacity(5);
        let mut add = |level: u32, k: u32, rate: f64| {
            if rate <= 0.0 {
                return;
            }
            match out.iter_mut().find(|(l, kk, _)| *l == level && *kk == k) {
                Some(e) => e.2 += rate,
                None => out.push((level, k, rate)),
            }
        };
        if x < self.truncation {
            if x < n {
                if single {
                    add(x + 1, k1 + 1, self.lambda);
                } else {
                    add(x + 1, k1 + 1, self.lambda * p1);
                    add(x + 1, k1, self.lambda * p2);
                }
            } else {
                add(x + 1, k1, self.lambda);
            }
        }
        if x == 0 {
            return out;
        }
        if x > n {
            let waiting = (x - n) as f64;
            add(x - 1, k1, waiting / self.gamma);
            if single {
                add(x - 1, k1, k1 as f64 * r1);
            } else {
                // A completion admits the head of the queue into phase 1 w.p. p1.
                add(x - 1, k1, k1 as f64 * r1 * p1 + k2 as f64 * r2 * p2);
                if k1 > 0 {
                    add(x - 1, k1 - 1, k1 as f64 * r1 * p2);
                }
                add(x - 1, k1 + 1, k2 as f64 * r2 * p1);
            }
        } else {
            if k1 > 0 {
                add(x - 1, k1 - 1, k1 as f64 * r1);
            }
            if !single {
                add(x - 1, k1, k2 as f64 * r2);
            }
        }
        out
    }

    fn local_index(&self, k1: u32) -> usize {
        if self.service.phases() == 1 {
            0
        } else {
            k1 as usize
        }
    }

    fn k1_of(&self, x: u32, local: usize) -> u32 {
        if self.service.phases() == 1 {
            x.min(self.n)
        } else {
            local as u32
        }
    }

    /// Truncated generator in compressed sparse row form.
    pub fn build_generator(&self) -> Result<Generator, CtmcError> {
        let mass = self.estimated_tail_mass();
        if self.truncation <= self.n || mass > 1e-8 {
            return Err(CtmcError::TruncationTooSmall { level: self.truncation, mass });
        }
        Ok(self.build_generator_unchecked())
    }

    fn build_generator_unchecked(&self) -> Generator {
        let mass = self.estimated_tail_mass();
        let offsets = self.level_offsets();
        let total = *offsets.last().unwrap();
        let mut row_ptr = Vec::with_capacity(total + 1);
        let mut cols = Vec::with_capacity(5 * total);
        let mut vals = Vec::with_capacity(5 * total);
        row_ptr.push(0);
        for x in 0..=self.truncation {
            for local in 0..self.level_size(x) {
                let k1 = self.k1_of(x, local);
                let me = offsets[x as usize] + local;
                let mut row: Vec<(usize, f64)> = self
                    .transitions(x, k1)
                    .into_iter()
                    .map(|(l, k, r)| (offsets[l as usize] + self.local_index(k), r))
                    .collect();
                let out: f64 = row.iter().map(|e| e.1).sum();
                row.push((me, -out));
                row.sort_by_key(|e| e.0);
                for (c, v) in row {
                    cols.push(c);
                    vals.push(v);
                }
                row_ptr.push(cols.len());
            }
        }
        let diagnostics = vec![format!(
            "arrivals at level {} are dropped; estimated stationary mass beyond it {mass:.3e}",
            self.truncation
        )];
        Generator { row_ptr, cols, vals, level_offsets: offsets, diagnostics }
    }
}

/// Sparse generator with level bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub level_offsets: Vec<usize>,
    pub diagnostics: Vec<String>,
}

impl Generator {
    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn max_row_nonzeros(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.dim()).map(|i| self.row(i).map(|e| e.1).sum::<f64>().abs()).fold(0.0, f64::max)
    }

    /// `||pi Q||_inf`.
    pub fn residual(&self, pi: &[f64]) -> f64 {
        let mut out = vec![0.0; self.dim()];
        for (i, p) in pi.iter().enumerate() {
            for (j, v) in self.row(i) {
                out[j] += p * v;
            }
        }
        out.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn levels(&self) -> usize {
        self.level_offsets.len() - 1
    }

    /// Dense block of rates from level `a` to level `b`.
    fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let (ra, ca) = (self.level_offsets[a], self.level_offsets[b]);
        let rows = self.level_offsets[a + 1] - ra;
        let cols = self.level_offsets[b + 1] - ca;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for (j, v) in self.row(ra + i) {
                if j >= ca && j < ca + cols {
                    m[(i, j - ca)] = v;
                }
            }
        }
        m
    }
}

/// Target for `||pi Q||_inf`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    /// Joint probabilities in generator order.
    pub probabilities: Vec<f64>,
    pub level_offsets: Vec<usize>,
    /// `marginal[x] = P[X = x]`.
    pub marginal: Vec<f64>,
    /// Estimated stationary mass above the truncation level.
    pub truncation_mass_bound: f64,
    pub residual: f64,
}

impl StationaryDist {
    pub fn mean(&self) -> f64 {
        self.marginal.iter().enumerate().map(|(x, p)| x as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.marginal.iter().enumerate().map(|(x, p)| (x as f64 - m).powi(2) * p).sum()
    }

    /// Long-run fraction of arrivals that abandon.
    pub fn abandonment_fraction(&self, model: &CtmcModel) -> f64 {
        let n = model.n as usize;
        let rate: f64 =
            self.marginal.iter().enumerate().skip(n + 1).map(|(x, p)| (x - n) as f64 / model.gamma * p).sum();
        rate / model.lambda
    }

    /// Admitted arrivals minus departures (completions and abandonments).
    pub fn flow_imbalance(&self, model: &CtmcModel) -> f64 {
        let n = model.n as usize;
        let top = self.marginal.len() - 1;
        let admitted = model.lambda * (1.0 - self.marginal[top]);
        let mut departures = 0.0;
        for x in 0..=top {
            let start = self.level_offsets[x];
            for local in 0..self.level_offsets[x + 1] - start {
                let p = self.probabilities[start + local];
                let busy = x.min(n) as f64;
                let service_rate = match model.service {
                    ServicePhases::Exponential { rate } => busy * rate,
                    ServicePhases::Hyperexp2 { rate1, rate2, .. } => {
                        let k1 = local as f64;
                        k1 * rate1 + (busy - k1) * rate2
                    }
                };
                departures += p * (service_rate + x.saturating_sub(n) as f64 / model.gamma);
            }
        }
        admitted - departures
    }

    pub fn tv_distance(&self, other: &[f64]) -> f64 {
        tv_distance(&self.marginal, other)
    }
}

/// Half the L1 distance; missing entries count as zero.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let len = p.len().max(q.len());
    (0..len).map(|i| (p.get(i).unwrap_or(&0.0) - q.get(i).unwrap_or(&0.0)).abs()).sum::<f64>() / 2.0
}

/// Solves `pi Q = 0, sum pi = 1` by backward level reduction
/// `R_{x-1} = A0_{x-1} (-(A1_x + R_x A2_{x+1}))^{-1}`, falling back to
/// Gauss-Seidel sweeps if the residual target is missed.
pub fn solve_stationary(model: &CtmcModel, generator: &Generator) -> Result<StationaryDist, CtmcError> {
    let levels = generator.levels();
    // R[x] maps pi_x to pi_{x+1}.
    let mut r: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); levels.saturating_sub(1)];
    let mut below: Option<DMatrix<f64>> = None; // R_x A2_{x+1}
    for x in (1..levels).rev() {
        let mut s = generator.block(x, x);
        if let Some(b) = &below {
            s += b;
        }
        let inv = (-s).try_inverse().ok_or(CtmcError::SingularSystem(x as u32))?;
        let rx = generator.block(x - 1, x) * inv;
        below = Some(&rx * generator.block(x, x - 1));
        r[x - 1] = rx;
    }

    let m0 = generator.level_offsets[1];
    let mut pi = vec![0.0; generator.dim()];
    if m0 != 1 {
        return Err(CtmcError::SingularSystem(0));
    }
    pi[0] = 1.0;
    for x in 1..levels {
        let (a, b) = (generator.level_offsets[x - 1], generator.level_offsets[x]);
        let prev = nalgebra::RowDVector::from_row_slice(&pi[a..b]);
        let next = prev * &r[x - 1];
        let c = generator.level_offsets[x + 1];
        pi[b..c].copy_from_slice(next.as_slice());
        let peak = pi[b..c].iter().fold(0.0f64, |m, v| m.max(*v));
        if peak > 1e200 {
            for v in &mut pi[..c] {
                *v *= 1e-200;
            }
        }
        if !peak.is_finite() {
            return Err(CtmcError::SingularSystem(x as u32));
        }
    }
    normalize(&mut pi);
    let mut residual = generator.residual(&pi);
    if !(residual < RESIDUAL_TOLERANCE) {
        log::warn!("level reduction residual {residual:.3e}; refining with Gauss-Seidel");
        residual = gauss_seidel(generator, &mut pi, 10_000)?;
    }

    let marginal = (0..levels)
        .map(|x| pi[generator.level_offsets[x]..generator.level_offsets[x + 1]].iter().sum())
        .collect();
    Ok(StationaryDist {
        probabilities: pi,
        level_offsets: generator.level_offsets.clone(),
        marginal,
        truncation_mass_bound: model.estimated_tail_mass(),
        residual,
    })
}

fn normalize(pi: &mut [f64]) {
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
}

fn gauss_seidel(generator: &Generator, pi: &mut [f64], max_sweeps: usize) -> Result<f64, CtmcError> {
    let dim = generator.dim();
    // Column access: incoming[j] lists (i, Q_ij) for i != j.
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
    let mut diag = vec![0.0; dim];
    for i in 0..dim {
        for (j, v) in generator.row(i) {
            if i == j {
                diag[j] = v;
            } else {
                incoming[j].push((i, v));
            }
        }
    }
    let mut residual = f64::INFINITY;
    for _ in 0..max_sweeps {
        for j in 0..dim {
            if diag[j] < 0.0 {
                pi[j] = incoming[j].iter().map(|&(i, v)| pi[i] * v).sum::<f64>() / -diag[j];
            }
        }
        normalize(pi);
        residual = generator.residual(pi);
        if residual < RESIDUAL_TOLERANCE {
            return Ok(residual);
        }
    }
    Err(CtmcError::NonConvergence { iterations: max_sweeps, residual, target: RESIDUAL_TOLERANCE })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianComparison {
    pub tv_distance: f64,
    pub exact_mean: f64,
    pub approx_mean: f64,
    pub exact_variance: f64,
    pub approx_variance: f64,
}

impl GaussianComparison {
    pub fn mean_gap(&self) -> f64 {
        self.approx_mean - self.exact_mean
    }

    pub fn variance_gap(&self) -> f64 {
        self.approx_variance - self.exact_variance
    }
}

/// Gaussian pmf approximation on `0..=upper`.
pub fn gaussian_pmf(approx: &GaussianApprox, upper: usize) -> Vec<f64> {
    (0..=upper as u64).map(|i| approx.state_pmf(i)).collect()
}

/// Total variation distance to the Gaussian pmf approximation, including
/// its mass above the truncation level, plus mean and variance gaps.
pub fn compare_to_gaussian(dist: &StationaryDist, approx: &GaussianApprox) -> GaussianComparison {
    let top = dist.marginal.len() - 1;
    let sd = approx.sigma2_q.sqrt();
    let centre = approx.mean_in_system();
    let far = (centre + 40.0 * sd).ceil().max(top as f64) as usize;
    let g = gaussian_pmf(approx, far);
    GaussianComparison {
        tv_distance: tv_distance(&dist.marginal, &g),
        exact_mean: dist.mean(),
        approx_mean: centre,
        exact_variance: dist.variance(),
        approx_variance: approx.sigma2_q,
    }
}
