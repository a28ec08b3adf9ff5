//! Closed-form Gaussian performance approximations for an overloaded
//! `GI/GI/n+M` queue, and the constant-hazard extension to general
//! patience distributions.
//!
//! With `rho = lambda / (n mu) > 1` and mean patience `gamma`:
//!
//! | quantity              | value                                              |
//! |-----------------------|----------------------------------------------------|
//! | abandonment fraction  | `(rho - 1) / rho`                                  |
//! | mean queue            | `n mu (rho - 1) gamma`                             |
//! | queue variance        | `n gamma mu (rho cA2 + cS2 + rho - 1) / 2`         |
//! | mean virtual wait     | `gamma ln rho`                                     |
//! | virtual-wait variance | `gamma (cA2 + rho cS2 + rho - 1) / (2 n mu rho)`   |

use thiserror::Error;

use crate::distributions::{DistError, Lifetime};
use crate::numerics::{bracketed_root, integrate, norm_pdf, norm_sf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApproxError {
    #[error("traffic intensity {0} is not above 1; the queue is not overloaded")]
    NotOverloaded(f64),
    #[error("invalid model parameter: {0}")]
    InvalidInput(String),
    #[error("patience distribution never reaches probability {target}")]
    NoRoot { target: f64 },
    #[error("patience hazard unavailable: {0}")]
    HazardUnavailable(DistError),
}

/// Output of the diffusion model for one queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianApprox {
    pub n: u32,
    pub mu: f64,
    pub rho: f64,
    /// Mean patience, or the effective time scale `1 / h(w)` for general patience.
    pub gamma: f64,
    pub ca2: f64,
    pub cs2: f64,
    /// Fraction of customers who abandon.
    pub alpha: f64,
    /// Mean number waiting in the buffer.
    pub q: f64,
    pub sigma2_q: f64,
    /// Mean virtual waiting time.
    pub w: f64,
    pub sigma2_w: f64,
    /// Stationary variance of the limiting OU process.
    pub ou_var: f64,
}

fn check_inputs(n: u32, mu: f64, rho: f64, gamma: f64, ca2: f64, cs2: f64) -> Result<(), ApproxError> {
    if n == 0 {
        return Err(ApproxError::InvalidInput("n must be at least 1".into()));
    }
    for (name, v) in [("mu", mu), ("gamma", gamma)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(ApproxError::InvalidInput(format!("{name} must be positive, got {v}")));
        }
    }
    for (name, v) in [("cA2", ca2), ("cS2", cs2)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(ApproxError::InvalidInput(format!("{name} must be nonnegative, got {v}")));
        }
    }
    if !rho.is_finite() || rho <= 1.0 {
        return Err(ApproxError::NotOverloaded(rho));
    }
    Ok(())
}

/// Queue-length scale factor of the OU stationary variance.
pub fn ou_stationary_variance(mu: f64, rho: f64, ca2: f64, cs2: f64) -> f64 {
    mu * (rho * ca2 + cs2 + rho - 1.0) / 2.0
}

/// Stationary variance of the scaled virtual wait `sqrt(n/gamma) (W - w)`.
pub fn scaled_wait_variance(mu: f64, rho: f64, ca2: f64, cs2: f64) -> f64 {
    (ca2 + rho * cs2 + rho - 1.0) / (2.0 * mu * rho)
}

/// Diffusion approximation with exponential patience of mean `gamma`.
pub fn approximate(n: u32, mu: f64, rho: f64, gamma: f64, ca2: f64, cs2: f64) -> Result<GaussianApprox, ApproxError> {
    check_inputs(n, mu, rho, gamma, ca2, cs2)?;
    let nf = n as f64;
    let ou_var = ou_stationary_variance(mu, rho, ca2, cs2);
    Ok(GaussianApprox {
        n,
        mu,
        rho,
        gamma,
        ca2,
        cs2,
        alpha: (rho - 1.0) / rho,
        q: nf * mu * (rho - 1.0) * gamma,
        sigma2_q: nf * gamma * ou_var,
        w: gamma * rho.ln(),
        sigma2_w: gamma * scaled_wait_variance(mu, rho, ca2, cs2) / nf,
        ou_var,
    })
}

impl GaussianApprox {
    /// Arrival rate `n rho mu`.
    pub fn lambda(&self) -> f64 {
        self.n as f64 * self.rho * self.mu
    }

    /// `P[X~(inf) > a]` for the scaled number in system `(X - n - q) / sqrt(n gamma)`.
    pub fn queue_tail(&self, a: f64) -> f64 {
        norm_sf(a / self.ou_var.sqrt())
    }

    /// `P[W~(inf) > a]` for the scaled virtual wait `sqrt(n / gamma) (W - w)`.
    pub fn wait_tail(&self, a: f64) -> f64 {
        norm_sf(a / scaled_wait_variance(self.mu, self.rho, self.ca2, self.cs2).sqrt())
    }

    /// Gaussian-density approximation of `P[X(inf) = i]`.
    pub fn state_pmf(&self, i: u64) -> f64 {
        let sd = self.sigma2_q.sqrt();
        norm_pdf((i as f64 - self.n as f64 - self.q) / sd) / sd
    }

    /// Mean number in system `n + q`.
    pub fn mean_in_system(&self) -> f64 {
        self.n as f64 + self.q
    }
}

/// Diffusion approximation for a general patience law (constant hazard at
/// the mean virtual wait).
///
/// Solves `H(w) = (rho - 1) / rho`, takes the time scale `1 / h(w)`, and
/// the mean queue `int_0^w lambda (1 - H(s)) ds`.
pub fn general_patience<L: Lifetime + ?Sized>(
    n: u32,
    mu: f64,
    rho: f64,
    ca2: f64,
    cs2: f64,
    patience: &L,
) -> Result<GaussianApprox, ApproxError> {
    check_inputs(n, mu, rho, 1.0, ca2, cs2)?;
    if !patience.has_density() {
        return Err(ApproxError::HazardUnavailable(DistError::UnsupportedFamily(
            crate::distributions::Family::Deterministic,
        )));
    }
    let target = (rho - 1.0) / rho;
    if patience.total_mass() < target {
        return Err(ApproxError::NoRoot { target });
    }
    let mut hi = patience.mean().max(1e-12);
    while patience.cdf(hi) < target {
        hi *= 2.0;
        if !hi.is_finite() || hi > 1e300 {
            return Err(ApproxError::NoRoot { target });
        }
    }
    let w = bracketed_root(|t| patience.cdf(t) - target, |t| patience.pdf(t), 0.0, hi, 1e-15, 1e-10)
        .ok_or(ApproxError::NoRoot { target })?;
    let h = patience.hazard(w).map_err(ApproxError::HazardUnavailable)?;
    if !(h > 0.0) {
        return Err(ApproxError::HazardUnavailable(DistError::DomainError(w)));
    }
    let gamma = 1.0 / h;
    let lambda = n as f64 * rho * mu;
    let q = lambda * integrate(|s| patience.survival(s), 0.0, w, 1e-10, 0.0);
    let ou_var = ou_stationary_variance(mu, rho, ca2, cs2);
    Ok(GaussianApprox {
        n,
        mu,
        rho,
        gamma,
        ca2,
        cs2,
        alpha: target,
        q,
        sigma2_q: n as f64 * gamma * ou_var,
        w,
        sigma2_w: gamma * scaled_wait_variance(mu, rho, ca2, cs2) / n as f64,
        ou_var,
    })
}
