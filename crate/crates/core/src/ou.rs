//! The limiting Ornstein-Uhlenbeck process `X(t) = M(t) - int_0^t X(u) du`
//! and the Gaussian law of the stopped-arrival process that describes the
//! scaled virtual waiting time.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::integrate;

/// Initial value of an OU path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialValue {
    Fixed(f64),
    /// Drawn from the stationary law `Normal(0, diffusion_var / 2)`.
    Stationary,
}

/// OU process with unit mean-reversion rate driven by a Brownian motion of
/// variance `diffusion_var` per unit time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub diffusion_var: f64,
    pub x0: InitialValue,
}

impl OuParams {
    /// Queue-length OU process: `diffusion_var = mu (rho cA2 + cS2 + rho - 1)`.
    pub fn for_queue(mu: f64, rho: f64, ca2: f64, cs2: f64, x0: InitialValue) -> OuParams {
        OuParams { diffusion_var: mu * (rho * ca2 + cs2 + rho - 1.0), x0 }
    }

    pub fn stationary_variance(&self) -> f64 {
        self.diffusion_var / 2.0
    }
}

/// Samples the path on `grid` using the exact Gaussian transition
/// `X(t + d) = X(t) e^{-d} + N(0, (v/2)(1 - e^{-2d}))`.
///
/// The first grid point receives the initial value. Panics if the grid is
/// not strictly increasing.
pub fn simulate_ou<R: Rng + ?Sized>(params: &OuParams, grid: &[f64], rng: &mut R) -> Vec<f64> {
    assert!(grid.windows(2).all(|w| w[1] > w[0]), "time grid must be strictly increasing");
    let mut path = Vec::with_capacity(grid.len());
    if grid.is_empty() {
        return path;
    }
    let half_var = params.stationary_variance();
    let mut x = match params.x0 {
        InitialValue::Fixed(v) => v,
        InitialValue::Stationary => half_var.sqrt() * rng.sample::<f64, _>(StandardNormal),
    };
    path.push(x);
    for w in grid.windows(2) {
        let dt = w[1] - w[0];
        let decay = (-dt).exp();
        let sd = (half_var * -(-2.0 * dt).exp_m1()).sqrt();
        let z: f64 = if sd > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        x = x * decay + sd * z;
        path.push(x);
    }
    path
}

/// The centred fluid drift `y^s(t)` of the stopped-arrival system.
pub fn ys_function(rho: f64, mu: f64, s: f64, t: f64) -> f64 {
    let end = s + rho.ln();
    if t < s {
        (rho - 1.0) * mu
    } else if t < end {
        (rho * (s - t).exp() - 1.0) * mu
    } else {
        -mu * (t - end)
    }
}

/// Variance contributions to `Y^s(s + ln rho)`, each already multiplied
/// by `e^{-2(s + ln rho)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YsComponents {
    pub initial: f64,
    pub arrival: f64,
    pub service: f64,
    pub abandonment: f64,
}

impl YsComponents {
    pub fn total(&self) -> f64 {
        self.initial + self.arrival + self.service + self.abandonment
    }
}

/// Gaussian law of `Y^s(s + ln rho)` (mean zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YsLaw {
    pub s: f64,
    pub var_x0: f64,
    pub variance: f64,
    pub components: YsComponents,
}

impl YsLaw {
    /// Variance of the scaled virtual wait, `variance / mu^2`.
    pub fn wait_variance(&self, mu: f64) -> f64 {
        self.variance / (mu * mu)
    }
}

/// Variance of `Y^s(s + ln rho)` from its four independent stochastic
/// integrals, in closed form.
pub fn ys_law(s: f64, mu: f64, rho: f64, ca2: f64, cs2: f64, var_x0: f64) -> YsLaw {
    let log_rho = rho.ln();
    let end = s + log_rho;
    // e^{-2 end} scaled pieces; written to stay finite for large s.
    let decay_end = (-2.0 * end).exp();
    let decay_s = (-2.0 * s).exp();
    let rho2 = rho * rho;
    let initial = var_x0 * decay_end;
    let arrival = rho * mu * ca2 * (1.0 - decay_s) / (2.0 * rho2);
    let service = mu * cs2 * (1.0 - decay_end) / 2.0;
    let flat = (rho - 1.0) * mu * (1.0 - decay_s) / (2.0 * rho2);
    let bend = mu * (rho - 1.0) * (rho - 1.0) / (2.0 * rho2);
    let components = YsComponents { initial, arrival, service, abandonment: flat + bend };
    YsLaw { s, var_x0, variance: components.total(), components }
}

/// The abandonment component `e^{-2T} int_0^T y^s(u) e^{2u} du` by adaptive
/// quadrature, split at the breakpoints of `y^s`. Cross-check for
/// [`ys_law`].
pub fn ys_abandonment_quadrature(s: f64, mu: f64, rho: f64) -> f64 {
    let end = s + rho.ln();
    let f = |u: f64| ys_function(rho, mu, s, u) * (2.0 * (u - end)).exp();
    integrate(f, 0.0, s, 1e-12, 0.0) + integrate(f, s, end, 1e-12, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{correlation, mean_var};
    use crate::rng::{StreamFactory, Substream};

    #[test]
    fn zero_noise_decays_deterministically() {
        let p = OuParams { diffusion_var: 0.0, x0: InitialValue::Fixed(3.0) };
        let grid: Vec<f64> = (0..20).map(|k| k as f64 * 0.25).collect();
        let mut rng = StreamFactory::new(0).stream(0, Substream::Auxiliary);
        let path = simulate_ou(&p, &grid, &mut rng);
        for (t, x) in grid.iter().zip(&path) {
            assert!((x - 3.0 * (-t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_variance_and_autocorrelation() {
        let p = OuParams::for_queue(1.0, 1.2, 1.0, 0.5, InitialValue::Stationary);
        let grid: Vec<f64> = (0..1_000_000).map(|k| k as f64 * 0.1).collect();
        let mut rng = StreamFactory::new(5).stream(0, Substream::Auxiliary);
        let path = simulate_ou(&p, &grid, &mut rng);
        let (m, v) = mean_var(&path);
        let target = p.stationary_variance();
        assert!((v / target - 1.0).abs() < 0.02, "variance {v} vs {target}");
        // Integrated autocorrelation time of the 0.1-spaced chain is about 20 samples.
        assert!(m.abs() < 3.0 * (target * 20.0 / path.len() as f64).sqrt());
        let lag = 10; // 1.0 time units
        let r = correlation(&path[..path.len() - lag], &path[lag..]);
        assert!((r - (-1.0f64).exp()).abs() < 0.01, "lag-1 autocorrelation {r}");
    }

    #[test]
    #[should_panic]
    fn rejects_non_increasing_grid() {
        let p = OuParams { diffusion_var: 1.0, x0: InitialValue::Fixed(0.0) };
        let mut rng = StreamFactory::new(0).stream(0, Substream::Auxiliary);
        simulate_ou(&p, &[0.0, 1.0, 1.0], &mut rng);
    }

    #[test]
    fn ys_branches_and_continuity() {
        let (rho, mu, s) = (1.2, 1.0, 3.0);
        assert_eq!(ys_function(rho, mu, s, 1.0), (rho - 1.0) * mu);
        assert!(ys_function(rho, mu, s, s + rho.ln()).abs() < 1e-15);
        assert!((ys_function(rho, mu, s, s + rho.ln() + 1.0) + mu).abs() < 1e-15);
        for &rho in &[1.05, 1.2, 2.0, 5.0] {
            for &s in &[0.0, 0.5, 4.0, 20.0] {
                let end = s + f64::ln(rho);
                for b in [s, end] {
                    let left = ys_function(rho, 1.3, s, b - 1e-12);
                    let right = ys_function(rho, 1.3, s, b);
                    assert!((left - right).abs() < 1e-10, "rho={rho} s={s} b={b}");
                }
            }
        }
    }

    #[test]
    fn ys_law_limits() {
        let law = ys_law(0.0, 1.0, 1.2, 3.7, 0.5, 0.0);
        assert_eq!(law.components.arrival, 0.0);
        let law = ys_law(20.0, 1.0, 1.2, 1.0, 0.5, 0.3);
        assert!((law.variance - 0.75).abs() < 1e-12);
        let c = law.components;
        assert!(c.initial >= 0.0 && c.arrival >= 0.0 && c.service >= 0.0 && c.abandonment >= 0.0);
        assert!((law.variance - c.total()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for &rho in &[1.1, 1.2, 1.5, 3.0] {
            for &s in &[0.0, 0.3, 2.0, 10.0, 20.0] {
                for &mu in &[0.5, 1.0, 2.0] {
                    let closed = ys_law(s, mu, rho, 0.0, 0.0, 0.0).components.abandonment;
                    let quad = ys_abandonment_quadrature(s, mu, rho);
                    assert!(((closed - quad) / closed).abs() < 1e-10, "rho={rho} s={s}: {closed} vs {quad}");
                }
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn variance_monotone_in_inputs(
                s in 0.0f64..10.0, rho in 1.01f64..3.0,
                ca2 in 0.0f64..3.0, cs2 in 0.0f64..3.0, v0 in 0.0f64..3.0, bump in 0.0f64..1.0,
            ) {
                let base = ys_law(s, 1.0, rho, ca2, cs2, v0).variance;
                prop_assert!(ys_law(s, 1.0, rho, ca2 + bump, cs2, v0).variance >= base);
                prop_assert!(ys_law(s, 1.0, rho, ca2, cs2 + bump, v0).variance >= base);
                prop_assert!(ys_law(s, 1.0, rho, ca2, cs2, v0 + bump).variance >= base);
            }
        }
    }
}
