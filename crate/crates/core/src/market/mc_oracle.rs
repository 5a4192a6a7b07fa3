//! Independent Monte-Carlo reference prices for Heston vanillas.
//!
//! The variance is sampled exactly on a fine grid from the noncentral
//! chi-square CIR transition (Poisson mixture of Gammas). Given a variance
//! path, `ln x_τ` is Gaussian with
//!
//! `mean = ln x0 − ½I + (ρ/ξ)(v_τ − v0 − κθτ + κI)`, `var = (1 − ρ²)I`,
//!
//! where `I = ∫v` (trapezoid on the fine grid), so each path contributes the
//! Black-Scholes payoff expectation conditional on its variance path. This
//! shares nothing with the Fourier pricer except the model parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;

use super::{HestonParams, MarketError, MarketResult, OptionKind};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McQuery {
    pub tau_steps: usize,
    /// `ln(K / x0)`
    pub log_moneyness: f64,
    pub kind: OptionKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub price: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOracle {
    pub n_paths: usize,
    /// Exact CIR transitions per trading step.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for McOracle {
    fn default() -> Self {
        Self {
            n_paths: 1_000_000,
            substeps: 2,
            seed: 0x6d63_6f72,
        }
    }
}

impl McOracle {
    pub fn price(
        &self,
        params: &HestonParams,
        dt: f64,
        queries: &[McQuery],
    ) -> MarketResult<Vec<McEstimate>> {
        params.validate()?;
        if self.n_paths < 2 || self.substeps == 0 || !(dt > 0.0) {
            return Err(MarketError::InvalidRequest(format!("{self:?}, dt={dt}")));
        }
        if queries.iter().any(|q| q.tau_steps == 0 || !q.log_moneyness.is_finite()) {
            return Err(MarketError::InvalidRequest("bad oracle query".into()));
        }
        let horizon = queries.iter().map(|q| q.tau_steps).max().unwrap_or(0);
        let n_chunks = self.n_paths.div_ceil(CHUNK);
        let partial: Vec<Vec<(f64, f64)>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(self.n_paths);
                let mut acc = vec![(0.0, 0.0); queries.len()];
                let mut integral = vec![0.0; horizon + 1];
                let mut level = vec![0.0; horizon + 1];
                for path in lo..hi {
                    self.variance_path(params, dt, horizon, path as u64, &mut level, &mut integral);
                    for (q, a) in queries.iter().zip(acc.iter_mut()) {
                        let p = conditional_price(params, dt, q, level[q.tau_steps], integral[q.tau_steps]);
                        a.0 += p;
                        a.1 += p * p;
                    }
                }
                acc
            })
            .collect();
        let n = self.n_paths as f64;
        Ok((0..queries.len())
            .map(|j| {
                let (s, s2) = partial
                    .iter()
                    .fold((0.0, 0.0), |(a, b), c| (a + c[j].0, b + c[j].1));
                let mean = s / n;
                let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
                McEstimate {
                    price: mean,
                    std_err: (var / n).sqrt(),
                }
            })
            .collect())
    }

    /// Fills `level[t] = v_t` and `integral[t] = ∫₀^{t·dt} v`.
    fn variance_path(
        &self,
        p: &HestonParams,
        dt: f64,
        horizon: usize,
        stream: u64,
        level: &mut [f64],
        integral: &mut [f64],
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let h = dt / self.substeps as f64;
        let decay = (-p.kappa * h).exp();
        let c = p.xi * p.xi * (1.0 - decay) / (4.0 * p.kappa);
        let half_dof = 2.0 * p.kappa * p.theta / (p.xi * p.xi);
        let mut v = p.v0;
        let mut area = 0.0;
        level[0] = v;
        integral[0] = 0.0;
        for t in 1..=horizon {
            for _ in 0..self.substeps {
                let half_lambda = 0.5 * v * decay / c;
                let n = if half_lambda > 0.0 {
                    Poisson::new(half_lambda).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                let next = 2.0 * c * Gamma::new(half_dof + n, 1.0).expect("positive shape").sample(&mut rng);
                area += 0.5 * h * (v + next);
                v = next;
            }
            level[t] = v;
            integral[t] = area;
        }
    }
}

fn conditional_price(p: &HestonParams, dt: f64, q: &McQuery, v_tau: f64, integral: f64) -> f64 {
    let tau = q.tau_steps as f64 * dt;
    let drift = (p.rho / p.xi) * (v_tau - p.v0 - p.kappa * p.theta * tau + p.kappa * integral);
    let forward = p.x0 * (drift - 0.5 * p.rho * p.rho * integral).exp();
    let strike = p.x0 * q.log_moneyness.exp();
    black_scholes(forward, strike, (1.0 - p.rho * p.rho) * integral, q.kind)
}

/// Zero-rate Black-Scholes price with total variance `w`.
pub fn black_scholes(forward: f64, strike: f64, w: f64, kind: OptionKind) -> f64 {
    let intrinsic = match kind {
        OptionKind::Call => (forward - strike).max(0.0),
        OptionKind::Put => (strike - forward).max(0.0),
    };
    if w <= 0.0 {
        return intrinsic;
    }
    let s = w.sqrt();
    let d1 = ((forward / strike).ln() + 0.5 * w) / s;
    let d2 = d1 - s;
    match kind {
        OptionKind::Call => forward * norm_cdf(d1) - strike * norm_cdf(d2),
        OptionKind::Put => strike * norm_cdf(-d2) - forward * norm_cdf(-d1),
    }
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
