use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MarketError, MarketResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub x0: f64,
    pub v0: f64,
    /// Mean-reversion speed, per year.
    pub kappa: f64,
    /// Long-run variance.
    pub theta: f64,
    /// Volatility of variance.
    pub xi: f64,
    pub rho: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        Self {
            x0: 1.0,
            v0: 0.0625,
            kappa: 8.0,
            theta: 0.0625,
            xi: 1.0,
            rho: -0.7,
        }
    }
}

impl HestonParams {
    pub fn validate(&self) -> MarketResult<()> {
        let ok = self.x0 > 0.0
            && self.v0 >= 0.0
            && self.kappa > 0.0
            && self.theta > 0.0
            && self.xi > 0.0
            && self.rho.abs() <= 1.0
            && [self.x0, self.v0, self.kappa, self.theta, self.xi, self.rho]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(MarketError::InvalidParams(format!("{self:?}")))
        }
    }

    /// `E[v_t] = θ + (v0 − θ)e^{−κt}`
    pub fn mean_variance(&self, t_years: f64) -> f64 {
        self.theta + (self.v0 - self.theta) * (-self.kappa * t_years).exp()
    }
}

/// Batch of simulated `(spot, variance)` trajectories on the trading grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub params: HestonParams,
    pub n_paths: usize,
    pub steps: usize,
    /// Year fraction per trading step.
    pub dt: f64,
    pub substeps: usize,
    pub seed: u64,
    /// RNG stream id of the first path.
    pub first_stream: u64,
    pub(super) spot: Vec<f64>,
    pub(super) variance: Vec<f64>,
    /// Substeps on which the variance left `[0, ∞)` and had to be truncated.
    pub clamped_substeps: u64,
}

impl PathSet {
    #[inline]
    pub fn spot(&self, path: usize) -> &[f64] {
        let w = self.steps + 1;
        &self.spot[path * w..(path + 1) * w]
    }

    #[inline]
    pub fn variance(&self, path: usize) -> &[f64] {
        let w = self.steps + 1;
        &self.variance[path * w..(path + 1) * w]
    }

    pub fn clamped_fraction(&self) -> f64 {
        let total = (self.n_paths * self.steps * self.substeps) as f64;
        if total == 0.0 {
            0.0
        } else {
            self.clamped_substeps as f64 / total
        }
    }

    /// Keeps only the listed paths, in the given order.
    pub fn select(&self, paths: &[usize]) -> PathSet {
        let mut spot = Vec::with_capacity(paths.len() * (self.steps + 1));
        let mut variance = Vec::with_capacity(spot.capacity());
        for &p in paths {
            spot.extend_from_slice(self.spot(p));
            variance.extend_from_slice(self.variance(p));
        }
        PathSet {
            n_paths: paths.len(),
            spot,
            variance,
            ..self.clone()
        }
    }

    /// Builds a path set from explicit trajectories (rows of length `steps + 1`).
    pub fn from_paths(
        params: HestonParams,
        dt: f64,
        spot: &[Vec<f64>],
        variance: &[Vec<f64>],
    ) -> MarketResult<PathSet> {
        let n = spot.len();
        let steps = spot.first().map_or(0, |s| s.len().saturating_sub(1));
        if variance.len() != n
            || spot.iter().chain(variance).any(|p| p.len() != steps + 1)
        {
            return Err(MarketError::InvalidRequest("ragged trajectories".into()));
        }
        Ok(PathSet {
            params,
            n_paths: n,
            steps,
            dt,
            substeps: 1,
            seed: 0,
            first_stream: 0,
            spot: spot.concat(),
            variance: variance.concat(),
            clamped_substeps: 0,
        })
    }
}

/// Full-truncation log-Euler simulation of `n_paths` Heston paths.
pub fn simulate(
    params: &HestonParams,
    n_paths: usize,
    steps: usize,
    dt: f64,
    substeps: usize,
    seed: u64,
) -> MarketResult<PathSet> {
    simulate_range(params, 0, n_paths, steps, dt, substeps, seed)
}

/// Simulates the paths with stream ids `first_stream..first_stream + n_paths`.
/// A path depends only on `(seed, stream id)`, so any partition of a range
/// reproduces the same trajectories.
pub fn simulate_range(
    params: &HestonParams,
    first_stream: u64,
    n_paths: usize,
    steps: usize,
    dt: f64,
    substeps: usize,
    seed: u64,
) -> MarketResult<PathSet> {
    params.validate()?;
    if substeps == 0 || !(dt > 0.0) {
        return Err(MarketError::InvalidRequest(format!(
            "substeps={substeps}, dt={dt}"
        )));
    }
    let w = steps + 1;
    let mut spot = vec![0.0; n_paths * w];
    let mut variance = vec![0.0; n_paths * w];
    let clamped: Vec<MarketResult<u64>> = spot
        .par_chunks_mut(w)
        .zip(variance.par_chunks_mut(w))
        .enumerate()
        .map(|(i, (s, v))| {
            simulate_path(params, steps, dt, substeps, seed, first_stream + i as u64, s, v)
                .map_err(|substep| MarketError::NonFinite { path: i, substep })
        })
        .collect();
    let mut clamped_substeps = 0;
    for c in clamped {
        clamped_substeps += c?;
    }
    let set = PathSet {
        params: *params,
        n_paths,
        steps,
        dt,
        substeps,
        seed,
        first_stream,
        spot,
        variance,
        clamped_substeps,
    };
    log::debug!(
        "simulated {n_paths} paths, truncated-variance substep fraction {:.3e}",
        set.clamped_fraction()
    );
    Ok(set)
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    p: &HestonParams,
    steps: usize,
    dt: f64,
    substeps: usize,
    seed: u64,
    stream: u64,
    spot: &mut [f64],
    variance: &mut [f64],
) -> Result<u64, usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let delta = dt / substeps as f64;
    let sd = delta.sqrt();
    let rho_bar = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let mut log_x = p.x0.ln();
    let mut v = p.v0;
    let mut clamped = 0u64;
    spot[0] = p.x0;
    variance[0] = p.v0;
    for step in 0..steps {
        for sub in 0..substeps {
            let z_v: f64 = StandardNormal.sample(&mut rng);
            let z_perp: f64 = StandardNormal.sample(&mut rng);
            let z_x = p.rho * z_v + rho_bar * z_perp;
            let vp = v.max(0.0);
            let root = vp.sqrt();
            log_x += -0.5 * vp * delta + root * sd * z_x;
            v += p.kappa * (p.theta - vp) * delta + p.xi * root * sd * z_v;
            if v < 0.0 {
                clamped += 1;
            }
            if !log_x.is_finite() || !v.is_finite() {
                return Err(step * substeps + sub);
            }
        }
        spot[step + 1] = log_x.exp();
        variance[step + 1] = v.max(0.0);
    }
    Ok(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vol_of_vol_at_long_run_level_keeps_variance_constant() {
        let p = HestonParams {
            xi: 1e-300,
            ..HestonParams::default()
        };
        let set = simulate(&p, 16, 50, 1.0 / 250.0, 2, 1).unwrap();
        for i in 0..set.n_paths {
            assert!(set.variance(i).iter().all(|&v| (v - p.theta).abs() < 1e-15));
        }
    }

    #[test]
    fn partitioned_simulation_reproduces_the_whole() {
        let p = HestonParams::default();
        let whole = simulate(&p, 10, 20, 1.0 / 250.0, 2, 42).unwrap();
        let tail = simulate_range(&p, 4, 6, 20, 1.0 / 250.0, 2, 42).unwrap();
        for i in 0..6 {
            assert_eq!(whole.spot(4 + i), tail.spot(i));
            assert_eq!(whole.variance(4 + i), tail.variance(i));
        }
        let again = simulate(&p, 10, 20, 1.0 / 250.0, 2, 42).unwrap();
        assert_eq!(whole, again);
    }

    #[test]
    fn stored_paths_respect_invariants() {
        let p = HestonParams::default();
        let set = simulate(&p, 200, 60, 1.0 / 250.0, 2, 9).unwrap();
        for i in 0..set.n_paths {
            assert_eq!(set.spot(i)[0], p.x0);
            assert_eq!(set.variance(i)[0], p.v0);
            assert!(set.spot(i).iter().all(|&x| x > 0.0));
            assert!(set.variance(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let p = HestonParams {
            rho: -1.5,
            ..HestonParams::default()
        };
        assert!(matches!(
            simulate(&p, 1, 1, 0.004, 1, 0),
            Err(MarketError::InvalidParams(_))
        ));
        assert!(simulate(&HestonParams::default(), 1, 1, 0.004, 0, 0).is_err());
    }
}
