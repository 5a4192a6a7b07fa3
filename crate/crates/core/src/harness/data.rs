//! Simulated market data turned into policy inputs, instrument returns and
//! cliquet payoffs.

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::seeds::{derive_seed, Purpose};
use super::{HarnessError, HarnessResult};
use crate::contracts::{cliquet_payoff, instrument_returns, ContractError};
use crate::market::{simulate_range, HestonPricer, PathSet, TabulatedPricer};
use crate::matrix::Matrix64;
use crate::policy::{features, N_FEATURES};

/// Variance range covered by the price tables; larger variances are priced
/// directly.
pub const TABLE_MAX_VARIANCE: f64 = 2.0;
/// Largest deviation of tabulated unit-spot prices from the Fourier pricer.
pub const TABLE_TOLERANCE: f64 = 1e-10;

/// Per-path tensors for a set of paths. Layouts are path-major:
/// `features[(p·T + t)·6 + k]`, `returns[(p·T + t)·d + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_paths: usize,
    pub horizon: usize,
    pub d: usize,
    pub features: Vec<f64>,
    pub returns: Vec<f64>,
    pub payoff: Vec<f64>,
    /// `T x d`, shared by every path.
    pub mask: Vec<f64>,
}

/// Rows of a dataset arranged per time step for a rollout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<Matrix64>,
    pub masks: Vec<Matrix64>,
    pub returns: Vec<Matrix64>,
    pub payoff: Matrix64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.payoff.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn build(paths: &PathSet, cfg: &ExperimentConfig) -> HarnessResult<Self> {
        let grid = cfg.grid_spec()?;
        let cliquet = cfg.cliquet_spec()?;
        let horizon = cliquet.horizon();
        if paths.steps < horizon {
            return Err(HarnessError::Config(format!(
                "path set has {} steps, horizon is {horizon}",
                paths.steps
            )));
        }
        let exact = HestonPricer::new(paths.params, paths.dt)?;
        let pricer = TabulatedPricer::new(exact, &grid.strip_strikes(), TABLE_MAX_VARIANCE, TABLE_TOLERANCE)?;
        let d = grid.n_instruments();
        let per_path: Vec<Result<(Vec<f64>, Vec<f64>, f64), ContractError>> = (0..paths.n_paths)
            .into_par_iter()
            .map(|p| {
                let (spot, var) = (paths.spot(p), paths.variance(p));
                let r = instrument_returns(spot, var, horizon, &grid, &pricer)?;
                let f: Vec<f64> = (0..horizon).flat_map(|t| features(spot, var, &cliquet, t)).collect();
                Ok((f, r.returns, cliquet_payoff(spot, &cliquet)))
            })
            .collect();
        let mut ds = Dataset {
            n_paths: paths.n_paths,
            horizon,
            d,
            features: Vec::with_capacity(paths.n_paths * horizon * N_FEATURES),
            returns: Vec::with_capacity(paths.n_paths * horizon * d),
            payoff: Vec::with_capacity(paths.n_paths),
            mask: grid.mask(horizon),
        };
        for item in per_path {
            let (f, r, psi) = item?;
            ds.features.extend(f);
            ds.returns.extend(r);
            ds.payoff.push(psi);
        }
        Ok(ds)
    }

    pub fn path_returns(&self, p: usize) -> &[f64] {
        let w = self.horizon * self.d;
        &self.returns[p * w..(p + 1) * w]
    }

    pub fn batch(&self, paths: &[usize]) -> Batch {
        let (t_n, d, n) = (self.horizon, self.d, paths.len());
        let mut features = Vec::with_capacity(t_n);
        let mut masks = Vec::with_capacity(t_n);
        let mut returns = Vec::with_capacity(t_n);
        for t in 0..t_n {
            features.push(Matrix64::from_fn(n, N_FEATURES, |r, k| {
                self.features[(paths[r] * t_n + t) * N_FEATURES + k]
            }));
            masks.push(Matrix64::from_fn(n, d, |_, i| self.mask[t * d + i]));
            returns.push(Matrix64::from_fn(n, d, |r, i| self.returns[(paths[r] * t_n + t) * d + i]));
        }
        Batch {
            features,
            masks,
            returns,
            payoff: Matrix64::from_fn(n, 1, |r, _| self.payoff[paths[r]]),
        }
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.n_paths).collect()
    }
}

/// Which simulated split a path belongs to. Splits use disjoint RNG stream
/// ranges of one simulation seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub fn simulate_split(cfg: &ExperimentConfig, split: Split) -> HarnessResult<PathSet> {
    let d = &cfg.data;
    let (first, n) = match split {
        Split::Train => (0, d.n_train),
        Split::Validation => (d.n_train, d.n_val),
        Split::Test => (d.n_train + d.n_val, d.n_test),
    };
    Ok(simulate_range(
        &cfg.market.heston(),
        first as u64,
        n,
        cfg.cliquet.horizon,
        cfg.market.dt,
        cfg.market.substeps,
        derive_seed(cfg.seed, Purpose::Market),
    )?)
}

pub fn build_split(cfg: &ExperimentConfig, split: Split) -> HarnessResult<Dataset> {
    let paths = simulate_split(cfg, split)?;
    let t0 = std::time::Instant::now();
    let ds = Dataset::build(&paths, cfg)?;
    log::info!("{split:?}: {} paths priced in {:.1?}", ds.n_paths, t0.elapsed());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.data.n_train = 6;
        cfg.data.n_val = 4;
        cfg.data.n_test = 4;
        cfg.training.batch_size = 4;
        cfg
    }

    #[test]
    fn splits_are_disjoint_streams_of_one_simulation() {
        let cfg = tiny();
        let train = simulate_split(&cfg, Split::Train).unwrap();
        let val = simulate_split(&cfg, Split::Validation).unwrap();
        let mut all = cfg.clone();
        all.data.n_train = 10;
        let joint = simulate_split(&all, Split::Train).unwrap();
        assert_eq!(joint.spot(7), val.spot(1));
        assert_eq!(joint.spot(2), train.spot(2));
    }

    #[test]
    fn dataset_layout_matches_direct_computation() {
        let cfg = tiny();
        let paths = simulate_split(&cfg, Split::Train).unwrap();
        let ds = Dataset::build(&paths, &cfg).unwrap();
        let cliquet = cfg.cliquet_spec().unwrap();
        assert_eq!(ds.features.len(), 6 * 60 * N_FEATURES);
        let b = ds.batch(&[4, 1]);
        assert_eq!(b.len(), 2);
        let f = features(paths.spot(1), paths.variance(1), &cliquet, 33);
        assert_eq!(b.features[33].row(1), &f);
        assert_eq!(b.payoff.get(0, 0), cliquet_payoff(paths.spot(4), &cliquet));
        assert_eq!(b.returns[59].get(1, 0), paths.spot(1)[60] - paths.spot(1)[59]);
        assert_eq!(b.masks[59].row(0)[1..], [0.0; 8]);
        assert_eq!(b.returns[5].row(0), &ds.path_returns(4)[5 * 9..6 * 9]);
    }
}
