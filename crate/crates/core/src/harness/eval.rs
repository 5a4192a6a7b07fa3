//! Test-set evaluation of a trained policy.
//!
//! Three terminal PnL series `Γ_T − ψ` are reported per path: the policy's
//! (`hedged`), no trading at all (`unhedged`, so `−ψ`) and the policy with
//! every option action set to zero after the fact (`delta_only`, spot action
//! unchanged). Trading costs enter the objective only through their mean,
//! so they are kept out of the PnL and reported per path and in total.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Dataset;
use super::train::dataset_actions;
use super::{HarnessError, HarnessResult};
use crate::contracts::{gains_and_costs, objective_value};
use crate::policy::PolicyParams;

pub const HISTOGRAM_BINS: usize = 60;
pub const ACTION_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path: usize,
    pub payoff: f64,
    pub gains: f64,
    pub costs: f64,
    pub delta_gains: f64,
    pub delta_costs: f64,
}

impl PathRecord {
    pub fn hedged(&self) -> f64 {
        self.gains - self.payoff
    }

    pub fn unhedged(&self) -> f64 {
        -self.payoff
    }

    pub fn delta_only(&self) -> f64 {
        self.delta_gains - self.payoff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlSummary {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
}

impl PnlSummary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std: var.sqrt(),
            skewness: if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 },
        }
    }
}

/// Counts over shared bin edges for the three PnL series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub edges: Vec<f64>,
    pub hedged: Vec<u64>,
    pub unhedged: Vec<u64>,
    pub delta_only: Vec<u64>,
}

/// Quantiles of one instrument's action at one step across paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionQuantiles {
    pub step: usize,
    pub instrument: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problem_hash: String,
    pub n_paths: usize,
    pub gamma: f64,
    /// Training objective on the evaluation paths.
    pub loss: f64,
    pub hedged: PnlSummary,
    pub unhedged: PnlSummary,
    pub delta_only: PnlSummary,
    /// `delta_only.std / hedged.std`.
    pub option_std_ratio: f64,
    /// Sum of per-path trading costs of the hedged strategy.
    pub total_costs: f64,
    pub mean_costs: f64,
    pub histograms: Histograms,
    pub quantile_levels: Vec<f64>,
    pub action_quantiles: Vec<ActionQuantiles>,
}

pub fn evaluate(cfg: &ExperimentConfig, params: &PolicyParams, test: &Dataset) -> HarnessResult<(EvalReport, Vec<PathRecord>)> {
    let costs = cfg.cost_spec()?;
    let (t_n, d) = (test.horizon, test.d);
    if test.n_paths < 2 {
        return Err(HarnessError::Config(format!("{} evaluation paths", test.n_paths)));
    }
    let actions = dataset_actions(params, test)?;
    let w = t_n * d;
    let records: Vec<PathRecord> = (0..test.n_paths)
        .map(|p| {
            let u = &actions[p * w..(p + 1) * w];
            let r = test.path_returns(p);
            let (gains, c) = gains_and_costs(u, r, &costs);
            let spot_only: Vec<f64> = u.iter().enumerate().map(|(k, &a)| if k % d == 0 { a } else { 0.0 }).collect();
            let (delta_gains, delta_costs) = gains_and_costs(&spot_only, r, &costs);
            PathRecord {
                path: p,
                payoff: test.payoff[p],
                gains,
                costs: c,
                delta_gains,
                delta_costs,
            }
        })
        .collect();
    if records.iter().any(|r| !r.hedged().is_finite() || !r.delta_only().is_finite()) {
        return Err(HarnessError::Numerical("non-finite evaluation PnL".into()));
    }
    let gains: Vec<f64> = records.iter().map(|r| r.gains).collect();
    let path_costs: Vec<f64> = records.iter().map(|r| r.costs).collect();
    let loss = objective_value(&gains, &test.payoff, &path_costs, cfg.gamma)?;

    let hedged: Vec<f64> = records.iter().map(PathRecord::hedged).collect();
    let unhedged: Vec<f64> = records.iter().map(PathRecord::unhedged).collect();
    let delta: Vec<f64> = records.iter().map(PathRecord::delta_only).collect();
    let (hs, us, ds) = (PnlSummary::of(&hedged), PnlSummary::of(&unhedged), PnlSummary::of(&delta));
    let total_costs: f64 = path_costs.iter().sum();

    let mut action_quantiles = Vec::with_capacity(w);
    let mut column = vec![0.0; test.n_paths];
    for t in 0..t_n {
        for i in 0..d {
            for (p, slot) in column.iter_mut().enumerate() {
                *slot = actions[p * w + t * d + i];
            }
            column.sort_by(f64::total_cmp);
            action_quantiles.push(ActionQuantiles {
                step: t,
                instrument: i,
                values: ACTION_QUANTILES.iter().map(|&q| quantile_sorted(&column, q)).collect(),
            });
        }
    }

    let report = EvalReport {
        problem_hash: cfg.problem_hash(),
        n_paths: test.n_paths,
        gamma: cfg.gamma,
        loss,
        option_std_ratio: ds.std / hs.std,
        hedged: hs,
        unhedged: us,
        delta_only: ds,
        total_costs,
        mean_costs: total_costs / test.n_paths as f64,
        histograms: histograms(&hedged, &unhedged, &delta, HISTOGRAM_BINS),
        quantile_levels: ACTION_QUANTILES.to_vec(),
        action_quantiles,
    };
    Ok((report, records))
}

/// Linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn histograms(hedged: &[f64], unhedged: &[f64], delta: &[f64], bins: usize) -> Histograms {
    let all = hedged.iter().chain(unhedged).chain(delta);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0u64; bins];
        for &x in xs {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            c[k] += 1;
        }
        c
    };
    Histograms {
        edges,
        hedged: count(hedged),
        unhedged: count(unhedged),
        delta_only: count(delta),
    }
}

pub const PATH_CSV_HEADER: &str = "path,payoff,gains,costs,delta_gains,delta_costs,pnl_hedged,pnl_unhedged,pnl_delta_only";

/// Per-path dump. Values are written in shortest round-trip form so totals
/// recomputed from the file match the report exactly.
pub fn write_path_csv(w: &mut impl Write, records: &[PathRecord]) -> std::io::Result<()> {
    writeln!(w, "{PATH_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.path,
            r.payoff,
            r.gains,
            r.costs,
            r.delta_gains,
            r.delta_costs,
            r.hedged(),
            r.unhedged(),
            r.delta_only()
        )?;
    }
    Ok(())
}

pub fn read_path_csv(text: &str) -> HarnessResult<Vec<PathRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(PATH_CSV_HEADER) {
        return Err(HarnessError::Config("unexpected per-path CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |k: usize| -> HarnessResult<f64> {
                f.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| HarnessError::Config(format!("bad per-path row {l:?}")))
            };
            Ok(PathRecord {
                path: f[0].parse().map_err(|_| HarnessError::Config(format!("bad path index in {l:?}")))?,
                payoff: num(1)?,
                gains: num(2)?,
                costs: num(3)?,
                delta_gains: num(4)?,
                delta_costs: num(5)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::simulate;
    use crate::policy::PolicyParams;

    fn tiny() -> (ExperimentConfig, Dataset) {
        let mut cfg = ExperimentConfig::desk();
        cfg.policy.n_blocks = 1;
        cfg.policy.hidden = 4;
        let paths = simulate(&cfg.market.heston(), 300, 60, cfg.market.dt, cfg.market.substeps, 11).unwrap();
        let ds = Dataset::build(&paths, &cfg).unwrap();
        (cfg, ds)
    }

    #[test]
    fn zero_policy_pnl_is_minus_payoff() {
        let (cfg, ds) = tiny();
        let params = crate::policy::init_params(&cfg.policy_config(), 1).zeros_like();
        let (rep, recs) = evaluate(&cfg, &params, &ds).unwrap();
        for r in &recs {
            assert_eq!(r.hedged(), -r.payoff);
        }
        let psi = PnlSummary::of(&ds.payoff);
        assert!((rep.hedged.std - psi.std).abs() < 1e-15);
        assert_eq!(rep.total_costs, 0.0);
        assert_eq!(rep.hedged, rep.unhedged);
    }

    #[test]
    fn totals_recompute_from_dump() {
        let (cfg, ds) = tiny();
        let mut pcfg = cfg.policy_config();
        pcfg.head_scale = 0.1;
        let params: PolicyParams = crate::policy::init_params(&pcfg, 5);
        let (rep, recs) = evaluate(&cfg, &params, &ds).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &recs).unwrap();
        let back = read_path_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, recs);
        let total: f64 = back.iter().map(|r| r.costs).sum();
        assert_eq!(total, rep.total_costs);
        let hedged: Vec<f64> = back.iter().map(PathRecord::hedged).collect();
        assert_eq!(PnlSummary::of(&hedged), rep.hedged);
        assert_eq!(rep.histograms.hedged.iter().sum::<u64>(), ds.n_paths as u64);
        assert_eq!(rep.action_quantiles.len(), ds.horizon * ds.d);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.875), 4.5);
        assert_eq!(quantile_sorted(&xs, 1.0), 5.0);
    }
}
