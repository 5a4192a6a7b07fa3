//! Floating-grid instruments, the cliquet liability, transaction costs and
//! the mean-variance hedging objective.
//!
//! Instrument 0 is the spot. Instrument `i > 0` is the grid option
//! `entries[i - 1]`, struck at `x_t·e^{k}` and bought at time `t` for its
//! model price; its return is the payoff at `t + τ` minus that premium.
//! Actions and returns are stored per path as `T x d` row-major arrays and
//! flattened in the same order (`t·d + i`) for the inner Hessian.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};
use crate::market::{MarketError, OptionKind, StripPricer};
use crate::matrix::Matrix64;

#[derive(Debug, Error)]
pub enum ContractError {
    #[error("invalid option grid: {0}")]
    Grid(String),
    #[error("invalid cliquet: {0}")]
    Cliquet(String),
    #[error("invalid costs: {0}")]
    Costs(String),
    #[error("batch objective needs at least 2 paths, got {0}")]
    BatchTooSmall(usize),
    #[error("path of length {len} does not cover horizon {horizon}")]
    ShortPath { len: usize, horizon: usize },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type ContractResult<T> = Result<T, ContractError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub tau_steps: usize,
    pub log_moneyness: f64,
    pub kind: OptionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub entries: Vec<GridEntry>,
}

/// One maturity of a grid with its strike ratios `K/x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityStrip {
    pub tau_steps: usize,
    pub ratios: Vec<f64>,
}

impl GridSpec {
    /// Options are calls exactly when `k > 0`.
    pub fn from_strips(strips: &[MaturityStrip]) -> ContractResult<Self> {
        let mut entries = Vec::new();
        for s in strips {
            for &ratio in &s.ratios {
                if !(ratio > 0.0) || !ratio.is_finite() {
                    return Err(ContractError::Grid(format!("strike ratio {ratio}")));
                }
                let k = ratio.ln();
                entries.push(GridEntry {
                    tau_steps: s.tau_steps,
                    log_moneyness: k,
                    kind: if k > 0.0 { OptionKind::Call } else { OptionKind::Put },
                });
            }
        }
        let grid = GridSpec { entries };
        grid.validate()?;
        Ok(grid)
    }

    pub fn reference_strips() -> Vec<MaturityStrip> {
        let strip = |tau_steps, ratios: &[f64]| MaturityStrip {
            tau_steps,
            ratios: ratios.to_vec(),
        };
        vec![
            strip(10, &[0.99, 1.0, 1.01]),
            strip(20, &[0.97, 0.99, 1.0, 1.01, 1.03]),
            strip(40, &[0.95, 1.0, 1.05]),
            strip(80, &[0.91, 1.0, 1.09]),
            strip(120, &[0.85, 0.95, 1.0, 1.05, 1.15]),
        ]
    }

    /// The 19-option reference grid.
    pub fn reference() -> Self {
        Self::from_strips(&Self::reference_strips()).expect("reference grid is valid")
    }

    /// The reference grid restricted to the 10- and 20-step maturities.
    pub fn desk() -> Self {
        let strips: Vec<_> = Self::reference_strips()
            .into_iter()
            .filter(|s| s.tau_steps <= 20)
            .collect();
        Self::from_strips(&strips).expect("desk grid is valid")
    }

    pub fn validate(&self) -> ContractResult<()> {
        for e in &self.entries {
            let call = e.log_moneyness > 0.0;
            if e.tau_steps == 0
                || !e.log_moneyness.is_finite()
                || call != (e.kind == OptionKind::Call)
            {
                return Err(ContractError::Grid(format!("{e:?}")));
            }
        }
        Ok(())
    }

    /// Option indices grouped by maturity, maturities ascending.
    pub fn strips(&self) -> Vec<(usize, Vec<usize>)> {
        let mut taus: Vec<usize> = self.entries.iter().map(|e| e.tau_steps).collect();
        taus.sort_unstable();
        taus.dedup();
        taus.into_iter()
            .map(|tau| (tau, (0..self.entries.len()).filter(|&j| self.entries[j].tau_steps == tau).collect()))
            .collect()
    }

    /// Log-moneyness lists per maturity, in the order [`Self::strips`] uses.
    pub fn strip_strikes(&self) -> Vec<(usize, Vec<f64>)> {
        self.strips()
            .into_iter()
            .map(|(tau, idx)| (tau, idx.iter().map(|&j| self.entries[j].log_moneyness).collect()))
            .collect()
    }

    /// Number of tradable instruments, spot included.
    pub fn n_instruments(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn is_available(&self, instrument: usize, t: usize, horizon: usize) -> bool {
        instrument == 0 || self.entries[instrument - 1].tau_steps + t <= horizon
    }

    /// `T x d` availability mask with entries in `{0, 1}`.
    pub fn mask(&self, horizon: usize) -> Vec<f64> {
        let d = self.n_instruments();
        let mut m = vec![0.0; horizon * d];
        for t in 0..horizon {
            for i in 0..d {
                if self.is_available(i, t, horizon) {
                    m[t * d + i] = 1.0;
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliquetSpec {
    pub cap: f64,
    /// Strictly increasing reset steps; the last one is the horizon.
    pub resets: Vec<usize>,
}

impl CliquetSpec {
    pub fn periodic(period: usize, horizon: usize, cap: f64) -> ContractResult<Self> {
        if period == 0 || horizon % period != 0 || horizon == 0 {
            return Err(ContractError::Cliquet(format!(
                "period {period} does not divide horizon {horizon}"
            )));
        }
        let spec = Self {
            cap,
            resets: (1..=horizon / period).map(|j| j * period).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cap 0.015 with monthly resets over 240 steps.
    pub fn reference() -> Self {
        Self::periodic(20, 240, 0.015).expect("reference cliquet is valid")
    }

    pub fn validate(&self) -> ContractResult<()> {
        let increasing = self.resets.windows(2).all(|w| w[0] < w[1]);
        if self.resets.is_empty() || self.resets[0] == 0 || !increasing || !self.cap.is_finite() {
            return Err(ContractError::Cliquet(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        *self.resets.last().expect("validated cliquet has resets")
    }

    /// Largest reset date `≤ t`, with `0` before the first reset.
    pub fn last_reset(&self, t: usize) -> usize {
        self.resets.iter().rev().find(|&&r| r <= t).copied().unwrap_or(0)
    }

    /// Position of `t` inside its period, in `[0, 1)`.
    pub fn phase(&self, t: usize) -> f64 {
        let start = self.last_reset(t);
        match self.resets.iter().find(|&&r| r > t) {
            Some(&end) => (t - start) as f64 / (end - start) as f64,
            None => 0.0,
        }
    }
}

/// `max(Σ_j min(x_{τj}/x_{τj−1} − 1, μ), 0)` with `τ_0 = 0`.
pub fn cliquet_payoff(spot: &[f64], spec: &CliquetSpec) -> f64 {
    let mut total = 0.0;
    let mut prev = 0;
    for &r in &spec.resets {
        total += (spot[r] / spot[prev] - 1.0).min(spec.cap);
        prev = r;
    }
    total.max(0.0)
}

/// Cliquet payoff if the contract matured at `t`: completed periods plus the
/// capped return of the running one, floored at zero.
pub fn running_cliquet_value(spot: &[f64], spec: &CliquetSpec, t: usize) -> f64 {
    let mut total = 0.0;
    let mut prev = 0;
    for &r in spec.resets.iter().take_while(|&&r| r <= t) {
        total += (spot[r] / spot[prev] - 1.0).min(spec.cap);
        prev = r;
    }
    total += (spot[t] / spot[prev] - 1.0).min(spec.cap);
    total.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    /// Proportional costs, one per instrument.
    pub c: Vec<f64>,
    /// Quadratic surrogate costs used in the inner Hessian.
    pub c_tilde: Vec<f64>,
}

impl CostSpec {
    /// `c̃ = ratio·c`.
    pub fn new(c: Vec<f64>, ratio: f64) -> ContractResult<Self> {
        let c_tilde = c.iter().map(|v| v * ratio).collect();
        let spec = Self { c, c_tilde };
        spec.validate(spec.c.len())?;
        Ok(spec)
    }

    /// `1e-4` for the spot, `1e-2` for options, `c̃ = 8c`.
    pub fn reference(d: usize) -> Self {
        let c = (0..d).map(|i| if i == 0 { 1e-4 } else { 1e-2 }).collect();
        Self::new(c, 8.0).expect("reference costs are valid")
    }

    pub fn validate(&self, d: usize) -> ContractResult<()> {
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if self.c.len() != d || self.c_tilde.len() != d || !positive(&self.c) || !positive(&self.c_tilde) {
            return Err(ContractError::Costs(format!("{self:?} for {d} instruments")));
        }
        Ok(())
    }
}

/// Per-path returns `r[t][i]` and option premiums, both `T x ·` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathReturns {
    pub horizon: usize,
    pub d: usize,
    pub returns: Vec<f64>,
    /// `T x (d − 1)`; zero where the option is unavailable.
    pub premiums: Vec<f64>,
}

/// Returns of every instrument traded at every step of one path. Premiums are
/// subtracted at face value.
pub fn instrument_returns(
    spot: &[f64],
    variance: &[f64],
    horizon: usize,
    grid: &GridSpec,
    pricer: &impl StripPricer,
) -> ContractResult<PathReturns> {
    if spot.len() < horizon + 1 || variance.len() < horizon + 1 {
        return Err(ContractError::ShortPath {
            len: spot.len().min(variance.len()),
            horizon,
        });
    }
    let d = grid.n_instruments();
    let n_opt = d - 1;
    let mut returns = vec![0.0; horizon * d];
    let mut premiums = vec![0.0; horizon * n_opt];
    let strips = grid.strips();
    for t in 0..horizon {
        let x = spot[t];
        returns[t * d] = spot[horizon] - x;
        for (tau, idx) in strips.iter().filter(|(tau, _)| t + tau <= horizon) {
            let tau = *tau;
            let strip: Vec<(f64, OptionKind)> = idx
                .iter()
                .map(|&j| (grid.entries[j].log_moneyness, grid.entries[j].kind))
                .collect();
            let prices = pricer.price_strip(x, variance[t], tau, &strip)?;
            let x_end = spot[t + tau];
            for (&j, price) in idx.iter().zip(prices) {
                let e = &grid.entries[j];
                let strike = x * e.log_moneyness.exp();
                let payoff = match e.kind {
                    OptionKind::Call => (x_end - strike).max(0.0),
                    OptionKind::Put => (strike - x_end).max(0.0),
                };
                premiums[t * n_opt + j] = price;
                returns[t * d + j + 1] = payoff - price;
            }
        }
    }
    Ok(PathReturns {
        horizon,
        d,
        returns,
        premiums,
    })
}

/// Terminal hedging gains `Γ_T = Σ_t ⟨u_t, r_t⟩` and costs `Σ_t ⟨c, |u_t|⟩`
/// of one path.
pub fn gains_and_costs(actions: &[f64], returns: &[f64], costs: &CostSpec) -> (f64, f64) {
    let d = costs.c.len();
    let mut gains = 0.0;
    let mut cost = 0.0;
    for (u, r) in actions.chunks_exact(d).zip(returns.chunks_exact(d)) {
        for i in 0..d {
            gains += u[i] * r[i];
            cost += costs.c[i] * u[i].abs();
        }
    }
    (gains, cost)
}

/// `γ·Var(Γ_T − ψ) + mean(C_T)` from per-path gains, payoffs and costs.
pub fn objective_value(gains: &[f64], payoffs: &[f64], costs: &[f64], gamma: f64) -> ContractResult<f64> {
    let n = gains.len();
    if n < 2 {
        return Err(ContractError::BatchTooSmall(n));
    }
    let pnl: Vec<f64> = gains.iter().zip(payoffs).map(|(g, p)| g - p).collect();
    let m = pnl.iter().sum::<f64>() / n as f64;
    let var = pnl.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (n - 1) as f64;
    Ok(gamma * var + costs.iter().sum::<f64>() / n as f64)
}

/// Differentiable terminal PnL and costs, both `B x 1`, from per-step action
/// nodes (`B x d`) and constant returns.
fn pnl_and_costs(
    tape: &mut Tape,
    actions: &[Var],
    returns: &[Matrix64],
    payoff: &Matrix64,
    costs: &CostSpec,
) -> ContractResult<(Var, Var)> {
    let c = tape.constant(Matrix64::column(&costs.c))?;
    let mut gains: Option<Var> = None;
    let mut total_cost: Option<Var> = None;
    for (&u, r) in actions.iter().zip(returns) {
        let r = tape.constant(r.clone())?;
        let ur = tape.mul(u, r)?;
        let g = tape.sum_rows(ur)?;
        let a = tape.abs(u)?;
        let cu = tape.matmul(a, c)?;
        gains = Some(match gains {
            Some(acc) => tape.add(acc, g)?,
            None => g,
        });
        total_cost = Some(match total_cost {
            Some(acc) => tape.add(acc, cu)?,
            None => cu,
        });
    }
    let (gains, total_cost) = match (gains, total_cost) {
        (Some(g), Some(c)) => (g, c),
        _ => {
            let z = tape.constant(Matrix64::zeros(payoff.rows(), 1))?;
            (z, z)
        }
    };
    let psi = tape.constant(payoff.clone())?;
    let pnl = tape.sub(gains, psi)?;
    Ok((pnl, total_cost))
}

/// `γ·Var(Γ_T − ψ) + mean(C_T)` over the batch, on the tape.
pub fn batch_objective(
    tape: &mut Tape,
    actions: &[Var],
    returns: &[Matrix64],
    payoff: &Matrix64,
    gamma: f64,
    costs: &CostSpec,
) -> ContractResult<Var> {
    if payoff.rows() < 2 {
        return Err(ContractError::BatchTooSmall(payoff.rows()));
    }
    let (pnl, cost) = pnl_and_costs(tape, actions, returns, payoff, costs)?;
    let var = tape.sample_variance(pnl)?;
    let risk = tape.scale(var, gamma)?;
    let mean_cost = tape.mean(cost)?;
    Ok(tape.add(risk, mean_cost)?)
}

/// Contribution of one shard of a batch of size `batch` whose mean PnL is
/// `batch_mean_pnl`: `Σ_j γ/(B−1)·(P_j − M)² + C_j/B`. With `M` held constant
/// its gradient equals the gradient of [`batch_objective`] restricted to the
/// shard, and the shard values sum to the batch objective.
pub fn shard_objective(
    tape: &mut Tape,
    actions: &[Var],
    returns: &[Matrix64],
    payoff: &Matrix64,
    gamma: f64,
    costs: &CostSpec,
    batch: usize,
    batch_mean_pnl: f64,
) -> ContractResult<Var> {
    if batch < 2 {
        return Err(ContractError::BatchTooSmall(batch));
    }
    let (pnl, cost) = pnl_and_costs(tape, actions, returns, payoff, costs)?;
    let m = tape.constant(Matrix64::filled(payoff.rows(), 1, batch_mean_pnl))?;
    let centered = tape.sub(pnl, m)?;
    let sq = tape.square(centered)?;
    let risk = tape.sum(sq)?;
    let risk = tape.scale(risk, gamma / (batch - 1) as f64)?;
    let cost = tape.sum(cost)?;
    let cost = tape.scale(cost, 1.0 / batch as f64)?;
    Ok(tape.add(risk, cost)?)
}

/// `H_u = 2γ·r rᵀ + diag(2c̃, …, 2c̃)` for one path, kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerHessian {
    pub gamma: f64,
    /// Flattened `T x d` returns, zero where masked.
    pub r: Vec<f64>,
    /// `2c̃` repeated over time steps.
    pub diag: Vec<f64>,
}

impl InnerHessian {
    pub fn new(path_returns: &[f64], gamma: f64, costs: &CostSpec) -> Self {
        let d = costs.c_tilde.len();
        let diag = (0..path_returns.len()).map(|j| 2.0 * costs.c_tilde[j % d]).collect();
        Self {
            gamma,
            r: path_returns.to_vec(),
            diag,
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let rv: f64 = self.r.iter().zip(v).map(|(a, b)| a * b).sum();
        let k = 2.0 * self.gamma * rv;
        self.r
            .iter()
            .zip(&self.diag)
            .zip(v)
            .map(|((r, d), x)| k * r + d * x)
            .collect()
    }

    pub fn dense(&self) -> Matrix64 {
        let n = self.dim();
        Matrix64::from_fn(n, n, |i, j| {
            2.0 * self.gamma * self.r[i] * self.r[j] + if i == j { self.diag[i] } else { 0.0 }
        })
    }

    /// `s = √(2γ)·r·ζ₀ + √(2c̃)∘ζ` for given standard normals.
    pub fn pseudo_target_from(&self, zeta0: f64, zeta: &[f64]) -> Vec<f64> {
        let a = (2.0 * self.gamma).sqrt() * zeta0;
        self.r
            .iter()
            .zip(&self.diag)
            .zip(zeta)
            .map(|((r, d), z)| a * r + d.sqrt() * z)
            .collect()
    }

    /// A draw with covariance exactly `H_u`.
    pub fn sample_pseudo_target(&self, rng: &mut impl Rng) -> Vec<f64> {
        let zeta0: f64 = rng.sample(StandardNormal);
        let zeta: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.pseudo_target_from(zeta0, &zeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{HestonParams, HestonPricer};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_from_returns(period_returns: &[f64], period: usize) -> Vec<f64> {
        let mut spot = vec![1.0];
        for r in period_returns {
            let start = *spot.last().unwrap();
            for s in 1..=period {
                spot.push(start * (1.0 + r * s as f64 / period as f64));
            }
        }
        spot
    }

    #[test]
    fn reference_grid_layout() {
        let g = GridSpec::reference();
        assert_eq!(g.entries.len(), 19);
        assert_eq!(g.n_instruments(), 20);
        assert_eq!(GridSpec::desk().n_instruments(), 9);
        let calls = g.entries.iter().filter(|e| e.kind == OptionKind::Call).count();
        assert_eq!(calls, 7);
        let atm = g.entries.iter().find(|e| e.tau_steps == 10 && e.log_moneyness == 0.0).unwrap();
        assert_eq!(atm.kind, OptionKind::Put);
        assert!((g.entries[18].log_moneyness - 1.15f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mask_follows_remaining_time() {
        let g = GridSpec::desk();
        let m = g.mask(60);
        let d = g.n_instruments();
        for t in 0..60 {
            assert_eq!(m[t * d], 1.0);
            for (j, e) in g.entries.iter().enumerate() {
                let expected = if e.tau_steps > 60 - t { 0.0 } else { 1.0 };
                assert_eq!(m[t * d + j + 1], expected, "t={t} option {j}");
            }
        }
        assert_eq!(m[50 * d + 1], 1.0);
        assert_eq!(m[51 * d + 1], 0.0);
    }

    #[test]
    fn cliquet_examples() {
        let spec = CliquetSpec::reference();
        assert_eq!(spec.resets.len(), 12);
        let up = path_from_returns(&[0.02; 12], 20);
        assert!((cliquet_payoff(&up, &spec) - 0.18).abs() < 1e-15);
        let down = path_from_returns(&[-0.01, 0.0, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 20);
        assert_eq!(cliquet_payoff(&down, &spec), 0.0);
        let two = CliquetSpec::periodic(20, 40, 0.015).unwrap();
        let p = path_from_returns(&[0.05, -0.01], 20);
        assert!((cliquet_payoff(&p, &two) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn running_value_examples() {
        let spec = CliquetSpec::reference();
        let up = path_from_returns(&[0.02; 12], 20);
        assert_eq!(running_cliquet_value(&up, &spec, 0), 0.0);
        assert_eq!(running_cliquet_value(&up, &spec, 240), cliquet_payoff(&up, &spec));
        // Two completed periods and a running one past its cap.
        let v = running_cliquet_value(&up, &spec, 59);
        assert!((v - 3.0 * 0.015).abs() < 1e-15);
    }

    #[test]
    fn phase_and_last_reset() {
        let spec = CliquetSpec::periodic(20, 60, 0.015).unwrap();
        assert_eq!(spec.last_reset(0), 0);
        assert_eq!(spec.last_reset(19), 0);
        assert_eq!(spec.last_reset(20), 20);
        assert_eq!(spec.phase(5), 0.25);
        assert_eq!(spec.phase(20), 0.0);
        assert_eq!(spec.phase(60), 0.0);
        assert!(CliquetSpec::periodic(7, 60, 0.015).is_err());
    }

    #[test]
    fn flat_path_atm_put_loses_its_premium() {
        let pricer = HestonPricer::new(HestonParams::default(), 1.0 / 250.0).unwrap();
        let grid = GridSpec::desk();
        let spot = vec![1.0; 61];
        let var = vec![0.0625; 61];
        let pr = instrument_returns(&spot, &var, 60, &grid, &pricer).unwrap();
        let j = grid.entries.iter().position(|e| e.tau_steps == 10 && e.log_moneyness == 0.0).unwrap();
        assert!(pr.returns[pr.d + j + 1] < 0.0);
        assert_eq!(pr.returns[pr.d + j + 1], -pr.premiums[(pr.d - 1) + j]);
        assert_eq!(pr.returns[0], 0.0);
        // Beyond the horizon everything is masked.
        assert!(pr.returns[55 * pr.d + 1..56 * pr.d].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn inner_hessian_scalar_case() {
        let costs = CostSpec::new(vec![1e-4], 8.0).unwrap();
        let h = InnerHessian::new(&[0.1], 1000.0, &costs);
        assert!((h.dense().item() - 20.0016).abs() < 1e-12);
        let h0 = InnerHessian::new(&[0.1, 0.3], 0.0, &costs);
        assert_eq!(h0.dense(), Matrix64::from_rows(&[vec![1.6e-3, 0.0], vec![0.0, 1.6e-3]]).unwrap());
        assert!(h.pseudo_target_from(0.0, &[0.0]).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn hand_computed_objective() {
        // Three paths, T = 1, d = 2.
        let costs = CostSpec::new(vec![0.1, 0.2], 8.0).unwrap();
        let u = [[1.0, -2.0], [0.5, 0.0], [-1.0, 1.0]];
        let r = [[0.2, 0.1], [-0.4, 0.3], [0.1, -0.5]];
        let psi = [0.3, 0.0, 0.1];
        // Gains 0.0, −0.2, −0.6; PnL −0.3, −0.2, −0.7; mean −0.4.
        // Variance (0.01 + 0.04 + 0.09)/2 = 0.07; costs 0.5, 0.05, 0.3.
        let expected = 10.0 * 0.07 + 0.85 / 3.0;
        let mut tape = Tape::new(false);
        let actions = [tape.constant(Matrix64::from_rows(&u.map(|x| x.to_vec())).unwrap()).unwrap()];
        let returns = [Matrix64::from_rows(&r.map(|x| x.to_vec())).unwrap()];
        let loss = batch_objective(&mut tape, &actions, &returns, &Matrix64::column(&psi), 10.0, &costs).unwrap();
        assert!((tape.value(loss).item() - expected).abs() < 1e-14);
        let mut g = vec![];
        let mut c = vec![];
        for p in 0..3 {
            let (gp, cp) = gains_and_costs(&u[p], &r[p], &costs);
            g.push(gp);
            c.push(cp);
        }
        assert!((objective_value(&g, &psi, &c, 10.0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn objective_special_cases_and_errors() {
        let costs = CostSpec::reference(2);
        let psi = Matrix64::column(&[0.01, 0.05, 0.0, 0.02]);
        let var_psi = {
            let m = psi.mean();
            psi.as_slice().iter().map(|p| (p - m).powi(2)).sum::<f64>() / 3.0
        };
        let mut tape = Tape::new(false);
        let zero = tape.constant(Matrix64::zeros(4, 2)).unwrap();
        let r = vec![Matrix64::filled(4, 2, 0.3)];
        let loss = batch_objective(&mut tape, &[zero], &r, &psi, 1000.0, &costs).unwrap();
        assert!((tape.value(loss).item() - 1000.0 * var_psi).abs() < 1e-12);

        let same = tape.constant(Matrix64::filled(4, 2, 0.5)).unwrap();
        let flat = Matrix64::filled(4, 1, 0.02);
        let loss = batch_objective(&mut tape, &[same], &r, &flat, 1000.0, &costs).unwrap();
        assert!((tape.value(loss).item() - 0.5 * (1e-4 + 1e-2)).abs() < 1e-15);

        let one = tape.constant(Matrix64::zeros(1, 2)).unwrap();
        assert!(matches!(
            batch_objective(&mut tape, &[one], &r, &Matrix64::zeros(1, 1), 1.0, &costs),
            Err(ContractError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (n, horizon, d) = (3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let costs = CostSpec::new(vec![1e-3, 2e-2, 5e-3], 8.0).unwrap();
        let rand_m = |rng: &mut ChaCha8Rng, r, c| Matrix64::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let u: Vec<Matrix64> = (0..horizon).map(|_| rand_m(&mut rng, n, d)).collect();
        let r: Vec<Matrix64> = (0..horizon).map(|_| rand_m(&mut rng, n, d).scale(0.1)).collect();
        let psi = rand_m(&mut rng, n, 1).map(f64::abs);
        let eval = |u: &[Matrix64]| {
            let mut t = Tape::new(false);
            let vars: Vec<Var> = u.iter().enumerate().map(|(k, m)| t.param(k, m).unwrap()).collect();
            let l = batch_objective(&mut t, &vars, &r, &psi, 3.0, &costs).unwrap();
            (t, l)
        };
        let (tape, loss) = eval(&u);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for k in 0..horizon {
            for j in 0..n * d {
                let mut up = u.clone();
                up[k].as_mut_slice()[j] += h;
                let mut dn = u.clone();
                dn[k].as_mut_slice()[j] -= h;
                let (tp, lp) = eval(&up);
                let (tm, lm) = eval(&dn);
                let fd = (tape_val(&tp, lp) - tape_val(&tm, lm)) / (2.0 * h);
                let an = grads.param(k).unwrap().as_slice()[j];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    fn tape_val(t: &Tape, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn shards_reproduce_the_batch_gradient() {
        let (n, d) = (6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let costs = CostSpec::reference(d);
        let u = Matrix64::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let r = Matrix64::from_fn(n, d, |_, _| rng.random_range(-0.1..0.1));
        let psi = Matrix64::from_fn(n, 1, |_, _| rng.random_range(0.0..0.1));
        let mut t = Tape::new(false);
        let uv = t.param(0, &u).unwrap();
        let l = batch_objective(&mut t, &[uv], &[r.clone()], &psi, 1000.0, &costs).unwrap();
        let full = t.backward(l).unwrap().param(0).unwrap().clone();
        let full_loss = t.value(l).item();
        let pnl: Vec<f64> = (0..n)
            .map(|p| gains_and_costs(u.row(p), r.row(p), &costs).0 - psi.get(p, 0))
            .collect();
        let m = pnl.iter().sum::<f64>() / n as f64;
        let mut total = 0.0;
        for (lo, hi) in [(0, 4), (4, 6)] {
            let sel = |x: &Matrix64| Matrix64::from_fn(hi - lo, x.cols(), |i, j| x.get(lo + i, j));
            let mut t = Tape::new(false);
            let uv = t.param(0, &sel(&u)).unwrap();
            let l = shard_objective(&mut t, &[uv], &[sel(&r)], &sel(&psi), 1000.0, &costs, n, m).unwrap();
            total += t.value(l).item();
            let g = t.backward(l).unwrap();
            let g = g.param(0).unwrap();
            for i in 0..hi - lo {
                for j in 0..d {
                    assert!((g.get(i, j) - full.get(lo + i, j)).abs() < 1e-12);
                }
            }
        }
        assert!((total - full_loss).abs() < 1e-12);
    }

    #[test]
    fn pseudo_target_covariance_matches_dense_hessian() {
        let costs = CostSpec::new(vec![1e-2, 3e-2, 2e-2], 8.0).unwrap();
        let r = [0.05, -0.02, 0.0, 0.01, 0.03, -0.04];
        let h = InnerHessian::new(&r, 2.0, &costs);
        let dense = h.dense();
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = h.dim();
        let mut m1 = vec![0.0; dim * dim];
        let mut m2 = vec![0.0; dim * dim];
        for _ in 0..n {
            let s = h.sample_pseudo_target(&mut rng);
            for i in 0..dim {
                for j in 0..dim {
                    let x = s[i] * s[j];
                    m1[i * dim + j] += x;
                    m2[i * dim + j] += x * x;
                }
            }
        }
        for i in 0..dim * dim {
            let mean = m1[i] / n as f64;
            let se = ((m2[i] / n as f64 - mean * mean) / n as f64).sqrt();
            let target = dense.as_slice()[i];
            assert!((mean - target).abs() <= 5.0 * se, "entry {i}: {mean} vs {target} (se {se})");
        }
    }

    proptest! {
        #[test]
        fn cliquet_payoff_is_bounded(rets in prop::collection::vec(-0.3f64..0.3, 1..8)) {
            let spec = CliquetSpec::periodic(3, 3 * rets.len(), 0.015).unwrap();
            let spot = path_from_returns(&rets, 3);
            let p = cliquet_payoff(&spot, &spec);
            prop_assert!(p >= 0.0);
            prop_assert!(p <= rets.len() as f64 * 0.015 + 1e-15);
            prop_assert_eq!(running_cliquet_value(&spot, &spec, spec.horizon()), p);
        }

        #[test]
        fn structured_matvec_matches_dense(
            r in prop::collection::vec(-0.2f64..0.2, 6),
            v in prop::collection::vec(-1.0f64..1.0, 6),
            gamma in 0.0f64..2000.0,
        ) {
            let costs = CostSpec::new(vec![1e-4, 1e-2, 3e-3], 8.0).unwrap();
            let h = InnerHessian::new(&r, gamma, &costs);
            let dense = h.dense().matmul(&Matrix64::column(&v)).unwrap();
            let fast = h.matvec(&v);
            for (a, b) in dense.as_slice().iter().zip(&fast) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // Positive definite: vᵀHv ≥ min(diag)·|v|².
            let q: f64 = fast.iter().zip(&v).map(|(a, b)| a * b).sum();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!(q >= 1.6e-3 * vv - 1e-15);
        }
    }
}
