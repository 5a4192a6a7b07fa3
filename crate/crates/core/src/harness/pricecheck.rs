//! Fourier pricer against the independent Monte-Carlo oracle.

use super::HarnessResult;
use crate::contracts::GridSpec;
use crate::market::mc_oracle::{McOracle, McQuery};
use crate::market::{HestonParams, HestonPricer, OptionKind};

/// Largest accepted |pricer − MC| in Monte-Carlo standard errors.
pub const MAX_Z: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceCheckRow {
    pub tau_steps: usize,
    pub log_moneyness: f64,
    pub kind: OptionKind,
    pub pricer: f64,
    pub mc: f64,
    pub std_err: f64,
}

impl PriceCheckRow {
    pub fn z(&self) -> f64 {
        (self.pricer - self.mc) / self.std_err
    }

    pub fn passed(&self) -> bool {
        self.z().abs() <= MAX_Z
    }
}

/// Prices every grid option at `(x0, v0)` with both methods.
pub fn price_check(params: &HestonParams, dt: f64, grid: &GridSpec, oracle: &McOracle) -> HarnessResult<Vec<PriceCheckRow>> {
    let queries: Vec<McQuery> = grid
        .entries
        .iter()
        .map(|e| McQuery {
            tau_steps: e.tau_steps,
            log_moneyness: e.log_moneyness,
            kind: e.kind,
        })
        .collect();
    let mc = oracle.price(params, dt, &queries)?;
    let pricer = HestonPricer::new(*params, dt)?;
    queries
        .iter()
        .zip(mc)
        .map(|(q, e)| {
            let p = pricer.price_strip(params.x0, params.v0, q.tau_steps, &[(q.log_moneyness, q.kind)])?[0];
            Ok(PriceCheckRow {
                tau_steps: q.tau_steps,
                log_moneyness: q.log_moneyness,
                kind: q.kind,
                pricer: p,
                mc: e.price,
                std_err: e.std_err,
            })
        })
        .collect()
}

pub fn format_table(rows: &[PriceCheckRow]) -> String {
    let mut out = format!(
        "{:>4} {:>8} {:>4} {:>12} {:>12} {:>10} {:>7} {}\n",
        "tau", "ln(K/x)", "kind", "pricer", "mc", "std_err", "z", "result"
    );
    for r in rows {
        let kind = match r.kind {
            OptionKind::Call => "call",
            OptionKind::Put => "put",
        };
        out.push_str(&format!(
            "{:>4} {:>+8.4} {:>4} {:>12.8} {:>12.8} {:>10.2e} {:>+7.2} {}\n",
            r.tau_steps,
            r.log_moneyness,
            kind,
            r.pricer,
            r.mc,
            r.std_err,
            r.z(),
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
