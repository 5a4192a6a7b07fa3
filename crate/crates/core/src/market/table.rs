//! Piecewise-Chebyshev tables of Heston vanilla prices in the variance.
//!
//! At fixed maturity and log-moneyness the unit-spot call price is a smooth
//! function of the instantaneous variance (the characteristic function is
//! `exp(A + B·v)`), so a few Chebyshev panels reproduce the Fourier pricer
//! to far below its own quadrature tolerance. Panels are refined until the
//! interpolant matches the pricer at off-node check points.

use super::{HestonPricer, MarketError, MarketResult, OptionKind};

/// Anything that prices options sharing spot, variance and maturity, with
/// strikes `x·e^k`.
pub trait StripPricer: Sync {
    fn price_strip(&self, x: f64, v: f64, tau_steps: usize, options: &[(f64, OptionKind)]) -> MarketResult<Vec<f64>>;
}

impl StripPricer for HestonPricer {
    fn price_strip(&self, x: f64, v: f64, tau_steps: usize, options: &[(f64, OptionKind)]) -> MarketResult<Vec<f64>> {
        HestonPricer::price_strip(self, x, v, tau_steps, options)
    }
}

/// Chebyshev degree per panel.
const DEGREE: usize = 16;
const CHECK_POINTS: usize = 9;
const MAX_DEPTH: usize = 24;
const INITIAL_PANELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
struct Panel {
    lo: f64,
    hi: f64,
    /// Chebyshev coefficients per strike.
    coeffs: Vec<[f64; DEGREE + 1]>,
}

#[derive(Debug, Clone, PartialEq)]
struct StripTable {
    tau_steps: usize,
    ks: Vec<f64>,
    panels: Vec<Panel>,
}

/// Tabulated unit-spot call prices for a fixed set of strips on
/// `v ∈ [0, v_max]`. Requests outside the tables go to the exact pricer.
#[derive(Debug, Clone)]
pub struct TabulatedPricer {
    exact: HestonPricer,
    v_max: f64,
    tolerance: f64,
    tables: Vec<StripTable>,
}

impl TabulatedPricer {
    /// Tables for every `(tau_steps, log-moneyness list)` in `strips`, each
    /// accurate to `tolerance` in unit-spot price at the check points.
    pub fn new(exact: HestonPricer, strips: &[(usize, Vec<f64>)], v_max: f64, tolerance: f64) -> MarketResult<Self> {
        if !(v_max > 0.0) || !(tolerance > 0.0) {
            return Err(MarketError::InvalidPricingInput(format!(
                "table range {v_max}, tolerance {tolerance}"
            )));
        }
        let mut tables = Vec::with_capacity(strips.len());
        for (tau, ks) in strips {
            let calls = |v: f64| -> MarketResult<Vec<f64>> {
                let opts: Vec<(f64, OptionKind)> = ks.iter().map(|&k| (k, OptionKind::Call)).collect();
                exact.price_strip(1.0, v, *tau, &opts)
            };
            let mut panels = Vec::new();
            let width = v_max / INITIAL_PANELS as f64;
            for p in 0..INITIAL_PANELS {
                let hi = if p + 1 == INITIAL_PANELS { v_max } else { (p + 1) as f64 * width };
                refine(&calls, p as f64 * width, hi, tolerance, 0, &mut panels)?;
            }
            tables.push(StripTable {
                tau_steps: *tau,
                ks: ks.clone(),
                panels,
            });
        }
        Ok(Self {
            exact,
            v_max,
            tolerance,
            tables,
        })
    }

    pub fn exact(&self) -> &HestonPricer {
        &self.exact
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn n_panels(&self) -> usize {
        self.tables.iter().map(|t| t.panels.len()).sum()
    }

    fn table(&self, tau_steps: usize, options: &[(f64, OptionKind)]) -> Option<&StripTable> {
        self.tables.iter().find(|t| {
            t.tau_steps == tau_steps
                && t.ks.len() == options.len()
                && t.ks.iter().zip(options).all(|(a, b)| a.to_bits() == b.0.to_bits())
        })
    }
}

impl StripPricer for TabulatedPricer {
    fn price_strip(&self, x: f64, v: f64, tau_steps: usize, options: &[(f64, OptionKind)]) -> MarketResult<Vec<f64>> {
        let table = match self.table(tau_steps, options) {
            Some(t) if (0.0..=self.v_max).contains(&v) && x > 0.0 && x.is_finite() => t,
            _ => return self.exact.price_strip(x, v, tau_steps, options),
        };
        let i = table.panels.partition_point(|p| p.hi < v).min(table.panels.len() - 1);
        let panel = &table.panels[i];
        let s = (2.0 * v - panel.lo - panel.hi) / (panel.hi - panel.lo);
        Ok(options
            .iter()
            .zip(&panel.coeffs)
            .map(|(&(k, kind), c)| {
                let strike = k.exp();
                let unit = clenshaw(c, s).clamp((1.0 - strike).max(0.0), 1.0);
                match kind {
                    OptionKind::Call => x * unit,
                    OptionKind::Put => x * (unit - 1.0 + strike),
                }
            })
            .collect())
    }
}

fn refine(
    f: &impl Fn(f64) -> MarketResult<Vec<f64>>,
    lo: f64,
    hi: f64,
    tol: f64,
    depth: usize,
    out: &mut Vec<Panel>,
) -> MarketResult<()> {
    let panel = fit(f, lo, hi)?;
    let mut worst = 0.0f64;
    for j in 0..CHECK_POINTS {
        // Midpoints between consecutive Chebyshev nodes are where the
        // interpolation error peaks.
        let theta = std::f64::consts::PI * (j as f64 + 0.5) / CHECK_POINTS as f64;
        let s = theta.cos();
        let v = 0.5 * (lo + hi) + 0.5 * (hi - lo) * s;
        let exact = f(v)?;
        for (c, e) in panel.coeffs.iter().zip(exact) {
            worst = worst.max((clenshaw(c, s) - e).abs());
        }
    }
    if worst <= tol {
        out.push(panel);
        Ok(())
    } else if depth >= MAX_DEPTH {
        Err(MarketError::InvalidPricingInput(format!(
            "price table did not reach {tol:e} on [{lo}, {hi}] (error {worst:e})"
        )))
    } else {
        let mid = 0.5 * (lo + hi);
        refine(f, lo, mid, tol, depth + 1, out)?;
        refine(f, mid, hi, tol, depth + 1, out)
    }
}

/// Interpolant through the Chebyshev-Lobatto points of `[lo, hi]`.
fn fit(f: &impl Fn(f64) -> MarketResult<Vec<f64>>, lo: f64, hi: f64) -> MarketResult<Panel> {
    let n = DEGREE;
    let pi = std::f64::consts::PI;
    let values: Vec<Vec<f64>> = (0..=n)
        .map(|j| {
            let s = (pi * j as f64 / n as f64).cos();
            f(0.5 * (lo + hi) + 0.5 * (hi - lo) * s)
        })
        .collect::<MarketResult<_>>()?;
    let n_k = values[0].len();
    let mut coeffs = vec![[0.0; DEGREE + 1]; n_k];
    for (s, c) in coeffs.iter_mut().enumerate() {
        for (m, cm) in c.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, row) in values.iter().enumerate() {
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                acc += w * row[s] * (pi * (m * j) as f64 / n as f64).cos();
            }
            let scale = if m == 0 || m == n { 1.0 } else { 2.0 };
            *cm = scale * acc / n as f64;
        }
    }
    Ok(Panel { lo, hi, coeffs })
}

fn clenshaw(c: &[f64; DEGREE + 1], s: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ck in c[1..].iter().rev() {
        let b = 2.0 * s * b1 - b2 + ck;
        b2 = b1;
        b1 = b;
    }
    s * b1 - b2 + c[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::HestonParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clenshaw_reproduces_polynomials() {
        // T_0 + 2 T_2 + 3 T_5 at s.
        let mut c = [0.0; DEGREE + 1];
        c[0] = 1.0;
        c[2] = 2.0;
        c[5] = 3.0;
        for &s in &[-1.0f64, -0.3, 0.0, 0.7, 1.0] {
            let t2 = 2.0 * s * s - 1.0;
            let t5 = 16.0 * s.powi(5) - 20.0 * s.powi(3) + 5.0 * s;
            assert!((clenshaw(&c, s) - (1.0 + 2.0 * t2 + 3.0 * t5)).abs() < 1e-14);
        }
    }

    #[test]
    fn table_matches_exact_pricer() {
        let exact = HestonPricer::new(HestonParams::default(), 1.0 / 250.0).unwrap();
        let ks10: Vec<f64> = [0.99f64, 1.0, 1.01].iter().map(|r| r.ln()).collect();
        let ks20: Vec<f64> = [0.97f64, 0.99, 1.0, 1.01, 1.03].iter().map(|r| r.ln()).collect();
        let table = TabulatedPricer::new(exact.clone(), &[(10, ks10.clone()), (20, ks20.clone())], 2.0, 1e-10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let v: f64 = rng.random::<f64>().powi(3) * 2.0;
            let x = 0.8 + 0.4 * rng.random::<f64>();
            for (tau, ks) in [(10, &ks10), (20, &ks20)] {
                let opts: Vec<(f64, OptionKind)> = ks
                    .iter()
                    .map(|&k| (k, if k > 0.0 { OptionKind::Call } else { OptionKind::Put }))
                    .collect();
                let a = table.price_strip(x, v, tau, &opts).unwrap();
                let b = exact.price_strip(x, v, tau, &opts).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() < 2e-10, "tau {tau} v {v}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn unknown_strips_and_large_variance_fall_back() {
        let exact = HestonPricer::new(HestonParams::default(), 1.0 / 250.0).unwrap();
        let table = TabulatedPricer::new(exact.clone(), &[(10, vec![0.0])], 0.5, 1e-10).unwrap();
        let opts = [(0.0, OptionKind::Put)];
        for (v, tau) in [(0.9, 10), (0.1, 20)] {
            let a = table.price_strip(1.0, v, tau, &opts).unwrap();
            let b = exact.price_strip(1.0, v, tau, &opts).unwrap();
            assert_eq!(a, b);
        }
    }
}
