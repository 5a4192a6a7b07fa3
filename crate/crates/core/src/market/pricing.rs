//! Semi-analytic Heston vanilla prices at zero rates.
//!
//! The call is obtained from the single Fourier integral
//!
//! `C(1, e^k) = ½(1 − e^k) + (1/π) ∫₀^∞ Re[e^{−iuk} (φ(u − i) − e^k φ(u)) / (iu)] du`
//!
//! with `φ` the characteristic function of `ln(x_τ/x_0)` in the
//! Albrecher et al. ("little Heston trap") form. The integral is evaluated
//! with composite 15-point Gauss-Kronrod panels whose width follows the
//! oscillation and decay scales of the integrand; the embedded 7-point Gauss
//! rule supplies the error estimate. Prices for other spots follow from
//! homogeneity, `C(x, K) = x·C(1, K/x)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{HestonParams, MarketError, MarketResult};

/// Quadrature tolerance, in units of spot.
pub const PRICE_TOLERANCE: f64 = 1e-8;

/// Integrand magnitude (times the remaining decay length) below which the
/// panel march stops.
const TAIL_CUTOFF: f64 = 1e-13;
const MAX_PANELS: usize = 8_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone)]
pub struct HestonPricer {
    params: HestonParams,
    dt: f64,
}

impl HestonPricer {
    pub fn new(params: HestonParams, dt: f64) -> MarketResult<Self> {
        params.validate()?;
        if !(dt > 0.0) {
            return Err(MarketError::InvalidPricingInput(format!("dt={dt}")));
        }
        Ok(Self { params, dt })
    }

    pub fn params(&self) -> &HestonParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn call_price(&self, x: f64, v: f64, tau_steps: usize, strike: f64) -> MarketResult<f64> {
        self.check(x, v, tau_steps)?;
        if !(strike > 0.0) {
            return Err(MarketError::InvalidPricingInput(format!("strike={strike}")));
        }
        let k = (strike / x).ln();
        let c = self.unit_calls(v, tau_steps, &[k])?[0];
        Ok(x * c)
    }

    /// Put via parity at zero rates, `P = C − x + K`.
    pub fn put_price(&self, x: f64, v: f64, tau_steps: usize, strike: f64) -> MarketResult<f64> {
        let c = self.call_price(x, v, tau_steps, strike)?;
        Ok(c - x + strike)
    }

    /// Prices several options sharing spot, variance and maturity, with
    /// strikes `x·e^{k}`. Characteristic-function evaluations are shared.
    pub fn price_strip(
        &self,
        x: f64,
        v: f64,
        tau_steps: usize,
        options: &[(f64, OptionKind)],
    ) -> MarketResult<Vec<f64>> {
        self.check(x, v, tau_steps)?;
        let ks: Vec<f64> = options.iter().map(|o| o.0).collect();
        let calls = self.unit_calls(v, tau_steps, &ks)?;
        Ok(options
            .iter()
            .zip(calls)
            .map(|(&(k, kind), c)| match kind {
                OptionKind::Call => x * c,
                OptionKind::Put => x * (c - 1.0 + k.exp()),
            })
            .collect())
    }

    fn check(&self, x: f64, v: f64, tau_steps: usize) -> MarketResult<()> {
        if !(x > 0.0) || !(v >= 0.0) || !v.is_finite() || !x.is_finite() || tau_steps == 0 {
            return Err(MarketError::InvalidPricingInput(format!(
                "x={x}, v={v}, tau_steps={tau_steps}"
            )));
        }
        Ok(())
    }

    /// Calls on unit spot with strikes `e^k`, clamped to the no-arbitrage band.
    fn unit_calls(&self, v: f64, tau_steps: usize, ks: &[f64]) -> MarketResult<Vec<f64>> {
        let p = &self.params;
        let tau = tau_steps as f64 * self.dt;
        let ekt = (-p.kappa * tau).exp();
        let integrated_var = v * (1.0 - ekt) / p.kappa + p.theta * (tau - (1.0 - ekt) / p.kappa);
        let sigma = integrated_var.sqrt();
        let level = v + p.kappa * p.theta * tau;
        let k_max = ks.iter().fold(0.0f64, |m, k| m.max(k.abs()));
        let k_eff = k_max + p.rho.abs() * level / p.xi + 0.5 * integrated_var;
        let h = (PI / k_eff).min(1.5 / sigma);
        let decay = (1.0 - p.rho * p.rho).max(0.0).sqrt() * level / p.xi;
        let tail_len = if decay > 0.0 { (1.0 / decay).max(h) } else { h };

        let strikes: Vec<(f64, Complex64)> = ks.iter().map(|&k| (k.exp(), Complex64::new(0.0, -k))).collect();
        let mut kronrod = vec![0.0; ks.len()];
        let mut err = vec![0.0; ks.len()];
        let mut f = vec![[0.0f64; 15]; ks.len()];
        let mut quiet_panels = 0;
        let mut a = 0.0;
        for _ in 0..MAX_PANELS {
            let half = 0.5 * h;
            let center = a + half;
            let mut panel_max = 0.0f64;
            for j in 0..15 {
                let xn = if j < 7 { -XGK[j] } else { XGK[14 - j] };
                let u = center + half * xn;
                let phi_shift = self.char_fn(Complex64::new(u, -1.0), v, tau);
                let phi = self.char_fn(Complex64::new(u, 0.0), v, tau);
                let denom = Complex64::new(0.0, u);
                for (s, &(strike, ik)) in strikes.iter().enumerate() {
                    let val = ((ik * u).exp() * (phi_shift - strike * phi) / denom).re;
                    f[s][j] = val;
                    panel_max = panel_max.max(val.abs());
                }
            }
            for s in 0..ks.len() {
                let fs = &f[s];
                let mut rk = WGK[7] * fs[7];
                let mut rg = WG[3] * fs[7];
                for j in 0..7 {
                    let pair = fs[j] + fs[14 - j];
                    rk += WGK[j] * pair;
                    if j % 2 == 1 {
                        rg += WG[j / 2] * pair;
                    }
                }
                kronrod[s] += half * rk;
                err[s] += (half * (rk - rg)).abs();
            }
            a += h;
            if panel_max * tail_len < TAIL_CUTOFF {
                quiet_panels += 1;
                if quiet_panels >= 2 {
                    let mut out = Vec::with_capacity(ks.len());
                    for (s, &(strike, _)) in strikes.iter().enumerate() {
                        let estimate = err[s] / PI;
                        if estimate > PRICE_TOLERANCE {
                            return Err(MarketError::Quadrature {
                                tau_steps,
                                variance: v,
                                estimate,
                                tolerance: PRICE_TOLERANCE,
                            });
                        }
                        let c = 0.5 * (1.0 - strike) + kronrod[s] / PI;
                        out.push(c.clamp((1.0 - strike).max(0.0), 1.0));
                    }
                    return Ok(out);
                }
            } else {
                quiet_panels = 0;
            }
        }
        Err(MarketError::Quadrature {
            tau_steps,
            variance: v,
            estimate: f64::INFINITY,
            tolerance: PRICE_TOLERANCE,
        })
    }

    /// `E[exp(iu ln(x_τ/x_0))]` given `v_0 = v`.
    fn char_fn(&self, u: Complex64, v: f64, tau: f64) -> Complex64 {
        let p = &self.params;
        let iu = Complex64::i() * u;
        let xi2 = p.xi * p.xi;
        let b = p.kappa - p.rho * p.xi * iu;
        let d = (b * b + xi2 * (iu + u * u)).sqrt();
        let bmd = b - d;
        let g = bmd / (b + d);
        let e = (-d * tau).exp();
        let one_minus_ge = 1.0 - g * e;
        let dd = bmd / xi2 * (1.0 - e) / one_minus_ge;
        let cc = p.kappa * p.theta / xi2 * (bmd * tau - 2.0 * (one_minus_ge / (1.0 - g)).ln());
        (cc + dd * v).exp()
    }
}
