//! Recurrent hedging policy.
//!
//! `u_t = mask_t ∘ symexp(W_head · x⁽ᴸ⁾)` where `x⁽⁰⁾ = W_emb·[I_t, u_{t−1}, 1]`
//! and every block computes `x⁽ˡ⁾ = x⁽ˡ⁻¹⁾ + LSTM_l(RMSNorm_l(x⁽ˡ⁻¹⁾))`.
//! Each LSTM stacks its four gates (input, forget, cell, output) in one
//! `4h x (2h + 1)` matrix acting on `[x, h_{t−1}, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{running_cliquet_value, CliquetSpec};
use crate::diffcore::{sigmoid, symexp, DiffError, Tape, Var, RMS_EPS};
use crate::matrix::Matrix64;

pub const N_FEATURES: usize = 6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite activation in {stage} at step {step}")]
    NonFinite { stage: String, step: usize },
    #[error("input shape: {0}")]
    Input(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type PolicyResult<T> = Result<T, PolicyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    /// Number of instruments, spot included.
    pub d: usize,
    pub head_scale: f64,
}

impl PolicyConfig {
    pub fn new(d: usize) -> Self {
        Self {
            n_blocks: 4,
            hidden: 32,
            d,
            head_scale: 1e-3,
        }
    }
}

/// How the optimizer treats a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Weight matrix `n_out x (n_in + 1)` of a hooked affine layer.
    Kronecker,
    /// Gain row of an RMS normalizer.
    Diagonal,
}

/// Parameter blocks; the block index doubles as tape parameter id and hook
/// layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub values: Vec<Matrix64>,
}

impl PolicyParams {
    pub const EMBED: usize = 0;

    pub fn gain_id(&self, block: usize) -> usize {
        1 + 2 * block
    }

    pub fn lstm_id(&self, block: usize) -> usize {
        2 + 2 * block
    }

    pub fn head_id(&self) -> usize {
        1 + 2 * self.config.n_blocks
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Matrix64::len).sum()
    }

    /// All-zero parameters of the same layout (gains included).
    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for v in &mut p.values {
            *v = Matrix64::zeros(v.rows(), v.cols());
        }
        p
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Matrix64) {
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
    }
}

/// He-initialized weights with zero biases, unit gains, and the head scaled
/// by `head_scale`.
pub fn init_params(config: &PolicyConfig, seed: u64) -> PolicyParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mut he = |rows: usize, fan_in: usize, scale: f64| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Matrix64::from_fn(rows, fan_in + 1, |_, c| {
            if c == fan_in {
                0.0
            } else {
                scale * normal.sample(&mut rng)
            }
        })
    };
    let mut p = PolicyParams {
        config: config.clone(),
        names: Vec::new(),
        kinds: Vec::new(),
        values: Vec::new(),
    };
    p.push("embed".into(), ParamKind::Kronecker, he(h, N_FEATURES + config.d, 1.0));
    for l in 0..config.n_blocks {
        p.push(format!("block{l}.gain"), ParamKind::Diagonal, Matrix64::filled(1, h, 1.0));
        p.push(format!("block{l}.lstm"), ParamKind::Kronecker, he(4 * h, 2 * h, 1.0));
    }
    p.push("head".into(), ParamKind::Kronecker, he(config.d, h, config.head_scale));
    p
}

/// `[t/T, phase, x_t, x_{last reset}, v_t, running cliquet value]`.
pub fn features(spot: &[f64], variance: &[f64], cliquet: &CliquetSpec, t: usize) -> [f64; N_FEATURES] {
    let horizon = cliquet.horizon();
    [
        t as f64 / horizon as f64,
        cliquet.phase(t),
        spot[t],
        spot[cliquet.last_reset(t)],
        variance[t],
        running_cliquet_value(spot, cliquet, t),
    ]
}

/// Tape handles of the parameters for one rollout.
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &PolicyParams) -> PolicyResult<Self> {
        let vars = params
            .values
            .iter()
            .enumerate()
            .map(|(id, v)| tape.param(id, v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self(vars))
    }
}

/// Recurrent state on the tape.
pub struct TapeState {
    h: Vec<Var>,
    c: Vec<Var>,
    u_prev: Var,
}

impl TapeState {
    pub fn zeros(tape: &mut Tape, config: &PolicyConfig, batch: usize) -> PolicyResult<Self> {
        let zh = tape.constant(Matrix64::zeros(batch, config.hidden))?;
        let zu = tape.constant(Matrix64::zeros(batch, config.d))?;
        Ok(Self {
            h: vec![zh; config.n_blocks],
            c: vec![zh; config.n_blocks],
            u_prev: zu,
        })
    }
}

fn tag(step: usize, stage: impl Fn() -> String) -> impl FnOnce(DiffError) -> PolicyError {
    move |e| match e {
        DiffError::NonFinite { .. } => PolicyError::NonFinite { stage: stage(), step },
        other => PolicyError::Diff(other),
    }
}

/// One policy step on the tape. `features` is `B x 6`, `mask` is `B x d`.
pub fn forward_step(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    state: &mut TapeState,
    features: &Matrix64,
    mask: &Matrix64,
    step: usize,
) -> PolicyResult<Var> {
    let cfg = &params.config;
    let h = cfg.hidden;
    let emb = (|| -> Result<Var, DiffError> {
        let f = tape.constant(features.clone())?;
        let input = tape.concat(&[f, state.u_prev])?;
        tape.linear(PolicyParams::EMBED, input, vars.0[PolicyParams::EMBED])
    })()
    .map_err(tag(step, || "embedding".into()))?;
    let mut x = emb;
    for l in 0..cfg.n_blocks {
        let (gain, w) = (vars.0[params.gain_id(l)], vars.0[params.lstm_id(l)]);
        let (hp, cp) = (state.h[l], state.c[l]);
        let (hn, cn, xn) = (|| -> Result<(Var, Var, Var), DiffError> {
            let n = tape.rms_normalize(x, gain)?;
            let inp = tape.concat(&[n, hp])?;
            let z = tape.linear(params.lstm_id(l), inp, w)?;
            let zi = tape.slice(z, 0, h)?;
            let zf = tape.slice(z, h, 2 * h)?;
            let zg = tape.slice(z, 2 * h, 3 * h)?;
            let zo = tape.slice(z, 3 * h, 4 * h)?;
            let i = tape.sigmoid(zi)?;
            let f = tape.sigmoid(zf)?;
            let g = tape.tanh(zg)?;
            let o = tape.sigmoid(zo)?;
            let fc = tape.mul(f, cp)?;
            let ig = tape.mul(i, g)?;
            let c = tape.add(fc, ig)?;
            let tc = tape.tanh(c)?;
            let hn = tape.mul(o, tc)?;
            let xn = tape.add(x, hn)?;
            Ok((hn, c, xn))
        })()
        .map_err(tag(step, || format!("block {l}")))?;
        state.h[l] = hn;
        state.c[l] = cn;
        x = xn;
    }
    let u = (|| -> Result<Var, DiffError> {
        let y = tape.linear(params.head_id(), x, vars.0[params.head_id()])?;
        let s = tape.symexp(y)?;
        let m = tape.constant(mask.clone())?;
        tape.mul(s, m)
    })()
    .map_err(tag(step, || "head".into()))?;
    state.u_prev = u;
    Ok(u)
}

/// Unrolls the policy over all steps on `tape`; returns the `B x d` action
/// node of every step.
pub fn rollout(
    tape: &mut Tape,
    params: &PolicyParams,
    features: &[Matrix64],
    masks: &[Matrix64],
) -> PolicyResult<Vec<Var>> {
    check_inputs(&params.config, features, masks)?;
    let batch = features.first().map_or(0, Matrix64::rows);
    let vars = ParamVars::register(tape, params)?;
    let mut state = TapeState::zeros(tape, &params.config, batch)?;
    features
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(t, (f, m))| forward_step(tape, params, &vars, &mut state, f, m, t))
        .collect()
}

fn check_inputs(cfg: &PolicyConfig, features: &[Matrix64], masks: &[Matrix64]) -> PolicyResult<()> {
    if features.len() != masks.len() {
        return Err(PolicyError::Input(format!(
            "{} feature steps vs {} mask steps",
            features.len(),
            masks.len()
        )));
    }
    let batch = features.first().map_or(0, Matrix64::rows);
    for (f, m) in features.iter().zip(masks) {
        if f.shape() != (batch, N_FEATURES) || m.shape() != (batch, cfg.d) {
            return Err(PolicyError::Input(format!(
                "features {:?} / mask {:?}, expected {batch} rows of {N_FEATURES} / {}",
                f.shape(),
                m.shape(),
                cfg.d
            )));
        }
    }
    Ok(())
}

fn affine(input: &[&Matrix64], w: &Matrix64) -> Matrix64 {
    let rows = input[0].rows();
    let cols: usize = input.iter().map(|m| m.cols()).sum::<usize>() + 1;
    let mut aug = Matrix64::zeros(rows, cols);
    for r in 0..rows {
        let dst = aug.row_mut(r);
        let mut off = 0;
        for m in input {
            dst[off..off + m.cols()].copy_from_slice(m.row(r));
            off += m.cols();
        }
        dst[off] = 1.0;
    }
    aug.matmul_t(w).expect("layer shapes are consistent")
}

/// Tape-free forward pass with the same arithmetic as [`rollout`]; used for
/// validation and evaluation where no gradient is needed.
pub fn act(params: &PolicyParams, features: &[Matrix64], masks: &[Matrix64]) -> PolicyResult<Vec<Matrix64>> {
    check_inputs(&params.config, features, masks)?;
    let cfg = &params.config;
    let h = cfg.hidden;
    let batch = features.first().map_or(0, Matrix64::rows);
    let mut hs = vec![Matrix64::zeros(batch, h); cfg.n_blocks];
    let mut cs = vec![Matrix64::zeros(batch, h); cfg.n_blocks];
    let mut u_prev = Matrix64::zeros(batch, cfg.d);
    let mut out = Vec::with_capacity(features.len());
    for (t, (f, m)) in features.iter().zip(masks).enumerate() {
        let mut x = affine(&[f, &u_prev], &params.values[PolicyParams::EMBED]);
        for l in 0..cfg.n_blocks {
            let gain = params.values[params.gain_id(l)].as_slice();
            let mut n = Matrix64::zeros(batch, h);
            for r in 0..batch {
                let row = x.row(r);
                let ms = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
                let inv = 1.0 / (ms + RMS_EPS).sqrt();
                for ((o, &v), &g) in n.row_mut(r).iter_mut().zip(row).zip(gain) {
                    *o = v * inv * g;
                }
            }
            let z = affine(&[&n, &hs[l]], &params.values[params.lstm_id(l)]);
            let (hl, cl) = (&mut hs[l], &mut cs[l]);
            for r in 0..batch {
                let zr = z.row(r);
                let (hr, cr, xr) = (hl.row_mut(r), cl.row_mut(r), x.row_mut(r));
                for j in 0..h {
                    let i = sigmoid(zr[j]);
                    let fg = sigmoid(zr[h + j]);
                    let g = zr[2 * h + j].tanh();
                    let o = sigmoid(zr[3 * h + j]);
                    let c = fg * cr[j] + i * g;
                    cr[j] = c;
                    hr[j] = o * c.tanh();
                    xr[j] += hr[j];
                }
            }
            if !x.is_finite() {
                return Err(PolicyError::NonFinite {
                    stage: format!("block {l}"),
                    step: t,
                });
            }
        }
        let y = affine(&[&x], &params.values[params.head_id()]);
        let u = y
            .zip_map(m, |a, b| symexp(a) * b)
            .expect("mask shape checked");
        if !u.is_finite() {
            return Err(PolicyError::NonFinite {
                stage: "head".into(),
                step: t,
            });
        }
        u_prev = u.clone();
        out.push(u);
    }
    Ok(out)
}
