//! Training loop for both optimizers.
//!
//! Iteration `i ≥ 1` performs the `i`-th parameter update; its metrics row
//! carries the loss of the batch used for that update and, every
//! `val_every` iterations, the validation loss of the updated parameters.
//! Row 0 holds the validation loss of the initialization.
//!
//! The gradient-variance column is the trace of the sample covariance of
//! single-path gradients `∇[γ·n/(n−1)·(P_j − M)² + C_j]` over a fixed probe
//! set of the first 64 validation paths, with `M` the probe mean PnL held
//! constant. These per-path gradients average to the batch-objective
//! gradient on the probe set.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, OptimizerKind};
use super::data::{Batch, Dataset};
use super::seeds::{derive_seed, stream_rng, Purpose};
use super::{HarnessError, HarnessResult};
use crate::contracts::{batch_objective, gains_and_costs, objective_value, shard_objective, CostSpec, InnerHessian};
use crate::diffcore::Tape;
use crate::matrix::Matrix64;
use crate::optim::{pseudo_backward, ActivationStats, Adam, Kfac};
use crate::policy::{act, init_params, rollout, PolicyParams};

pub const PROBE_PATHS: usize = 64;
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dhck";
/// Paths per chunk when evaluating without a tape.
const EVAL_CHUNK: usize = 1024;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_EVALS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam(Adam),
    Kfac(Kfac),
}

impl OptimizerState {
    pub fn new(cfg: &ExperimentConfig, kind: OptimizerKind, params: &PolicyParams) -> Self {
        match kind {
            OptimizerKind::Adam => {
                let shapes: Vec<_> = params.values.iter().map(Matrix64::shape).collect();
                OptimizerState::Adam(Adam::new(cfg.adam.clone(), &shapes))
            }
            OptimizerKind::Kfac => {
                let layout: Vec<_> = params
                    .kinds
                    .iter()
                    .zip(&params.values)
                    .map(|(&k, v)| (k, v.rows(), v.cols()))
                    .collect();
                OptimizerState::Kfac(Kfac::new(cfg.kfac.clone(), &layout))
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Adam(_) => OptimizerKind::Adam,
            OptimizerState::Kfac(_) => OptimizerKind::Kfac,
        }
    }

    pub fn iteration(&self) -> u64 {
        match self {
            OptimizerState::Adam(a) => a.iteration,
            OptimizerState::Kfac(k) => k.iteration,
        }
    }

    pub fn export(&self) -> Vec<(String, Matrix64)> {
        match self {
            OptimizerState::Adam(a) => a.export_state(),
            OptimizerState::Kfac(k) => k.export_state(),
        }
    }

    pub fn import(&mut self, records: &[(String, Matrix64)]) -> HarnessResult<()> {
        match self {
            OptimizerState::Adam(a) => a.import_state(records)?,
            OptimizerState::Kfac(k) => k.import_state(records)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Step size (KFAC) or learning rate (Adam).
    pub eta: Option<f64>,
    pub rho_tr: Option<f64>,
    pub grad_var: Option<f64>,
    pub d_max: Vec<f64>,
    pub wall_ms: f64,
}

pub fn metrics_header(params: &PolicyParams) -> String {
    let mut cols = vec![
        "iteration".to_string(),
        "train_loss".into(),
        "val_loss".into(),
        "eta".into(),
        "rho_tr".into(),
        "grad_var".into(),
    ];
    cols.extend(params.names.iter().map(|n| format!("d_max.{n}")));
    cols.push("wall_ms".into());
    cols.join(",")
}

impl MetricsRow {
    pub fn to_csv(&self, n_blocks: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut cols = vec![
            self.iteration.to_string(),
            opt(self.train_loss),
            opt(self.val_loss),
            opt(self.eta),
            opt(self.rho_tr),
            opt(self.grad_var),
        ];
        for b in 0..n_blocks {
            cols.push(opt(self.d_max.get(b).copied()));
        }
        cols.push(format!("{:.3}", self.wall_ms));
        cols.join(",")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub rows: Vec<MetricsRow>,
    pub initial_val_loss: f64,
    /// First iteration whose validation loss met the target.
    pub reached_target: Option<u64>,
    pub iterations: u64,
}

/// Loss of `params` on all paths of `ds`, with the training estimator.
pub fn dataset_loss(params: &PolicyParams, ds: &Dataset, gamma: f64, costs: &CostSpec) -> HarnessResult<f64> {
    let (gains, costs_v) = gains_and_costs_all(params, ds, costs)?;
    Ok(objective_value(&gains, &ds.payoff, &costs_v, gamma)?)
}

/// Actions of every path, chunk by chunk: `(path, step)`-major `T x d` rows.
pub fn dataset_actions(params: &PolicyParams, ds: &Dataset) -> HarnessResult<Vec<f64>> {
    let (t_n, d) = (ds.horizon, ds.d);
    let chunks: Vec<Vec<usize>> = ds.all().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let parts: Vec<HarnessResult<Vec<f64>>> = chunks
        .par_iter()
        .map(|idx| {
            let b = ds.batch(idx);
            let us = act(params, &b.features, &b.masks)?;
            let mut out = vec![0.0; idx.len() * t_n * d];
            for (t, u) in us.iter().enumerate() {
                for r in 0..idx.len() {
                    out[(r * t_n + t) * d..(r * t_n + t + 1) * d].copy_from_slice(u.row(r));
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(ds.n_paths * t_n * d);
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

fn gains_and_costs_all(params: &PolicyParams, ds: &Dataset, costs: &CostSpec) -> HarnessResult<(Vec<f64>, Vec<f64>)> {
    let actions = dataset_actions(params, ds)?;
    let w = ds.horizon * ds.d;
    Ok((0..ds.n_paths)
        .map(|p| gains_and_costs(&actions[p * w..(p + 1) * w], ds.path_returns(p), costs))
        .unzip())
}

/// Batch loss and gradient. When `stats` is given the forward pass records
/// activation statistics for the Kronecker factors.
pub fn batch_gradient(
    params: &PolicyParams,
    batch: &Batch,
    gamma: f64,
    costs: &CostSpec,
    shard_size: usize,
    stats: Option<&mut ActivationStats>,
) -> HarnessResult<(f64, Vec<Matrix64>)> {
    let n = batch.len();
    let capture = stats.is_some();
    let n_params = params.values.len();
    if shard_size >= n {
        let mut tape = Tape::new(capture);
        let us = rollout(&mut tape, params, &batch.features, &batch.masks)?;
        let loss = batch_objective(&mut tape, &us, &batch.returns, &batch.payoff, gamma, costs)?;
        let value = tape.value(loss).item();
        if let Some(s) = stats {
            s.add_tape(&tape, n);
        }
        let grads = collect_grads(tape.backward(loss)?.take_params(), params);
        return Ok((value, grads));
    }

    // Mean PnL of the whole batch, held fixed inside every shard.
    let us = act(params, &batch.features, &batch.masks)?;
    let mean_pnl = (0..n)
        .map(|r| {
            let mut g = 0.0;
            for (u, ret) in us.iter().zip(&batch.returns) {
                g += u.row(r).iter().zip(ret.row(r)).map(|(a, b)| a * b).sum::<f64>();
            }
            g - batch.payoff.get(r, 0)
        })
        .sum::<f64>()
        / n as f64;
    let bounds: Vec<(usize, usize)> = (0..n).step_by(shard_size).map(|lo| (lo, (lo + shard_size).min(n))).collect();
    let parts: Vec<HarnessResult<(f64, Vec<Matrix64>, Option<ActivationStats>)>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let rows = |m: &Matrix64| Matrix64::from_fn(hi - lo, m.cols(), |r, c| m.get(lo + r, c));
            let f: Vec<Matrix64> = batch.features.iter().map(rows).collect();
            let m: Vec<Matrix64> = batch.masks.iter().map(rows).collect();
            let r: Vec<Matrix64> = batch.returns.iter().map(rows).collect();
            let mut tape = Tape::new(capture);
            let us = rollout(&mut tape, params, &f, &m)?;
            let loss = shard_objective(&mut tape, &us, &r, &rows(&batch.payoff), gamma, costs, n, mean_pnl)?;
            let st = capture.then(|| {
                let mut s = ActivationStats::new(n_params);
                s.add_tape(&tape, hi - lo);
                s
            });
            let value = tape.value(loss).item();
            let grads = collect_grads(tape.backward(loss)?.take_params(), params);
            Ok((value, grads, st))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Vec<Matrix64> = params.values.iter().map(|v| Matrix64::zeros(v.rows(), v.cols())).collect();
    let mut merged = stats;
    for part in parts {
        let (v, g, st) = part?;
        total += v;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.axpy(1.0, gi).expect("gradient shape");
        }
        if let (Some(m), Some(st)) = (merged.as_deref_mut(), st) {
            m.merge(&st);
        }
    }
    Ok((total, grads))
}

fn collect_grads(grads: Vec<Option<Matrix64>>, params: &PolicyParams) -> Vec<Matrix64> {
    params
        .values
        .iter()
        .enumerate()
        .map(|(id, v)| {
            grads
                .get(id)
                .cloned()
                .flatten()
                .unwrap_or_else(|| Matrix64::zeros(v.rows(), v.cols()))
        })
        .collect()
}

/// Pseudo-gradients of one path for the curvature estimate.
pub fn pseudo_gradients(
    params: &PolicyParams,
    train: &Dataset,
    path: usize,
    gamma: f64,
    costs: &CostSpec,
    noise: &mut impl Rng,
) -> HarnessResult<crate::diffcore::Gradients> {
    let single = train.batch(&[path]);
    let mut tape = Tape::new(true);
    let us = rollout(&mut tape, params, &single.features, &single.masks)?;
    let h = InnerHessian::new(train.path_returns(path), gamma, costs);
    let s = h.sample_pseudo_target(noise);
    Ok(pseudo_backward(&mut tape, &us, &s)?)
}

/// Curvature from `warm_start_paths` random training paths before the first
/// step.
pub fn warm_start(kfac: &mut Kfac, params: &PolicyParams, train: &Dataset, cfg: &ExperimentConfig, costs: &CostSpec) -> HarnessResult<()> {
    let n = kfac.config.warm_start_paths.min(train.n_paths);
    let mut rng = stream_rng(cfg.seed, Purpose::CurvatureInit, 0);
    let idx: Vec<usize> = rand::seq::index::sample(&mut rng, train.n_paths, n).into_vec();
    let batch = train.batch(&idx);
    let mut tape = Tape::new(true);
    rollout(&mut tape, params, &batch.features, &batch.masks)?;
    let mut stats = ActivationStats::new(params.values.len());
    stats.add_tape(&tape, n);
    drop(tape);
    let pseudo = idx
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let mut noise = stream_rng(cfg.seed, Purpose::CurvatureInit, 1 + k as u64);
            pseudo_gradients(params, train, p, cfg.gamma, costs, &mut noise)
        })
        .collect::<HarnessResult<Vec<_>>>()?;
    kfac.warm_start(&stats, &pseudo)?;
    Ok(())
}

/// Trace of the covariance of single-path gradients on `probe`.
pub fn gradient_variance(params: &PolicyParams, probe: &Batch, gamma: f64, costs: &CostSpec) -> HarnessResult<f64> {
    let n = probe.len();
    let us = act(params, &probe.features, &probe.masks)?;
    let pnl: Vec<f64> = (0..n)
        .map(|r| {
            let g: f64 = us
                .iter()
                .zip(&probe.returns)
                .map(|(u, ret)| u.row(r).iter().zip(ret.row(r)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            g - probe.payoff.get(r, 0)
        })
        .collect();
    let mean_pnl = pnl.iter().sum::<f64>() / n as f64;
    let grads: Vec<HarnessResult<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let row = |m: &Matrix64| Matrix64::from_fn(1, m.cols(), |_, c| m.get(r, c));
            let f: Vec<Matrix64> = probe.features.iter().map(row).collect();
            let m: Vec<Matrix64> = probe.masks.iter().map(row).collect();
            let ret: Vec<Matrix64> = probe.returns.iter().map(row).collect();
            let mut tape = Tape::new(false);
            let us = rollout(&mut tape, params, &f, &m)?;
            let loss = shard_objective(&mut tape, &us, &ret, &row(&probe.payoff), gamma, costs, n, mean_pnl)?;
            let g = collect_grads(tape.backward(loss)?.take_params(), params);
            Ok(g.iter().flat_map(|m| m.as_slice().iter().map(|x| x * n as f64)).collect())
        })
        .collect();
    let grads: Vec<Vec<f64>> = grads.into_iter().collect::<HarnessResult<_>>()?;
    let dim = grads[0].len();
    let mut mean = vec![0.0; dim];
    for g in &grads {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x / n as f64;
        }
    }
    let ss: f64 = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    Ok(ss / (n - 1) as f64)
}

/// Everything a run needs besides the config.
pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    /// Parameters and optimizer state to continue from, typically restored
    /// from a checkpoint. Continuing reproduces the uninterrupted run.
    pub resume: Option<(PolicyParams, OptimizerState)>,
}

/// Runs one training job. `on_row` sees every metrics row as it is produced.
pub fn train(
    cfg: &ExperimentConfig,
    optimizer: OptimizerKind,
    inputs: TrainInputs<'_>,
    mut on_row: impl FnMut(&MetricsRow) -> HarnessResult<()>,
) -> HarnessResult<TrainOutcome> {
    cfg.validate()?;
    let (train, val) = (inputs.train, inputs.val);
    let costs = cfg.cost_spec()?;
    let gamma = cfg.gamma;
    let t_cfg = &cfg.training;
    let start = Instant::now();
    let init = init_params(&cfg.policy_config(), derive_seed(cfg.seed, Purpose::Init));
    let (mut params, mut opt) = match inputs.resume {
        Some((p, o)) => {
            if o.kind() != optimizer {
                return Err(HarnessError::Config(format!(
                    "cannot resume a {} run with {optimizer}",
                    o.kind()
                )));
            }
            (p, o)
        }
        None => {
            let o = OptimizerState::new(cfg, optimizer, &init);
            (init.clone(), o)
        }
    };
    let resumed = opt.iteration() > 0;
    let probe = (t_cfg.probe_every > 0).then(|| {
        let idx: Vec<usize> = (0..PROBE_PATHS.min(val.n_paths)).collect();
        val.batch(&idx)
    });

    let initial_val_loss = dataset_loss(&init, val, gamma, &costs)?;
    let mut rows = Vec::new();
    let target_met = |loss: f64| t_cfg.val_target.is_some_and(|t| loss <= t);
    let mut reached_target = None;
    if !resumed {
        let row0 = MetricsRow {
            iteration: 0,
            train_loss: None,
            val_loss: Some(initial_val_loss),
            eta: None,
            rho_tr: None,
            grad_var: match &probe {
                Some(p) => Some(gradient_variance(&params, p, gamma, &costs)?),
                None => None,
            },
            d_max: Vec::new(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_row(&row0)?;
        rows.push(row0);
        reached_target = target_met(initial_val_loss).then_some(0);
    }

    let n_batches = train.n_paths / t_cfg.batch_size;
    if let OptimizerState::Kfac(kfac) = &mut opt {
        if kfac.iteration == 0 && kfac.config.warm_start_paths > 0 {
            warm_start(kfac, &params, train, cfg, &costs)?;
        }
    }
    if n_batches == 0 {
        return Err(HarnessError::Config(format!(
            "{} training paths cannot fill a batch of {}",
            train.n_paths, t_cfg.batch_size
        )));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut high_streak = 0usize;
    let mut iteration = opt.iteration();
    while reached_target.is_none() && iteration < t_cfg.max_iterations {
        let slot = (iteration as usize) % n_batches;
        if slot == 0 || order.is_empty() {
            let epoch = iteration / n_batches as u64;
            order = train.all();
            order.shuffle(&mut stream_rng(cfg.seed, Purpose::Shuffle, epoch));
        }
        let idx = &order[slot * t_cfg.batch_size..(slot + 1) * t_cfg.batch_size];
        let batch = train.batch(idx);
        iteration += 1;

        let (train_loss, eta, rho_tr, d_max) = match &mut opt {
            OptimizerState::Adam(adam) => {
                let (loss, grads) = batch_gradient(&params, &batch, gamma, &costs, t_cfg.shard_size, None)?;
                check_finite(loss, iteration)?;
                let info = adam.step(&mut params.values, &grads)?;
                (loss, info.lr, None, Vec::new())
            }
            OptimizerState::Kfac(kfac) => {
                let mut stats = ActivationStats::new(params.values.len());
                let want_stats = kfac.factor_iteration();
                let (loss, grads) = batch_gradient(
                    &params,
                    &batch,
                    gamma,
                    &costs,
                    t_cfg.shard_size,
                    want_stats.then_some(&mut stats),
                )?;
                check_finite(loss, iteration)?;
                let k = kfac.iteration;
                let pick = stream_rng(cfg.seed, Purpose::PseudoPath, k).random_range(0..idx.len());
                let mut noise = stream_rng(cfg.seed, Purpose::PseudoNoise, k);
                let pseudo = pseudo_gradients(&params, train, idx[pick], gamma, &costs, &mut noise)?;
                let info = kfac.step(&mut params.values, &grads, want_stats.then_some(&stats), &pseudo)?;
                (loss, info.eta, Some(info.rho_tr), kfac.max_scales())
            }
        };

        let evaluate = iteration % t_cfg.val_every == 0 || iteration == t_cfg.max_iterations;
        let val_loss = if evaluate {
            let v = dataset_loss(&params, val, gamma, &costs)?;
            check_finite(v, iteration)?;
            Some(v)
        } else {
            None
        };
        let grad_var = match &probe {
            Some(p) if iteration % t_cfg.probe_every == 0 => Some(gradient_variance(&params, p, gamma, &costs)?),
            _ => None,
        };
        let row = MetricsRow {
            iteration,
            train_loss: Some(train_loss),
            val_loss,
            eta: Some(eta),
            rho_tr,
            grad_var,
            d_max,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_row(&row)?;
        rows.push(row);

        if let Some(v) = val_loss {
            log::info!("{optimizer} iteration {iteration}: validation loss {v:.6e}");
            if target_met(v) {
                reached_target = Some(iteration);
            }
            if v > DIVERGENCE_FACTOR * initial_val_loss {
                high_streak += 1;
                if high_streak >= DIVERGENCE_EVALS {
                    return Err(HarnessError::Diverged {
                        iteration,
                        loss: v,
                        initial: initial_val_loss,
                    });
                }
            } else {
                high_streak = 0;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        rows,
        initial_val_loss,
        reached_target,
        iterations: iteration,
    })
}

/// Runs [`train`] writing `metrics.csv` row by row and `checkpoint.dhck`
/// at the end into `dir`. When resuming, rows are appended to the existing
/// metrics file.
pub fn train_to_dir(
    cfg: &ExperimentConfig,
    optimizer: OptimizerKind,
    inputs: TrainInputs<'_>,
    dir: &Path,
) -> HarnessResult<TrainOutcome> {
    std::fs::create_dir_all(dir)?;
    let metrics_path = dir.join(METRICS_FILE);
    let resuming = inputs.resume.is_some();
    let layout = init_params(&cfg.policy_config(), 0);
    let n_blocks = layout.values.len();
    let file = if resuming {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{}", metrics_header(&layout))?;
        f
    };
    let mut w = BufWriter::new(file);
    let outcome = train(cfg, optimizer, inputs, |row| {
        writeln!(w, "{}", row.to_csv(n_blocks))?;
        w.flush()?;
        Ok(())
    })?;
    Checkpoint::capture(cfg, &outcome.params, &outcome.optimizer).write(dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

fn check_finite(loss: f64, iteration: u64) -> HarnessResult<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Numerical(format!("non-finite loss at iteration {iteration}")))
    }
}
