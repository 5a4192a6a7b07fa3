//! DH-KFAC and Adam.
//!
//! Every Kronecker block `W` (`n_out x (n_in + 1)`) keeps an input factor
//! `A`, a pseudo-gradient factor `G`, their eigenbases and a dense matrix `D`
//! of second moments of rotated pseudo-gradients, laid out like `W`:
//! `D[i, j]` belongs to the eigenvector pair `(q_G,i, q_A,j)`. Gains of the
//! RMS normalizers use the same scheme with an identity basis.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Gradients, Tape, Var};
use crate::matrix::{gemm, Matrix64};
use crate::policy::ParamKind;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("block {block} has no curvature signal (mean of D is {mean})")]
    DeadBlock { block: usize, mean: f64 },
    #[error("preconditioned inner product {0:e} is not positive")]
    NonPositiveInner(f64),
    #[error("eigendecomposition of block {block} produced non-finite values")]
    Eigen { block: usize },
    #[error("activation statistics required on factor-update iterations")]
    MissingStats,
    #[error("parameter/gradient layout mismatch: {0}")]
    Layout(String),
    #[error("optimizer state: {0}")]
    State(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type OptimResult<T> = Result<T, OptimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfacConfig {
    pub n_cov: u64,
    pub n_evd: u64,
    pub beta_f: f64,
    pub beta_d: f64,
    pub beta_mom: f64,
    pub shrinkage: f64,
    pub rho_tr0: f64,
    pub beta_tr: f64,
    pub eta_max: f64,
    /// Paths used to initialize `A`, `G` and `D` before the first step;
    /// 0 starts from zero factors.
    #[serde(default = "default_warm_start_paths")]
    pub warm_start_paths: usize,
    /// Upper bound on the root-mean-square entry of each block's parameter
    /// step; larger steps are scaled down. `None` leaves steps unbounded.
    #[serde(default)]
    pub max_step_rms: Option<f64>,
}

fn default_warm_start_paths() -> usize {
    64
}

impl Default for KfacConfig {
    fn default() -> Self {
        Self {
            n_cov: 5,
            n_evd: 25,
            beta_f: 0.95,
            beta_d: 0.95,
            beta_mom: 0.92,
            shrinkage: 5e-4,
            rho_tr0: 1e-3,
            beta_tr: 0.997,
            eta_max: 0.5,
            warm_start_paths: default_warm_start_paths(),
            max_step_rms: None,
        }
    }
}

impl KfacConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if self.n_cov == 0 || self.n_evd == 0 {
            return Err("n_cov and n_evd must be positive".into());
        }
        if !(unit(self.beta_f) && unit(self.beta_d) && unit(self.beta_mom) && unit(self.beta_tr)) {
            return Err("all betas must lie in [0, 1)".into());
        }
        if !(self.shrinkage > 0.0 && self.shrinkage < 1.0) {
            return Err("shrinkage must lie in (0, 1)".into());
        }
        if !(self.rho_tr0 > 0.0 && self.eta_max > 0.0) {
            return Err("rho_tr0 and eta_max must be positive".into());
        }
        if self.max_step_rms.is_some_and(|c| !(c > 0.0)) {
            return Err("max_step_rms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCurvature {
    pub a: Matrix64,
    pub g: Matrix64,
    pub qa: Matrix64,
    pub qg: Matrix64,
    pub d: Matrix64,
    pub momentum: Matrix64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalCurvature {
    pub d: Matrix64,
    pub momentum: Matrix64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    Kronecker(KroneckerCurvature),
    Diagonal(DiagonalCurvature),
}

impl Curvature {
    pub fn d(&self) -> &Matrix64 {
        match self {
            Curvature::Kronecker(k) => &k.d,
            Curvature::Diagonal(k) => &k.d,
        }
    }
}

/// `(1 − ϱ)·D + ϱ·mean(D)`, which keeps the sum of `D` unchanged.
pub fn shrink(d: &Matrix64, shrinkage: f64) -> Matrix64 {
    let m = d.mean();
    d.map(|x| (1.0 - shrinkage) * x + shrinkage * m)
}

/// `Q_G · ((Q_Gᵀ V Q_A) ⊘ S) · Q_Aᵀ`
pub fn rotate_divide_rotate(v: &Matrix64, qa: &Matrix64, qg: &Matrix64, scale: &Matrix64) -> Matrix64 {
    let rotated = rotate(v, qa, qg);
    let divided = rotated.zip_map(scale, |x, s| x / s).expect("scale has gradient shape");
    unrotate(&divided, qa, qg)
}

/// `Q_Gᵀ V Q_A`
pub fn rotate(v: &Matrix64, qa: &Matrix64, qg: &Matrix64) -> Matrix64 {
    let mut tmp = Matrix64::zeros(qg.cols(), v.cols());
    gemm(1.0, qg, true, v, false, 0.0, &mut tmp);
    let mut out = Matrix64::zeros(tmp.rows(), qa.cols());
    gemm(1.0, &tmp, false, qa, false, 0.0, &mut out);
    out
}

/// `Q_G V Q_Aᵀ`
pub fn unrotate(v: &Matrix64, qa: &Matrix64, qg: &Matrix64) -> Matrix64 {
    let mut tmp = Matrix64::zeros(qg.rows(), v.cols());
    gemm(1.0, qg, false, v, false, 0.0, &mut tmp);
    let mut out = Matrix64::zeros(tmp.rows(), qa.rows());
    gemm(1.0, &tmp, false, qa, true, 0.0, &mut out);
    out
}

/// Eigenvalues (descending) and orthonormal eigenvectors (columns) of a
/// symmetric matrix. Each eigenvector has its largest-magnitude component
/// positive.
pub fn symmetric_eigen(m: &Matrix64) -> (Vec<f64>, Matrix64) {
    let n = m.rows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut q = Matrix64::zeros(n, n);
    for (c, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = (0..n)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            q.set(r, c, sign * col[r]);
        }
    }
    (values, q)
}

/// Batch statistics `T^{-1/2} Σ_t mean_batch(a_t a_tᵀ)` per Kronecker layer,
/// accumulated over one or more tapes (shards) of the same batch.
#[derive(Debug, Clone)]
pub struct ActivationStats {
    sums: Vec<Option<Matrix64>>,
    steps: Vec<usize>,
    paths: usize,
}

impl ActivationStats {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            sums: vec![None; n_blocks],
            steps: vec![0; n_blocks],
            paths: 0,
        }
    }

    /// Adds the hooked activations of a capturing tape holding `paths` paths.
    pub fn add_tape(&mut self, tape: &Tape, paths: usize) {
        for layer in tape.hooked_layers() {
            if layer >= self.sums.len() {
                continue;
            }
            let mut steps = 0;
            for a in tape.hook_activations(layer) {
                let n = a.cols();
                let acc = self.sums[layer].get_or_insert_with(|| Matrix64::zeros(n, n));
                gemm(1.0, a, true, a, false, 1.0, acc);
                steps += 1;
            }
            self.steps[layer] = steps;
        }
        self.paths += paths;
    }

    /// Combines statistics gathered on disjoint shards of one batch.
    pub fn merge(&mut self, other: &ActivationStats) {
        for (layer, s) in other.sums.iter().enumerate() {
            if let Some(s) = s {
                match &mut self.sums[layer] {
                    Some(acc) => acc.axpy(1.0, s).expect("factor shape"),
                    slot => *slot = Some(s.clone()),
                }
                self.steps[layer] = other.steps[layer];
            }
        }
        self.paths += other.paths;
    }

    pub fn factor(&self, layer: usize) -> Option<Matrix64> {
        let s = self.sums.get(layer)?.as_ref()?;
        let norm = 1.0 / (self.paths as f64 * (self.steps[layer] as f64).sqrt());
        Some(s.scale(norm))
    }
}

/// Backward pass of the pseudo-loss `⟨s, u⟩` for a single path whose actions
/// are the `1 x d` nodes `actions`; `target` is `s` flattened as `t·d + i`.
pub fn pseudo_backward(tape: &mut Tape, actions: &[Var], target: &[f64]) -> OptimResult<Gradients> {
    let d = actions.first().map_or(0, |&u| tape.value(u).cols());
    if target.len() != actions.len() * d || actions.iter().any(|&u| tape.value(u).shape() != (1, d)) {
        return Err(OptimError::Layout(format!(
            "pseudo target of length {} for {} single-path steps",
            target.len(),
            actions.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (t, &u) in actions.iter().enumerate() {
        let s = tape.constant(Matrix64::from_vec(1, d, target[t * d..(t + 1) * d].to_vec()).expect("row"))?;
        let p = tape.mul(u, s)?;
        let p = tape.sum(p)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
    }
    let seed = match total {
        Some(v) => v,
        None => tape.constant(Matrix64::scalar(0.0))?,
    };
    Ok(tape.backward(seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfacStepInfo {
    pub eta: f64,
    pub rho_tr: f64,
    pub inner: f64,
    /// Blocks whose step was scaled down by `max_step_rms`.
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kfac {
    pub config: KfacConfig,
    pub blocks: Vec<Curvature>,
    pub rho_tr: f64,
    pub iteration: u64,
}

impl Kfac {
    /// `layout` lists each parameter block's kind and shape.
    pub fn new(config: KfacConfig, layout: &[(ParamKind, usize, usize)]) -> Self {
        let blocks = layout
            .iter()
            .map(|&(kind, rows, cols)| match kind {
                ParamKind::Kronecker => Curvature::Kronecker(KroneckerCurvature {
                    a: Matrix64::zeros(cols, cols),
                    g: Matrix64::zeros(rows, rows),
                    qa: Matrix64::identity(cols),
                    qg: Matrix64::identity(rows),
                    d: Matrix64::zeros(rows, cols),
                    momentum: Matrix64::zeros(rows, cols),
                }),
                ParamKind::Diagonal => Curvature::Diagonal(DiagonalCurvature {
                    d: Matrix64::zeros(rows, cols),
                    momentum: Matrix64::zeros(rows, cols),
                }),
            })
            .collect();
        Self {
            rho_tr: config.rho_tr0,
            config,
            blocks,
            iteration: 0,
        }
    }

    /// Whether this iteration refreshes `A` and `G` (and so needs activation
    /// statistics from the batch forward pass).
    pub fn factor_iteration(&self) -> bool {
        self.iteration % self.config.n_cov == 0
    }

    pub fn update_a(&mut self, stats: &ActivationStats) {
        let beta = self.config.beta_f;
        for (id, block) in self.blocks.iter_mut().enumerate() {
            if let (Curvature::Kronecker(k), Some(f)) = (block, stats.factor(id)) {
                k.a.scale_in_place(beta);
                k.a.axpy(1.0 - beta, &f).expect("factor shape");
            }
        }
    }

    /// `G` EMA from the per-step pseudo pre-activation gradients (when
    /// `update_g`), and `D` EMA from the rotated pseudo-gradients.
    pub fn update_g_and_d(&mut self, pseudo: &Gradients, update_g: bool) {
        self.update_g_and_d_with(pseudo, update_g, self.config.beta_f, self.config.beta_d);
    }

    /// Initial curvature before the first iteration: `A` from a batch's
    /// activation statistics, `G` and `D` as plain means over `pseudo`
    /// samples, `D` in the eigenbasis of the initial factors.
    pub fn warm_start(&mut self, stats: &ActivationStats, pseudo: &[Gradients]) -> OptimResult<()> {
        if pseudo.is_empty() {
            return Err(OptimError::State("warm start needs at least one pseudo-gradient".into()));
        }
        for (id, block) in self.blocks.iter_mut().enumerate() {
            if let Curvature::Kronecker(k) = block {
                k.a = stats.factor(id).ok_or(OptimError::MissingStats)?;
                k.g.scale_in_place(0.0);
            }
        }
        for (i, g) in pseudo.iter().enumerate() {
            let keep = i as f64 / (i + 1) as f64;
            self.update_g_and_d_with(g, true, keep, 1.0);
        }
        self.recompute_eigenbasis()?;
        for block in &mut self.blocks {
            match block {
                Curvature::Kronecker(k) => k.d.scale_in_place(0.0),
                Curvature::Diagonal(k) => k.d.scale_in_place(0.0),
            }
        }
        for (i, g) in pseudo.iter().enumerate() {
            let keep = i as f64 / (i + 1) as f64;
            self.update_g_and_d_with(g, false, 1.0, keep);
        }
        Ok(())
    }

    fn update_g_and_d_with(&mut self, pseudo: &Gradients, update_g: bool, beta_f: f64, beta_d: f64) {
        for (id, block) in self.blocks.iter_mut().enumerate() {
            match block {
                Curvature::Kronecker(k) => {
                    if update_g {
                        if let Some(h) = pseudo.hook(id) {
                            let n = k.g.rows();
                            let mut s = Matrix64::zeros(n, n);
                            for g in &h.preact_grads {
                                gemm(1.0, g, true, g, false, 1.0, &mut s);
                            }
                            let norm = 1.0 / (h.preact_grads.len().max(1) as f64).sqrt();
                            k.g.scale_in_place(beta_f);
                            k.g.axpy((1.0 - beta_f) * norm, &s).expect("factor shape");
                        }
                    }
                    let rotated = match pseudo.param(id) {
                        Some(g) => rotate(g, &k.qa, &k.qg),
                        None => Matrix64::zeros(k.d.rows(), k.d.cols()),
                    };
                    ema_square(&mut k.d, &rotated, beta_d);
                }
                Curvature::Diagonal(k) => {
                    let g = pseudo
                        .param(id)
                        .cloned()
                        .unwrap_or_else(|| Matrix64::zeros(k.d.rows(), k.d.cols()));
                    ema_square(&mut k.d, &g, beta_d);
                }
            }
        }
    }

    pub fn recompute_eigenbasis(&mut self) -> OptimResult<()> {
        for (id, block) in self.blocks.iter_mut().enumerate() {
            if let Curvature::Kronecker(k) = block {
                k.qa = jittered_basis(&k.a).ok_or(OptimError::Eigen { block: id })?;
                k.qg = jittered_basis(&k.g).ok_or(OptimError::Eigen { block: id })?;
            }
        }
        Ok(())
    }

    pub fn precondition(&self, grads: &[Matrix64]) -> OptimResult<Vec<Matrix64>> {
        self.check_layout(grads)?;
        self.blocks
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(id, (block, g))| {
                let d = block.d();
                let mean = d.mean();
                if !(mean > 0.0) {
                    return Err(OptimError::DeadBlock { block: id, mean });
                }
                let scale = shrink(d, self.config.shrinkage);
                Ok(match block {
                    Curvature::Kronecker(k) => rotate_divide_rotate(g, &k.qa, &k.qg, &scale),
                    Curvature::Diagonal(_) => g.zip_map(&scale, |x, s| x / s).expect("shape"),
                })
            })
            .collect()
    }

    /// Step size from the trust region, trust-region decay, momentum and the
    /// parameter update.
    pub fn trust_region_step(
        &mut self,
        params: &mut [Matrix64],
        pre: &[Matrix64],
        grads: &[Matrix64],
    ) -> OptimResult<KfacStepInfo> {
        self.check_layout(grads)?;
        self.check_layout(pre)?;
        let inner: f64 = pre
            .iter()
            .zip(grads)
            .map(|(p, g)| p.dot(g).expect("shape"))
            .sum();
        if inner < -1e-12 || !inner.is_finite() {
            return Err(OptimError::NonPositiveInner(inner));
        }
        let eta = if inner > 0.0 {
            (self.rho_tr / inner).sqrt().min(self.config.eta_max)
        } else {
            self.config.eta_max
        };
        let rho_tr = self.rho_tr;
        self.rho_tr *= self.config.beta_tr;
        let mut clipped = 0;
        for ((block, p), w) in self.blocks.iter_mut().zip(pre).zip(params.iter_mut()) {
            let m = match block {
                Curvature::Kronecker(k) => &mut k.momentum,
                Curvature::Diagonal(k) => &mut k.momentum,
            };
            m.scale_in_place(self.config.beta_mom);
            m.axpy(1.0, p).expect("shape");
            let mut step = eta;
            if let Some(cap) = self.config.max_step_rms {
                let rms = eta * m.frobenius_norm() / (m.len() as f64).sqrt();
                if rms > cap {
                    step *= cap / rms;
                    clipped += 1;
                }
            }
            w.axpy(-step, m).map_err(|e| OptimError::Layout(e.to_string()))?;
        }
        Ok(KfacStepInfo {
            eta,
            rho_tr,
            inner,
            clipped,
        })
    }

    /// One full iteration. `stats` must be present on factor iterations.
    pub fn step(
        &mut self,
        params: &mut [Matrix64],
        grads: &[Matrix64],
        stats: Option<&ActivationStats>,
        pseudo: &Gradients,
    ) -> OptimResult<KfacStepInfo> {
        self.check_layout(params)?;
        let factors = self.factor_iteration();
        if factors {
            self.update_a(stats.ok_or(OptimError::MissingStats)?);
        }
        self.update_g_and_d(pseudo, factors);
        if self.iteration % self.config.n_evd == 0 {
            self.recompute_eigenbasis()?;
        }
        let pre = self.precondition(grads)?;
        let info = self.trust_region_step(params, &pre, grads)?;
        self.iteration += 1;
        Ok(info)
    }

    /// Largest damped second moment of every block.
    pub fn max_scales(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| shrink(b.d(), self.config.shrinkage).max_abs())
            .collect()
    }

    fn check_layout(&self, ms: &[Matrix64]) -> OptimResult<()> {
        let ok = ms.len() == self.blocks.len()
            && self.blocks.iter().zip(ms).all(|(b, m)| b.d().shape() == m.shape());
        if ok {
            Ok(())
        } else {
            Err(OptimError::Layout(format!(
                "{} matrices for {} curvature blocks",
                ms.len(),
                self.blocks.len()
            )))
        }
    }

    /// Named state matrices for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Matrix64)> {
        let mut out = vec![
            ("kfac.rho_tr".to_string(), Matrix64::scalar(self.rho_tr)),
            ("kfac.iteration".to_string(), Matrix64::scalar(self.iteration as f64)),
        ];
        for (id, b) in self.blocks.iter().enumerate() {
            match b {
                Curvature::Kronecker(k) => {
                    for (name, m) in [("a", &k.a), ("g", &k.g), ("qa", &k.qa), ("qg", &k.qg), ("d", &k.d), ("momentum", &k.momentum)] {
                        out.push((format!("kfac.{id}.{name}"), m.clone()));
                    }
                }
                Curvature::Diagonal(k) => {
                    out.push((format!("kfac.{id}.d"), k.d.clone()));
                    out.push((format!("kfac.{id}.momentum"), k.momentum.clone()));
                }
            }
        }
        out
    }

    pub fn import_state(&mut self, records: &[(String, Matrix64)]) -> OptimResult<()> {
        let find = |name: &str, shape: (usize, usize)| -> OptimResult<Matrix64> {
            let m = records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| OptimError::State(format!("missing record {name}")))?;
            if m.shape() != shape {
                return Err(OptimError::State(format!("record {name} has shape {:?}", m.shape())));
            }
            Ok(m)
        };
        self.rho_tr = find("kfac.rho_tr", (1, 1))?.item();
        self.iteration = find("kfac.iteration", (1, 1))?.item() as u64;
        for (id, b) in self.blocks.iter_mut().enumerate() {
            match b {
                Curvature::Kronecker(k) => {
                    for (name, m) in [("a", &mut k.a), ("g", &mut k.g), ("qa", &mut k.qa), ("qg", &mut k.qg), ("d", &mut k.d), ("momentum", &mut k.momentum)] {
                        *m = find(&format!("kfac.{id}.{name}"), m.shape())?;
                    }
                }
                Curvature::Diagonal(k) => {
                    k.d = find(&format!("kfac.{id}.d"), k.d.shape())?;
                    k.momentum = find(&format!("kfac.{id}.momentum"), k.momentum.shape())?;
                }
            }
        }
        Ok(())
    }
}

fn ema_square(d: &mut Matrix64, x: &Matrix64, beta: f64) {
    for (a, b) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *a = beta * *a + (1.0 - beta) * b * b;
    }
}

fn jittered_basis(m: &Matrix64) -> Option<Matrix64> {
    let n = m.rows();
    let jitter = 1e-12 * m.trace() / n as f64;
    let mut j = m.clone();
    for i in 0..n {
        j.set(i, i, j.get(i, i) + jitter);
    }
    let (_, q) = symmetric_eigen(&j);
    q.is_finite().then_some(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length; also the epoch length of the decay schedule.
    pub warmup_steps: u64,
    /// Learning-rate factor applied per epoch after warmup.
    pub decay_per_epoch: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 98,
            decay_per_epoch: 0.9,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0 && unit(self.beta1) && unit(self.beta2) && self.eps > 0.0) {
            return Err("lr, betas and eps out of range".into());
        }
        if !(self.decay_per_epoch > 0.0 && self.decay_per_epoch <= 1.0 && self.clip_norm > 0.0) {
            return Err("decay_per_epoch must lie in (0, 1] and clip_norm be positive".into());
        }
        Ok(())
    }

    /// Linear warmup over the first epoch, exponential decay afterwards.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let epoch = self.warmup_steps.max(1);
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / epoch as f64
        } else {
            self.lr * self.decay_per_epoch.powf((step - self.warmup_steps) as f64 / epoch as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamStepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Matrix64>,
    pub v: Vec<Matrix64>,
    pub iteration: u64,
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.dot(g).expect("shape")).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix64::zeros(r, c)).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            iteration: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix64], grads: &[Matrix64]) -> OptimResult<AdamStepInfo> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Layout(format!(
                "{} params / {} grads for {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let mut g = grads.to_vec();
        let grad_norm = clip_global_norm(&mut g, self.config.clip_norm);
        let c = &self.config;
        let t = self.iteration + 1;
        let lr = c.learning_rate(self.iteration);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (((w, g), m), v) in params.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            if w.shape() != g.shape() {
                return Err(OptimError::Layout(format!("{:?} vs {:?}", w.shape(), g.shape())));
            }
            let ws = w.as_mut_slice();
            for (((w, &g), m), v) in ws
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        self.iteration += 1;
        Ok(AdamStepInfo { lr, grad_norm })
    }

    pub fn export_state(&self) -> Vec<(String, Matrix64)> {
        let mut out = vec![("adam.iteration".to_string(), Matrix64::scalar(self.iteration as f64))];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("adam.{i}.m"), m.clone()));
            out.push((format!("adam.{i}.v"), v.clone()));
        }
        out
    }

    pub fn import_state(&mut self, records: &[(String, Matrix64)]) -> OptimResult<()> {
        let find = |name: String, shape| -> OptimResult<Matrix64> {
            records
                .iter()
                .find(|(n, m)| *n == name && m.shape() == shape)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| OptimError::State(format!("missing or misshapen record {name}")))
        };
        self.iteration = find("adam.iteration".into(), (1, 1))?.item() as u64;
        for i in 0..self.m.len() {
            self.m[i] = find(format!("adam.{i}.m"), self.m[i].shape())?;
            self.v[i] = find(format!("adam.{i}.v"), self.v[i].shape())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix64 {
        Matrix64::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix64 {
        let x = random(rng, n + 2, n);
        let mut s = x.t_matmul(&x).unwrap();
        for i in 0..n {
            s.set(i, i, s.get(i, i) + 0.1);
        }
        s
    }

    fn is_orthonormal(q: &Matrix64, tol: f64) -> bool {
        q.t_matmul(q).unwrap().max_abs_diff(&Matrix64::identity(q.cols())) < tol
    }

    #[test]
    fn eigenbasis_reconstructs_and_follows_sign_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 3, 7, 33] {
            let a = random_spd(&mut rng, n);
            let (vals, q) = symmetric_eigen(&a);
            assert!(is_orthonormal(&q, 1e-10));
            let diag = q.t_matmul(&a).unwrap().matmul(&q).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let expected = if i == j { vals[i] } else { 0.0 };
                    assert!((diag.get(i, j) - expected).abs() < 1e-10 * a.trace());
                }
            }
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
            for c in 0..n {
                let col: Vec<f64> = (0..n).map(|r| q.get(r, c)).collect();
                let big = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(big > 0.0);
            }
        }
    }

    #[test]
    fn diagonal_factor_gives_permutation_basis() {
        let a = Matrix64::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let (vals, q) = symmetric_eigen(&a);
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        for c in 0..3 {
            let nonzero: Vec<f64> = (0..3).map(|r| q.get(r, c)).filter(|x| x.abs() > 1e-14).collect();
            assert_eq!(nonzero.len(), 1);
            assert!((nonzero[0] - 1.0).abs() < 1e-14);
        }
        let (_, q) = symmetric_eigen(&Matrix64::identity(4));
        assert!(is_orthonormal(&q, 1e-12));
    }

    #[test]
    fn activation_factor_scaling() {
        // Constant activations e₁ over four steps contribute 4/√4·e₁e₁ᵀ.
        let mut tape = Tape::new(true);
        let w = tape.param(0, &Matrix64::zeros(1, 3)).unwrap();
        for _ in 0..4 {
            let x = tape.constant(Matrix64::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap()).unwrap();
            // Layer input already carries the trailing one in column 2.
            let ones = tape.constant(Matrix64::zeros(2, 1)).unwrap();
            let aug = tape.concat(&[x, ones]).unwrap();
            tape.linear_augmented(0, aug, w).unwrap();
        }
        let mut stats = ActivationStats::new(1);
        stats.add_tape(&tape, 2);
        let f = stats.factor(0).unwrap();
        let mut expected = Matrix64::zeros(3, 3);
        expected.set(0, 0, 2.0);
        assert!(f.max_abs_diff(&expected) < 1e-15);

        let mut kfac = Kfac::new(
            KfacConfig { beta_f: 0.0, ..KfacConfig::default() },
            &[(ParamKind::Kronecker, 1, 3)],
        );
        kfac.update_a(&stats);
        match &kfac.blocks[0] {
            Curvature::Kronecker(k) => assert_eq!(k.a, f),
            _ => unreachable!(),
        }
    }

    #[test]
    fn factors_stay_psd_under_many_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut kfac = Kfac::new(KfacConfig::default(), &[(ParamKind::Kronecker, 3, 4)]);
        for _ in 0..100 {
            let mut tape = Tape::new(true);
            let w = tape.param(0, &random(&mut rng, 3, 4)).unwrap();
            let mut acts = vec![];
            for _ in 0..3 {
                let x = tape.constant(random(&mut rng, 1, 3)).unwrap();
                let y = tape.linear(0, x, w).unwrap();
                acts.push(tape.tanh(y).unwrap());
            }
            let mut stats = ActivationStats::new(1);
            stats.add_tape(&tape, 1);
            let target: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads = pseudo_backward(&mut tape, &acts, &target).unwrap();
            kfac.update_a(&stats);
            kfac.update_g_and_d(&grads, true);
        }
        kfac.recompute_eigenbasis().unwrap();
        let Curvature::Kronecker(k) = &kfac.blocks[0] else { unreachable!() };
        for m in [&k.a, &k.g] {
            assert!(m.is_symmetric(1e-14));
            assert!(symmetric_eigen(m).0.iter().all(|&l| l >= -1e-12));
        }
        assert!(k.d.as_slice().iter().all(|&x| x >= 0.0));
        assert!(is_orthonormal(&k.qa, 1e-10) && is_orthonormal(&k.qg, 1e-10));
    }

    #[test]
    fn identity_basis_makes_d_an_ema_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new(true);
        let w = tape.param(0, &random(&mut rng, 2, 3)).unwrap();
        let x = tape.constant(random(&mut rng, 1, 2)).unwrap();
        let u = tape.linear(0, x, w).unwrap();
        let grads = pseudo_backward(&mut tape, &[u], &[0.5, -2.0]).unwrap();
        let mut kfac = Kfac::new(KfacConfig::default(), &[(ParamKind::Kronecker, 2, 3)]);
        kfac.update_g_and_d(&grads, false);
        let g = grads.param(0).unwrap();
        let expected = g.map(|v| 0.05 * v * v);
        assert!(kfac.blocks[0].d().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_target_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = random(&mut rng, 2, 3);
        let x0 = random(&mut rng, 1, 2);
        let run = |s: &[f64]| {
            let mut tape = Tape::new(true);
            let w = tape.param(0, &w0).unwrap();
            let x = tape.constant(x0.clone()).unwrap();
            let y = tape.linear(0, x, w).unwrap();
            let u = tape.tanh(y).unwrap();
            pseudo_backward(&mut tape, &[u], s).unwrap().param(0).unwrap().clone()
        };
        assert_eq!(run(&[0.0, 0.0]).max_abs(), 0.0);
        let g1 = run(&[0.3, -0.7]);
        let g2 = run(&[0.6, -1.4]);
        assert!(g2.max_abs_diff(&g1.scale(2.0)) < 1e-15);
    }

    #[test]
    fn unit_scale_preconditioner_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, qa) = symmetric_eigen(&random_spd(&mut rng, 4));
        let (_, qg) = symmetric_eigen(&random_spd(&mut rng, 3));
        let g = random(&mut rng, 3, 4);
        let out = rotate_divide_rotate(&g, &qa, &qg, &Matrix64::filled(3, 4, 1.0));
        assert!(out.max_abs_diff(&g) < 1e-14);
    }

    #[test]
    fn dead_block_is_reported() {
        let kfac = Kfac::new(KfacConfig::default(), &[(ParamKind::Diagonal, 1, 3)]);
        assert!(matches!(
            kfac.precondition(&[Matrix64::zeros(1, 3)]),
            Err(OptimError::DeadBlock { block: 0, .. })
        ));
    }

    #[test]
    fn trust_region_step_size() {
        let mut kfac = Kfac::new(
            KfacConfig {
                eta_max: 1.0,
                beta_mom: 0.0,
                ..KfacConfig::default()
            },
            &[(ParamKind::Diagonal, 1, 4)],
        );
        let g = Matrix64::filled(1, 4, 1.0);
        let mut p = vec![Matrix64::zeros(1, 4)];
        let info = kfac.trust_region_step(&mut p, &[g.clone()], &[g.clone()]).unwrap();
        assert!((info.eta - 2.5e-4f64.sqrt()).abs() < 1e-15);
        assert!((kfac.rho_tr - 0.997e-3).abs() < 1e-18);
        assert!(p[0].max_abs_diff(&g.scale(-info.eta)) < 1e-18);

        let tiny = Matrix64::filled(1, 4, 1e-6);
        let info = kfac.trust_region_step(&mut p, &[tiny.clone()], &[tiny]).unwrap();
        assert_eq!(info.eta, 1.0);
        let bad = kfac.trust_region_step(&mut p, &[g.scale(-1.0)], &[g]);
        assert!(matches!(bad, Err(OptimError::NonPositiveInner(_))));
    }

    #[test]
    fn momentum_accumulates() {
        let mut kfac = Kfac::new(
            KfacConfig { eta_max: 1e-3, ..KfacConfig::default() },
            &[(ParamKind::Diagonal, 1, 1)],
        );
        let g = Matrix64::scalar(1.0);
        let mut p = vec![Matrix64::scalar(0.0)];
        kfac.trust_region_step(&mut p, &[g.clone()], &[g.clone()]).unwrap();
        kfac.trust_region_step(&mut p, &[g.clone()], &[g]).unwrap();
        assert!((p[0].item() + 1e-3 * (1.0 + 1.92)).abs() < 1e-15);
    }

    #[test]
    fn step_cap_bounds_each_block() {
        let layout = [(ParamKind::Diagonal, 1, 4), (ParamKind::Diagonal, 1, 2)];
        let config = KfacConfig {
            eta_max: 1.0,
            beta_mom: 0.0,
            ..KfacConfig::default()
        };
        let pre = vec![Matrix64::filled(1, 4, 1.0), Matrix64::filled(1, 2, 1e-4)];
        let mut free = Kfac::new(config.clone(), &layout);
        let mut p_free = vec![Matrix64::zeros(1, 4), Matrix64::zeros(1, 2)];
        let info = free.trust_region_step(&mut p_free, &pre, &pre).unwrap();
        assert_eq!(info.clipped, 0);

        let mut capped = Kfac::new(
            KfacConfig {
                max_step_rms: Some(1e-3),
                ..config
            },
            &layout,
        );
        let mut p = vec![Matrix64::zeros(1, 4), Matrix64::zeros(1, 2)];
        let info = capped.trust_region_step(&mut p, &pre, &pre).unwrap();
        assert_eq!(info.clipped, 1);
        let rms = p[0].frobenius_norm() / 2.0;
        assert!((rms - 1e-3).abs() < 1e-18);
        // Blocks under the cap move exactly as without it.
        assert_eq!(p[1], p_free[1]);
    }

    #[test]
    fn adam_basics() {
        let cfg = AdamConfig {
            warmup_steps: 0,
            decay_per_epoch: 1.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg.clone(), &[(1, 3)]);
        let mut p = vec![Matrix64::zeros(1, 3)];
        adam.step(&mut p, &[Matrix64::zeros(1, 3)]).unwrap();
        assert_eq!(p[0].max_abs(), 0.0);

        let mut adam = Adam::new(cfg, &[(1, 3)]);
        let g = Matrix64::from_vec(1, 3, vec![0.3, -0.02, 0.1]).unwrap();
        for _ in 0..2000 {
            let before = p[0].clone();
            adam.step(&mut p, &[g.clone()]).unwrap();
            let step = p[0].sub(&before).unwrap();
            for (s, gi) in step.as_slice().iter().zip(g.as_slice()) {
                assert!((s + 1e-3 * gi.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clipping_and_schedule() {
        let mut g = vec![Matrix64::from_vec(1, 2, vec![6.0, 8.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 10.0);
        assert!((g[0].frobenius_norm() - 1.0).abs() < 1e-15);
        let cfg = AdamConfig {
            lr: 1.0,
            warmup_steps: 4,
            decay_per_epoch: 0.5,
            ..AdamConfig::default()
        };
        let lrs: Vec<f64> = (0..9).map(|s| cfg.learning_rate(s)).collect();
        assert_eq!(&lrs[..5], &[0.25, 0.5, 0.75, 1.0, 1.0]);
        assert!((lrs[8] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = [(ParamKind::Kronecker, 2, 3), (ParamKind::Diagonal, 1, 2)];
        let mut kfac = Kfac::new(KfacConfig::default(), &layout);
        if let Curvature::Kronecker(k) = &mut kfac.blocks[0] {
            k.a = random_spd(&mut rng, 3);
            k.d = random(&mut rng, 2, 3).map(f64::abs);
        }
        kfac.rho_tr = 0.5;
        kfac.iteration = 17;
        let mut back = Kfac::new(KfacConfig::default(), &layout);
        back.import_state(&kfac.export_state()).unwrap();
        assert_eq!(back, kfac);
        assert!(back.import_state(&[]).is_err());
    }

    proptest! {
        #[test]
        fn shrinkage_preserves_the_sum(vals in proptest::collection::vec(0.0f64..10.0, 1..20), rho in 1e-6f64..0.99) {
            let d = Matrix64::from_vec(1, vals.len(), vals).unwrap();
            let s = shrink(&d, rho);
            prop_assert!((s.sum() - d.sum()).abs() <= 1e-12 * d.sum().max(1.0));
        }

        #[test]
        fn preconditioning_is_sign_gauge_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, qa) = symmetric_eigen(&random_spd(&mut rng, 4));
            let (_, qg) = symmetric_eigen(&random_spd(&mut rng, 3));
            let scale = random(&mut rng, 3, 4).map(|x| x.abs() + 0.1);
            let g = random(&mut rng, 3, 4);
            let flip = |q: &Matrix64, rng: &mut ChaCha8Rng| {
                let signs: Vec<f64> = (0..q.cols()).map(|_| if rng.random_bool(0.5) { -1.0 } else { 1.0 }).collect();
                Matrix64::from_fn(q.rows(), q.cols(), |r, c| q.get(r, c) * signs[c])
            };
            let a = rotate_divide_rotate(&g, &qa, &qg, &scale);
            let b = rotate_divide_rotate(&g, &flip(&qa, &mut rng), &flip(&qg, &mut rng), &scale);
            prop_assert!(a.max_abs_diff(&b) < 1e-13);
        }
    }
}
