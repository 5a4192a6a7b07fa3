//! Define-by-run reverse-mode differentiation over [`Matrix64`] values.
//!
//! Every primitive appends one node to a [`Tape`]. Affine layers built with
//! [`Tape::linear`] can be *hooked*: the tape then remembers the
//! bias-augmented input `a_t` and the pre-activation node of every use, and
//! [`Tape::backward`] hands back the matching pre-activation gradients `g_t`.
//! For any weight matrix used `T` times, `Σ_t g_tᵀ a_t` equals the weight
//! gradient; Kronecker-factored curvature estimates are built from these pairs.

use thiserror::Error;

use crate::matrix::{gemm, Matrix64, ShapeError};

/// Stabilizer added under the root of the RMS normalizer.
pub const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error in {op} (node {node}): {source}")]
    Shape {
        op: &'static str,
        node: usize,
        #[source]
        source: ShapeError,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward seed must be a 1x1 node, got {rows}x{cols}")]
    NonScalarSeed { rows: usize, cols: usize },
    #[error("sample variance needs at least 2 elements, got {0}")]
    TooFewSamples(usize),
}

pub type DiffResult<T> = Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Symexp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SampleVariance(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Symexp(_) => "symexp",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SampleVariance(_) => "sample_variance",
            Op::RmsNorm { .. } => "rms_normalize",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix64,
}

#[derive(Debug, Clone, Copy)]
struct HookRecord {
    layer: usize,
    input: Var,
    preact: Var,
}

/// Per-layer activations and pre-activation gradients, one entry per use of
/// the layer during the recorded computation.
#[derive(Debug, Clone)]
pub struct HookChannel {
    pub layer: usize,
    pub activations: Vec<Matrix64>,
    pub preact_grads: Vec<Matrix64>,
}

impl HookChannel {
    /// `Σ_t g_tᵀ a_t`, the weight gradient rebuilt from hook captures.
    pub fn weight_gradient(&self) -> Matrix64 {
        let (n_out, n_in) = (
            self.preact_grads[0].cols(),
            self.activations[0].cols(),
        );
        let mut out = Matrix64::zeros(n_out, n_in);
        for (g, a) in self.preact_grads.iter().zip(&self.activations).rev() {
            gemm(1.0, g, true, a, false, 1.0, &mut out);
        }
        out
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Matrix64>>,
    extra: Vec<(Var, Matrix64)>,
    pub hooks: Vec<HookChannel>,
}

impl Gradients {
    /// Gradient of a registered parameter; `None` if the parameter never
    /// influenced the seed.
    pub fn param(&self, id: usize) -> Option<&Matrix64> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn take_params(self) -> Vec<Option<Matrix64>> {
        self.params
    }

    /// Gradient of a node that was requested through `backward_with`.
    pub fn node(&self, var: Var) -> Option<&Matrix64> {
        self.extra.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    pub fn hook(&self, layer: usize) -> Option<&HookChannel> {
        self.hooks.iter().find(|h| h.layer == layer)
    }
}

/// Recorded computation. Rebuilt for every rollout.
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    hooks: Vec<HookRecord>,
    capture: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(false)
    }
}

impl Tape {
    /// `capture` turns on activation recording for hooked layers.
    pub fn new(capture: bool) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            hooks: Vec::new(),
            capture,
        }
    }

    pub fn capturing(&self) -> bool {
        self.capture
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix64 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix64) -> DiffResult<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(id))
    }

    fn shape_err(&self, op: &'static str, source: ShapeError) -> DiffError {
        DiffError::Shape {
            op,
            node: self.nodes.len(),
            source,
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        self.shape_err(
            op,
            ShapeError::Mismatch {
                op,
                left: self.value(a).shape(),
                right: self.value(b).shape(),
            },
        )
    }

    pub fn constant(&mut self, value: Matrix64) -> DiffResult<Var> {
        self.push(Op::Constant, value)
    }

    /// Registers parameter `id` on the tape; a second call returns the same node.
    pub fn param(&mut self, id: usize, value: &Matrix64) -> DiffResult<Var> {
        if id >= self.param_vars.len() {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return Ok(v);
        }
        let v = self.push(Op::Param, value.clone())?;
        self.param_vars[id] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|e| self.shape_err("matmul", e))?;
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let out = self
            .value(a)
            .matmul_t(self.value(b))
            .map_err(|e| self.shape_err("matmul_t", e))?;
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let out = self
            .value(a)
            .add(self.value(b))
            .map_err(|e| self.shape_err("add", e))?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let out = self
            .value(a)
            .sub(self.value(b))
            .map_err(|e| self.shape_err("sub", e))?;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let out = self
            .value(a)
            .hadamard(self.value(b))
            .map_err(|e| self.shape_err("mul", e))?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> DiffResult<Var> {
        let out = self.value(a).scale(alpha);
        self.push(Op::Scale(a, alpha), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> DiffResult<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> DiffResult<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn square(&mut self, a: Var) -> DiffResult<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), out)
    }

    pub fn abs(&mut self, a: Var) -> DiffResult<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), out)
    }

    /// `sign(x)(e^|x| − 1)`
    pub fn symexp(&mut self, a: Var) -> DiffResult<Var> {
        let out = self.value(a).map(symexp);
        self.push(Op::Symexp(a), out)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> DiffResult<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.mismatch("concat", parts[0], p));
            }
            cols += self.value(p).cols();
        }
        let mut out = Matrix64::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(Op::Concat(parts.to_vec()), out)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> DiffResult<Var> {
        let src = self.value(a);
        if start > end || end > src.cols() {
            return Err(self.shape_err(
                "slice",
                ShapeError::Mismatch {
                    op: "slice",
                    left: src.shape(),
                    right: (start, end),
                },
            ));
        }
        let out = Matrix64::from_fn(src.rows(), end - start, |r, c| src.get(r, start + c));
        self.push(Op::Slice(a, start, end), out)
    }

    pub fn sum(&mut self, a: Var) -> DiffResult<Var> {
        let out = Matrix64::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> DiffResult<Var> {
        let out = Matrix64::scalar(self.value(a).mean());
        self.push(Op::Mean(a), out)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> DiffResult<Var> {
        let src = self.value(a);
        let out = Matrix64::from_fn(src.rows(), 1, |r, _| src.row(r).iter().sum());
        self.push(Op::SumRows(a), out)
    }

    /// Unbiased sample variance over all entries.
    pub fn sample_variance(&mut self, a: Var) -> DiffResult<Var> {
        let src = self.value(a);
        let n = src.len();
        if n < 2 {
            return Err(DiffError::TooFewSamples(n));
        }
        let m = src.mean();
        let ss: f64 = src.as_slice().iter().map(|v| (v - m) * (v - m)).sum();
        self.push(Op::SampleVariance(a), Matrix64::scalar(ss / (n - 1) as f64))
    }

    /// Row-wise `x / sqrt(mean(x²) + ε) ∘ gain`, `gain` a `1 x n` row.
    pub fn rms_normalize(&mut self, x: Var, gain: Var) -> DiffResult<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(self.mismatch("rms_normalize", x, gain));
        }
        let n = xv.cols() as f64;
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut out = Matrix64::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gv.as_slice()) {
                *o = v * inv * g;
            }
        }
        self.push(Op::RmsNorm { x, gain, inv_rms }, out)
    }

    /// Affine layer `[input, 1] · Wᵀ` with `W` of shape `n_out x (n_in + 1)`.
    /// When the tape captures, the augmented input and the pre-activation
    /// are recorded under `layer`.
    pub fn linear(&mut self, layer: usize, input: Var, weight: Var) -> DiffResult<Var> {
        let rows = self.value(input).rows();
        let ones = self.constant(Matrix64::filled(rows, 1, 1.0))?;
        let aug = self.concat(&[input, ones])?;
        self.linear_augmented(layer, aug, weight)
    }

    /// Like [`Tape::linear`] for an input that already carries the trailing 1.
    pub fn linear_augmented(&mut self, layer: usize, aug: Var, weight: Var) -> DiffResult<Var> {
        let s = self.matmul_t(aug, weight)?;
        if self.capture {
            self.hooks.push(HookRecord {
                layer,
                input: aug,
                preact: s,
            });
        }
        Ok(s)
    }

    /// Activations recorded so far for `layer`, in forward order.
    pub fn hook_activations(&self, layer: usize) -> impl Iterator<Item = &Matrix64> + '_ {
        self.hooks
            .iter()
            .filter(move |h| h.layer == layer)
            .map(|h| self.value(h.input))
    }

    pub fn hooked_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.hooks.iter().map(|h| h.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    pub fn backward(&self, seed: Var) -> DiffResult<Gradients> {
        self.backward_with(seed, &[])
    }

    /// Reverse sweep from a scalar `seed`. Gradients are returned for all
    /// parameters, for every node in `extra`, and for hooked pre-activations.
    pub fn backward_with(&self, seed: Var, extra: &[Var]) -> DiffResult<Gradients> {
        let sv = self.value(seed);
        if sv.shape() != (1, 1) {
            return Err(DiffError::NonScalarSeed {
                rows: sv.rows(),
                cols: sv.cols(),
            });
        }
        let n = self.nodes.len();
        let mut keep = vec![false; n];
        for v in extra {
            keep[v.0] = true;
        }
        for h in &self.hooks {
            keep[h.preact.0] = true;
        }
        let mut grads: Vec<Option<Matrix64>> = vec![None; n];
        grads[seed.0] = Some(Matrix64::scalar(1.0));
        let mut kept: Vec<Option<Matrix64>> = vec![None; n];

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if keep[i] {
                kept[i] = Some(g);
            }
        }

        let params = self
            .param_vars
            .iter()
            .map(|pv| pv.and_then(|v| grads[v.0].take()))
            .collect();
        let extra_out = extra
            .iter()
            .map(|&v| {
                let g = kept[v.0]
                    .clone()
                    .or_else(|| grads[v.0].clone())
                    .unwrap_or_else(|| {
                        let (r, c) = self.value(v).shape();
                        Matrix64::zeros(r, c)
                    });
                (v, g)
            })
            .collect();

        let mut channels: Vec<HookChannel> = Vec::new();
        for h in &self.hooks {
            let g = kept[h.preact.0].clone().unwrap_or_else(|| {
                let (r, c) = self.value(h.preact).shape();
                Matrix64::zeros(r, c)
            });
            let a = self.value(h.input).clone();
            match channels.iter_mut().find(|c| c.layer == h.layer) {
                Some(c) => {
                    c.activations.push(a);
                    c.preact_grads.push(g);
                }
                None => channels.push(HookChannel {
                    layer: h.layer,
                    activations: vec![a],
                    preact_grads: vec![g],
                }),
            }
        }
        channels.sort_by_key(|c| c.layer);

        Ok(Gradients {
            params,
            extra: extra_out,
            hooks: channels,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Matrix64,
        grads: &mut [Option<Matrix64>],
    ) -> DiffResult<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                // C = A B: dA = dC Bᵀ, dB = Aᵀ dC
                let (av, bv) = (val(*a), val(*b));
                accumulate_gemm(grads, *a, av.shape(), g, false, bv, true);
                accumulate_gemm(grads, *b, bv.shape(), av, true, g, false);
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (av, bv) = (val(*a), val(*b));
                accumulate_gemm(grads, *a, av.shape(), g, false, bv, false);
                accumulate_gemm(grads, *b, bv.shape(), g, true, av, false);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(val(*b)).expect("shape checked in forward");
                let db = g.hadamard(val(*a)).expect("shape checked in forward");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, alpha) => accumulate(grads, *a, g.scale(*alpha)),
            Op::Sigmoid(a) => {
                let d = g
                    .zip_map(&node.value, |gi, y| gi * y * (1.0 - y))
                    .expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .zip_map(&node.value, |gi, y| gi * (1.0 - y * y))
                    .expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(val(*a), |gi, x| 2.0 * gi * x).expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .zip_map(val(*a), |gi, x| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Symexp(a) => {
                // d/dx sign(x)(e^|x| − 1) = e^|x| = |y| + 1
                let d = g
                    .zip_map(&node.value, |gi, y| gi * (y.abs() + 1.0))
                    .expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let d = Matrix64::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                    accumulate(grads, p, d);
                    off += w;
                }
            }
            Op::Slice(a, start, end) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix64::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix64::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix64::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix64::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SampleVariance(a) => {
                let x = val(*a);
                let n = x.len() as f64;
                let m = x.mean();
                let k = 2.0 * g.item() / (n - 1.0);
                accumulate(grads, *a, x.map(|v| k * (v - m)));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (val(*x), val(*gain));
                let (rows, cols) = xv.shape();
                let n = cols as f64;
                let mut dx = Matrix64::zeros(rows, cols);
                let mut dgain = Matrix64::zeros(1, cols);
                for r in 0..rows {
                    let (xr, gr, inv) = (xv.row(r), g.row(r), inv_rms[r]);
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dgain.as_mut_slice()[j] += gr[j] * xr[j] * inv;
                        dot += gr[j] * gv.as_slice()[j] * xr[j];
                    }
                    let k = inv * inv * inv * dot / n;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv * gv.as_slice()[j] * gr[j] - xr[j] * k;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix64>], v: Var, d: Matrix64) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &d).expect("gradient shape"),
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_gemm(
    grads: &mut [Option<Matrix64>],
    v: Var,
    shape: (usize, usize),
    a: &Matrix64,
    ta: bool,
    b: &Matrix64,
    tb: bool,
) {
    let slot = &mut grads[v.0];
    match slot {
        Some(existing) => gemm(1.0, a, ta, b, tb, 1.0, existing),
        None => {
            let mut out = Matrix64::zeros(shape.0, shape.1);
            gemm(1.0, a, ta, b, tb, 0.0, &mut out);
            *slot = Some(out);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix64 {
        Matrix64::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of `params[k]`.
    fn fd_grad(
        params: &[Matrix64],
        k: usize,
        f: &dyn Fn(&[Matrix64]) -> f64,
        h: f64,
    ) -> Matrix64 {
        let mut out = Matrix64::zeros(params[k].rows(), params[k].cols());
        for i in 0..params[k].len() {
            let mut p = params.to_vec();
            p[k].as_mut_slice()[i] += h;
            let up = f(&p);
            p[k].as_mut_slice()[i] -= 2.0 * h;
            let dn = f(&p);
            out.as_mut_slice()[i] = (up - dn) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Matrix64, b: &Matrix64) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / (b.frobenius_norm().max(1e-12))
    }

    #[test]
    fn symexp_values() {
        assert_eq!(symexp(0.0), 0.0);
        assert!((symexp(1.0) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        assert!((symexp(-1.0) + (std::f64::consts::E - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn rms_normalize_of_zero_row_is_zero() {
        let mut t = Tape::default();
        let x = t.constant(Matrix64::zeros(2, 4)).unwrap();
        let g = t.constant(Matrix64::filled(1, 4, 1.0)).unwrap();
        let y = t.rms_normalize(x, g).unwrap();
        assert_eq!(t.value(y), &Matrix64::zeros(2, 4));
    }

    #[test]
    fn gradient_of_summed_gram_at_identity() {
        // d/dx sum(x xᵀ) at x = I₂ is 2·I... entrywise: d/dx_ij Σ_kl Σ_m x_km x_lm = 2 Σ_k x_kj
        let mut t = Tape::default();
        let x = t.param(0, &Matrix64::identity(2)).unwrap();
        let xx = t.matmul_t(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        let g = t.backward(s).unwrap();
        let gx = g.param(0).unwrap();
        // column sums of I are 1, so the gradient is 2 everywhere
        assert_eq!(gx, &Matrix64::filled(2, 2, 2.0));
        // the (x xᵀ) Jacobian at x=I contracted with the identity seed gives 2·I
        let mut t = Tape::default();
        let x = t.param(0, &Matrix64::identity(2)).unwrap();
        let xx = t.matmul_t(x, x).unwrap();
        let mask = t.constant(Matrix64::identity(2)).unwrap();
        let tr = t.mul(xx, mask).unwrap();
        let s = t.sum(tr).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.param(0).unwrap(), &Matrix64::identity(2).scale(2.0));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut t = Tape::default();
        let x = t.param(0, &Matrix64::zeros(2, 2)).unwrap();
        assert!(matches!(
            t.backward(x),
            Err(DiffError::NonScalarSeed { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut t = Tape::default();
        let a = t.constant(Matrix64::zeros(2, 3)).unwrap();
        let b = t.constant(Matrix64::zeros(3, 3)).unwrap();
        assert!(matches!(t.add(a, b), Err(DiffError::Shape { .. })));
        let big = t.constant(Matrix64::filled(1, 1, 800.0)).unwrap();
        assert!(matches!(
            t.symexp(big),
            Err(DiffError::NonFinite { op: "symexp", .. })
        ));
        let one = t.constant(Matrix64::scalar(1.0)).unwrap();
        assert!(matches!(
            t.sample_variance(one),
            Err(DiffError::TooFewSamples(1))
        ));
    }

    #[test]
    fn linear_recurrence_matches_finite_differences() {
        // u_t = w·u_{t−1} + x_t over 3 steps, loss = Σ u_t²
        let xs = [0.3, -0.7, 1.1];
        let f = |p: &[Matrix64]| {
            let w = p[0].item();
            let mut u = p[1].item();
            let mut l = 0.0;
            for x in xs {
                u = w * u + x;
                l += u * u;
            }
            l
        };
        let params = vec![Matrix64::scalar(0.8), Matrix64::scalar(0.2)];
        let mut t = Tape::default();
        let w = t.param(0, &params[0]).unwrap();
        let mut u = t.param(1, &params[1]).unwrap();
        let mut terms = Vec::new();
        for x in xs {
            let wu = t.matmul(w, u).unwrap();
            let xc = t.constant(Matrix64::scalar(x)).unwrap();
            u = t.add(wu, xc).unwrap();
            terms.push(t.square(u).unwrap());
        }
        let cat = t.concat(&terms).unwrap();
        let l = t.sum(cat).unwrap();
        let g = t.backward(l).unwrap();
        for k in 0..2 {
            let fd = fd_grad(&params, k, &f, 1e-6);
            assert!(rel_err(g.param(k).unwrap(), &fd) < 1e-7);
        }
    }

    /// Every primitive checked against central differences on a random instance.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 4, 4),
            random(&mut rng, 3, 4),
            random(&mut rng, 1, 4).map(|v| v + 1.5),
            random(&mut rng, 5, 4),
            random(&mut rng, 2, 5),
        ];
        type Build = fn(&mut Tape, &[Var]) -> DiffResult<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |t, v| t.matmul(v[0], v[1])),
            ("matmul_t", |t, v| t.matmul_t(v[0], v[4])),
            ("add", |t, v| t.add(v[0], v[2])),
            ("sub", |t, v| t.sub(v[0], v[2])),
            ("mul", |t, v| t.mul(v[0], v[2])),
            ("scale", |t, v| t.scale(v[0], -2.5)),
            ("sigmoid", |t, v| t.sigmoid(v[0])),
            ("tanh", |t, v| t.tanh(v[0])),
            ("square", |t, v| t.square(v[0])),
            ("abs", |t, v| t.abs(v[0])),
            ("symexp", |t, v| t.symexp(v[0])),
            ("concat", |t, v| t.concat(&[v[0], v[2], v[0]])),
            ("slice", |t, v| t.slice(v[0], 1, 3)),
            ("sum_rows", |t, v| t.sum_rows(v[0])),
            ("sample_variance", |t, v| t.sample_variance(v[0])),
            ("mean", |t, v| t.mean(v[0])),
            ("rms_normalize", |t, v| t.rms_normalize(v[0], v[3])),
            ("linear", |t, v| t.linear(0, v[0], v[5])),
        ];
        // random readout keeps every output entry in play
        let readout_seed = 99u64;
        for (name, build) in cases {
            let eval = |p: &[Matrix64]| -> (Tape, Var) {
                let mut t = Tape::default();
                let vars: Vec<Var> = p.iter().enumerate().map(|(i, m)| t.param(i, m).unwrap()).collect();
                let y = build(&mut t, &vars).unwrap();
                let (r, c) = t.value(y).shape();
                let mut rr = ChaCha8Rng::seed_from_u64(readout_seed);
                let w = t.constant(random(&mut rr, r, c)).unwrap();
                let z = t.mul(y, w).unwrap();
                let s = t.sum(z).unwrap();
                (t, s)
            };
            let f = |p: &[Matrix64]| {
                let (t, s) = eval(p);
                t.value(s).item()
            };
            let (t, s) = eval(&params);
            let g = t.backward(s).unwrap();
            for k in 0..params.len() {
                let fd = fd_grad(&params, k, &f, 1e-6);
                match g.param(k) {
                    Some(an) => {
                        let err = rel_err(an, &fd);
                        assert!(err < 1e-5, "{name}: param {k} rel err {err}");
                    }
                    None => assert!(fd.max_abs() < 1e-9, "{name}: missing grad {k}"),
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 3, 3);
        let x = random(&mut rng, 4, 3);
        let grads = |factor: f64| {
            let mut t = Tape::default();
            let wv = t.param(0, &w).unwrap();
            let xv = t.constant(x.clone()).unwrap();
            let h = t.matmul_t(xv, wv).unwrap();
            let h = t.tanh(h).unwrap();
            let l = t.sum(h).unwrap();
            let l = t.scale(l, factor).unwrap();
            t.backward(l).unwrap().param(0).unwrap().clone()
        };
        assert_eq!(grads(2.0), grads(1.0).scale(2.0));
    }

    #[test]
    fn hooks_rebuild_weight_gradients_of_a_small_recurrent_net() {
        // two layers, each applied at every one of 4 steps
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = random(&mut rng, 3, 3 + 2 + 1);
        let w2 = random(&mut rng, 2, 3 + 1);
        let mut t = Tape::new(true);
        let p1 = t.param(0, &w1).unwrap();
        let p2 = t.param(1, &w2).unwrap();
        let mut u = t.constant(Matrix64::zeros(5, 2)).unwrap();
        let mut outs = Vec::new();
        for _ in 0..4 {
            let x = t.constant(random(&mut rng, 5, 3)).unwrap();
            let inp = t.concat(&[x, u]).unwrap();
            let h = t.linear(0, inp, p1).unwrap();
            let h = t.tanh(h).unwrap();
            u = t.linear(1, h, p2).unwrap();
            outs.push(t.square(u).unwrap());
        }
        let cat = t.concat(&outs).unwrap();
        let l = t.sum(cat).unwrap();
        let g = t.backward(l).unwrap();
        for layer in 0..2 {
            let ch = g.hook(layer).unwrap();
            assert_eq!(ch.activations.len(), 4);
            assert_eq!(ch.preact_grads.len(), 4);
            let diff = ch.weight_gradient().max_abs_diff(g.param(layer).unwrap());
            assert!(diff < 1e-12, "layer {layer}: {diff}");
        }
    }
}
