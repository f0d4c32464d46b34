//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the record once in reverse.
//! Values produced by an op are checked for finiteness; a NaN or infinity is
//! reported as [`Error::NonFinite`] at the op that produced it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::nn::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_into, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Layer-norm denominator stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp applied before the logs of the survival likelihood.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Tanh,
    Silu,
    Sigmoid,
    Softplus,
    SoftmaxLastDim,
    NegLog,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Affine { a: Var, mul: f64 },
    Unary { kind: UnaryKind, a: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    ScaleRows { x: Var, w: Var },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Transpose { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    CausalConv { x: Var, w: Var, bias: Var },
    SelectiveScan { u: Var, delta: Var, a: Var, b: Var, c: Var, states: Vec<f64>, abar: Vec<f64>, f: Vec<f64> },
    PairwiseSqDist { x: Var, y: Var },
    SurvNll { h: Var, k: usize, censored: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "gradient lookup with a var from another tape");
        let shape = &self.shapes[v.idx];
        match self.grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    macs: u64,
    activations: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            macs: 0,
            activations: 0,
        }
    }

    /// Drops every recorded node and saved intermediate.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.macs = 0;
        self.activations = 0;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by recorded ops (plus any [`Tape::count_macs`] calls).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Floats held as op outputs and saved scan states.
    pub fn activation_floats(&self) -> u64 {
        self.activations
    }

    /// Adds multiply-adds performed outside the tape to the counter.
    pub fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("tensor is not recorded on this tape".into()));
        }
        Ok(())
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a leaf that gradients are computed for.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter from `store`; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.idx].requires_grad);
        self.activations += value.len() as u64;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (p, q) = self.value(a).dims2()?;
        let (q2, r) = self.value(b).dims2()?;
        if q != q2 {
            return Err(Error::dim("matmul", format!("{p}x{q} · {q2}x{r}")));
        }
        let mut out = vec![0.0; p * r];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        self.macs += (p * q * r) as u64;
        let value = Tensor::matrix(p, r, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// Elementwise `a ∘ b` for identical shapes, or with one operand a
    /// single-element tensor broadcast against the other.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.len() == 1 {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::dim("elementwise", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (da[i % da.len()], db[i % db.len()]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("elementwise", value, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `mul·a + add` with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data = va.data().iter().map(|&x| mul * x + add).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("affine", value, Op::Affine { a, mul }, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data: Vec<f64> = match kind {
            UnaryKind::Exp => va.data().iter().map(|x| x.exp()).collect(),
            UnaryKind::Tanh => va.data().iter().map(|x| x.tanh()).collect(),
            UnaryKind::Sigmoid => va.data().iter().map(|&x| sigmoid(x)).collect(),
            UnaryKind::Silu => va.data().iter().map(|&x| x * sigmoid(x)).collect(),
            UnaryKind::Softplus => va.data().iter().map(|&x| softplus(x)).collect(),
            UnaryKind::NegLog => {
                if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::domain("neg_log", format!("argument {bad} is not positive")));
                }
                va.data().iter().map(|x| -x.ln()).collect()
            }
            UnaryKind::SoftmaxLastDim => {
                let c = *va.shape().last().unwrap_or(&1);
                let mut out = va.data().to_vec();
                for row in out.chunks_mut(c.max(1)) {
                    softmax_in_place(row);
                }
                out
            }
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("unary", value, Op::Unary { kind, a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::SoftmaxLastDim, a)
    }

    pub fn neg_log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::NegLog, a)
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(row).len() != d {
            return Err(Error::dim(op, format!("row of {} values for width {d}", self.value(row).len())));
        }
        Ok((n, d))
    }

    /// Adds a length-`d` row vector to every row of `x[n×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check(x)?;
        self.check(row)?;
        let (_, d) = self.row_operand("add_row", x, row)?;
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            chunk.iter_mut().zip(r).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_row", value, Op::AddRow { x, row }, &[x, row])
    }

    /// Multiplies every row of `x[n×d]` elementwise by a length-`d` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check(x)?;
        self.check(row)?;
        let (_, d) = self.row_operand("mul_row", x, row)?;
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            chunk.iter_mut().zip(r).for_each(|(v, g)| *v *= g);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("mul_row", value, Op::MulRow { x, row }, &[x, row])
    }

    /// Scales row `i` of `x[n×d]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (n, d) = self.value(x).dims2()?;
        if self.value(w).len() != n {
            return Err(Error::dim("scale_rows", format!("{} weights for {n} rows", self.value(w).len())));
        }
        let wv = self.value(w).data();
        let mut data = self.value(x).data().to_vec();
        for (chunk, s) in data.chunks_mut(d.max(1)).zip(wv) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale_rows", value, Op::ScaleRows { x, w }, &[x, w])
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, d) = self.value(x).dims2()?;
        if d == 0 {
            return Err(Error::dim("layer_norm", "zero-width rows"));
        }
        let mut out = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let value = Tensor::matrix(n, d, out)?;
        self.activations += n as u64;
        self.push("layer_norm", value, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Rows of `x` in the order given by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (n, _) = self.value(x).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {n}")));
        }
        let value = self.value(x).gather_rows(index);
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Reverses the row order.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        let index: Vec<usize> = (0..n).rev().collect();
        self.gather_rows(x, &index)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        for &p in parts {
            self.check(p)?;
        }
        let d = self.value(first).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                return Err(Error::dim("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, d, data)?;
        self.push(
            "concat_rows",
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Depthwise causal convolution: `y[t,c] = bias[c] + Σₖ w[c,k]·x[t+k−(K−1), c]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let (l, c) = self.value(x).dims2()?;
        let (wc, k) = self.value(w).dims2()?;
        if wc != c || self.value(bias).len() != c {
            return Err(Error::dim("causal_conv", format!("x {l}x{c}, w {wc}x{k}")));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut s = bv[ch];
                for j in 0..k {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        s += wv[ch * k + j] * xv[src * c + ch];
                    }
                }
                out[t * c + ch] = s;
            }
        }
        self.macs += (l * c * k) as u64;
        let value = Tensor::matrix(l, c, out)?;
        self.push("causal_conv", value, Op::CausalConv { x, w, bias }, &[x, w, bias])
    }

    /// Input-dependent diagonal SSM scan with per-step zero-order-hold discretization.
    ///
    /// Shapes: `u, delta: [L×D]`, `a: [D×N]`, `b, c: [L×N]`; output `[L×D]`.
    /// `hₜ = exp(Δₜa)⊙hₜ₋₁ + B̄(Δₜ,a,bₜ)·uₜ`, `yₜ = Σₙ cₜₙ hₜₙ`, `h₋₁ = 0`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        for v in [u, delta, a, b, c] {
            self.check(v)?;
        }
        let (l, d) = self.value(u).dims2()?;
        let (ad, n) = self.value(a).dims2()?;
        let bad = self.value(delta).shape() != [l, d]
            || ad != d
            || self.value(b).shape() != [l, n]
            || self.value(c).shape() != [l, n];
        if bad {
            return Err(Error::dim(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}",
                    self.shape(u),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c)
                ),
            ));
        }
        if let Some(bad) = self.value(delta).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("selective_scan", format!("step size {bad} is not positive")));
        }
        let (uv, dv, av, bv, cv) = (
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let mut states = vec![0.0; l * d * n];
        let mut abar = vec![0.0; l * d * n];
        let mut fac = vec![0.0; l * d * n];
        let mut out = vec![0.0; l * d];
        let mut h = vec![0.0; d * n];
        for t in 0..l {
            for ch in 0..d {
                let dt = dv[t * d + ch];
                let x = uv[t * d + ch];
                let mut y = 0.0;
                for s in 0..n {
                    let j = ch * n + s;
                    let (e, f) = zoh_fast(dt, av[j]);
                    abar[t * d * n + j] = e;
                    fac[t * d * n + j] = f;
                    let hs = &mut h[j];
                    *hs = e * *hs + f * bv[t * n + s] * x;
                    y += cv[t * n + s] * *hs;
                }
                out[t * d + ch] = y;
            }
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
        self.macs += 3 * (l * d * n) as u64;
        self.activations += states.len() as u64;
        let value = Tensor::matrix(l, d, out)?;
        self.push(
            "selective_scan",
            value,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                states,
                abar,
                f: fac,
            },
            &[u, delta, a, b, c],
        )
    }

    /// Squared Euclidean distances between rows: `out[i,j] = ‖xᵢ − yⱼ‖²`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        self.check(x)?;
        self.check(y)?;
        let (nx, d) = self.value(x).dims2()?;
        let (ny, dy) = self.value(y).dims2()?;
        if d != dy {
            return Err(Error::dim("pairwise_sq_dist", format!("width {d} vs {dy}")));
        }
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = vec![0.0; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                out[i * ny + j] = xv
                    .row(i)
                    .iter()
                    .zip(yv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        self.macs += (nx * ny * d) as u64;
        let value = Tensor::matrix(nx, ny, out)?;
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist { x, y }, &[x, y])
    }

    /// Discrete-time survival negative log-likelihood for one patient.
    ///
    /// `k` is the 1-based event/censoring interval. With `S(k) = ∏ᵢ≤ₖ (1−hᵢ)`:
    /// censored → `−log S(k)`; uncensored → `−log S(k−1) − log hₖ`.
    /// Probabilities are clamped to `[PROB_CLAMP, 1−PROB_CLAMP]` before the logs.
    pub fn surv_nll(&mut self, h: Var, k: usize, censored: bool) -> Result<Var> {
        self.check(h)?;
        let hv = self.value(h).data();
        let bins = hv.len();
        if k == 0 || k > bins {
            return Err(Error::domain("surv_loss", format!("interval {k} outside 1..={bins}")));
        }
        if let Some(bad) = hv.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::domain("surv_loss", format!("hazard {bad} outside [0,1]")));
        }
        let surv = |upto: usize| hv[..upto].iter().map(|v| 1.0 - v).product::<f64>();
        let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = if censored {
            -clamp(surv(k)).ln()
        } else {
            -clamp(surv(k - 1)).ln() - clamp(hv[k - 1]).ln()
        };
        self.push("surv_loss", Tensor::scalar(loss), Op::SurvNll { h, k, censored }, &[h])
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage("backward on a tensor that is not recorded on this tape".into()));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradients of every registered parameter, in registration-independent id order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self.params.iter().map(|(&id, &v)| (id, grads.get(v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.idx].requires_grad {
            return None;
        }
        let len = self.nodes[v.idx].value.len();
        Some(grads[v.idx].get_or_insert_with(|| vec![0.0; len]))
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.idx].value.data()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (p, q) = self.nodes[a.idx].value.dims2().expect("matrix");
                let r = self.nodes[b.idx].value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_a_bt_acc(g, self.val(*b), ga, p, q, r);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_b_acc(self.val(*a), g, gb, p, q, r);
                }
            }
            Op::Binary { kind, a, b } => {
                // local derivative factors of a and b; None means 1
                let (fa, fb) = match kind {
                    BinaryKind::Add | BinaryKind::Sub => (None, None),
                    BinaryKind::Mul => (Some(self.val(*b).to_vec()), Some(self.val(*a).to_vec())),
                };
                let sign_b = if *kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                for (v, w, sign) in [(*a, fa.as_deref(), 1.0), (*b, fb.as_deref(), sign_b)] {
                    if let Some(dst) = self.acc(grads, v) {
                        accumulate_broadcast(dst, g, w, sign);
                    }
                }
            }
            Op::Affine { a, mul } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += mul * y);
                }
            }
            Op::Unary { kind, a } => {
                let shape_last = *self.nodes[a.idx].value.shape().last().unwrap_or(&1);
                let input = self.val(*a).to_vec();
                let Some(ga) = self.acc(grads, *a) else { return };
                match kind {
                    UnaryKind::Exp => {
                        for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                            *x += y * o;
                        }
                    }
                    UnaryKind::Tanh => {
                        for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                            *x += y * (1.0 - o * o);
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                            *x += y * o * (1.0 - o);
                        }
                    }
                    UnaryKind::Silu => {
                        for ((x, y), v) in ga.iter_mut().zip(g).zip(&input) {
                            let s = sigmoid(*v);
                            *x += y * (s + v * s * (1.0 - s));
                        }
                    }
                    UnaryKind::Softplus => {
                        for ((x, y), v) in ga.iter_mut().zip(g).zip(&input) {
                            *x += y * sigmoid(*v);
                        }
                    }
                    UnaryKind::NegLog => {
                        for ((x, y), v) in ga.iter_mut().zip(g).zip(&input) {
                            *x -= y / v;
                        }
                    }
                    UnaryKind::SoftmaxLastDim => {
                        let c = shape_last.max(1);
                        for ((gx, gy), o) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                            let dot: f64 = gy.iter().zip(o).map(|(a, b)| a * b).sum();
                            for ((x, y), p) in gx.iter_mut().zip(gy).zip(o) {
                                *x += p * (y - dot);
                            }
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                let d = self.nodes[row.idx].value.len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let d = self.nodes[row.idx].value.len();
                let (xv, rv) = (self.val(*x).to_vec(), self.val(*row).to_vec());
                if let Some(gx) = self.acc(grads, *x) {
                    for (gxc, gc) in gx.chunks_mut(d).zip(g.chunks(d)) {
                        for ((a, b), r) in gxc.iter_mut().zip(gc).zip(&rv) {
                            *a += b * r;
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for (gc, xc) in g.chunks(d).zip(xv.chunks(d)) {
                        for ((a, b), xx) in gr.iter_mut().zip(gc).zip(xc) {
                            *a += b * xx;
                        }
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let d = self.nodes[x.idx].value.cols().max(1);
                let (xv, wv) = (self.val(*x).to_vec(), self.val(*w).to_vec());
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gxc, gc), s) in gx.chunks_mut(d).zip(g.chunks(d)).zip(&wv) {
                        gxc.iter_mut().zip(gc).for_each(|(a, b)| *a += b * s);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for ((a, gc), xc) in gw.iter_mut().zip(g.chunks(d)).zip(xv.chunks(d)) {
                        *a += gc.iter().zip(xc).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = self.nodes[x.idx].value.cols();
                let Some(gx) = self.acc(grads, *x) else { return };
                for (((gxc, gc), xh), r) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)).zip(rstd) {
                    let mg = gc.iter().sum::<f64>() / d as f64;
                    let mgx = gc.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((a, gy), h) in gxc.iter_mut().zip(gc).zip(xh) {
                        *a += r * (gy - mg - h * mgx);
                    }
                }
            }
            Op::Gather { x, index } => {
                let d = self.nodes[x.idx].value.cols();
                let Some(gx) = self.acc(grads, *x) else { return };
                for (k, &src) in index.iter().enumerate() {
                    let dst = &mut gx[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.idx].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.nodes[a.idx].value.dims2().expect("matrix");
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[a.idx].value.len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::CausalConv { x, w, bias } => {
                let (l, c) = self.nodes[x.idx].value.dims2().expect("matrix");
                let k = self.nodes[w.idx].value.cols();
                let (xv, wv) = (self.val(*x).to_vec(), self.val(*w).to_vec());
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..l {
                        for ch in 0..c {
                            for j in 0..k {
                                if let Some(src) = (t + j).checked_sub(k - 1) {
                                    gx[src * c + ch] += g[t * c + ch] * wv[ch * k + j];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for t in 0..l {
                        for ch in 0..c {
                            for j in 0..k {
                                if let Some(src) = (t + j).checked_sub(k - 1) {
                                    gw[ch * k + j] += g[t * c + ch] * xv[src * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for chunk in g.chunks(c) {
                        gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                states,
                abar,
                f,
            } => self.scan_backward(g, [*u, *delta, *a, *b, *c], states, abar, f, grads),
            Op::PairwiseSqDist { x, y } => {
                let (nx, d) = self.nodes[x.idx].value.dims2().expect("matrix");
                let ny = self.nodes[y.idx].value.rows();
                let (xv, yv) = (self.val(*x).to_vec(), self.val(*y).to_vec());
                // diff-weighted sums: gx_i = 2 Σ_j g_ij (x_i − y_j), gy_j = −2 Σ_i g_ij (x_i − y_j)
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..nx {
                        for j in 0..ny {
                            let gij = 2.0 * g[i * ny + j];
                            for t in 0..d {
                                gx[i * d + t] += gij * (xv[i * d + t] - yv[j * d + t]);
                            }
                        }
                    }
                }
                if let Some(gy) = self.acc(grads, *y) {
                    for i in 0..nx {
                        for j in 0..ny {
                            let gij = 2.0 * g[i * ny + j];
                            for t in 0..d {
                                gy[j * d + t] -= gij * (xv[i * d + t] - yv[j * d + t]);
                            }
                        }
                    }
                }
            }
            Op::SurvNll { h, k, censored } => {
                let hv = self.val(*h).to_vec();
                let Some(gh) = self.acc(grads, *h) else { return };
                let inside = |p: f64| p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
                let surv = |upto: usize| hv[..upto].iter().map(|v| 1.0 - v).product::<f64>();
                // d(−log S(m))/dh_i = 1/(1−h_i) for i ≤ m, when S(m) is not clamped
                let mut survival_term = |m: usize| {
                    if m > 0 && inside(surv(m)) {
                        for i in 0..m {
                            gh[i] += g[0] / (1.0 - hv[i]);
                        }
                    }
                };
                if *censored {
                    survival_term(*k);
                } else {
                    survival_term(*k - 1);
                    let hk = hv[*k - 1];
                    if inside(hk) {
                        gh[*k - 1] -= g[0] / hk;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_backward(
        &self,
        g: &[f64],
        [u, delta, a, b, c]: [Var; 5],
        states: &[f64],
        abar_all: &[f64],
        f_all: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (l, d) = self.nodes[u.idx].value.dims2().expect("matrix");
        let n = self.nodes[a.idx].value.cols();
        let (uv, dv, av, bv, cv) = (self.val(u), self.val(delta), self.val(a), self.val(b), self.val(c));
        let mut gu = vec![0.0; l * d];
        let mut gd = vec![0.0; l * d];
        let mut ga = vec![0.0; d * n];
        let mut gb = vec![0.0; l * n];
        let mut gc = vec![0.0; l * n];
        // gradient reaching h_t from later steps
        let mut carry = vec![0.0; d * n];
        for t in (0..l).rev() {
            let ht = &states[t * d * n..(t + 1) * d * n];
            for ch in 0..d {
                let gy = g[t * d + ch];
                let dt = dv[t * d + ch];
                let x = uv[t * d + ch];
                for s in 0..n {
                    let j = ch * n + s;
                    let h = ht[j];
                    let hprev = if t > 0 { states[(t - 1) * d * n + j] } else { 0.0 };
                    let gh = carry[j] + cv[t * n + s] * gy;
                    gc[t * n + s] += gy * h;
                    let an = av[j];
                    let (abar, f) = (abar_all[t * d * n + j], f_all[t * d * n + j]);
                    let (df_ddt, df_da) = zoh_partials(dt, an, abar, f);
                    let bts = bv[t * n + s];
                    let g_abar = gh * hprev;
                    gd[t * d + ch] += g_abar * abar * an + gh * bts * x * df_ddt;
                    ga[j] += g_abar * abar * dt + gh * bts * x * df_da;
                    gb[t * n + s] += gh * f * x;
                    gu[t * d + ch] += gh * f * bts;
                    carry[j] = gh * abar;
                }
            }
        }
        for (v, local) in [(u, gu), (delta, gd), (a, ga), (b, gb), (c, gc)] {
            if let Some(dst) = self.acc(grads, v) {
                dst.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// `dst[i mod |dst|] += sign · g[i] · w[i mod |w|]`, covering both the
/// same-shape and the broadcast-scalar cases.
fn accumulate_broadcast(dst: &mut [f64], g: &[f64], w: Option<&[f64]>, sign: f64) {
    let same = dst.len() == g.len();
    match w {
        Some(w) if same && w.len() == g.len() => {
            for ((d, y), x) in dst.iter_mut().zip(g).zip(w) {
                *d += sign * y * x;
            }
        }
        None if same => dst.iter_mut().zip(g).for_each(|(d, y)| *d += sign * y),
        _ => {
            let n = dst.len();
            for (i, y) in g.iter().enumerate() {
                let x = w.map_or(1.0, |w| w[i % w.len()]);
                dst[i % n] += sign * y * x;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Below this `|Δa|` the input multiplier uses its series limit.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Zero-order hold for one diagonal entry: `(exp(Δa), (Δa)⁻¹(exp(Δa)−1)·Δ)`.
///
/// The second value multiplies `b` to give `B̄`.
pub fn zoh(dt: f64, a: f64) -> (f64, f64) {
    let x = dt * a;
    if x.abs() < ZOH_SERIES_THRESHOLD {
        ((x).exp(), dt * (1.0 + 0.5 * x))
    } else {
        (x.exp(), x.exp_m1() / a)
    }
}

/// [`zoh`] with `exp(Δa)` recovered from `expm1(Δa)`: one transcendental call.
#[inline]
fn zoh_fast(dt: f64, a: f64) -> (f64, f64) {
    let x = dt * a;
    if x.abs() < ZOH_SERIES_THRESHOLD {
        (1.0 + x + 0.5 * x * x, dt * (1.0 + 0.5 * x))
    } else {
        let em1 = x.exp_m1();
        (1.0 + em1, em1 / a)
    }
}

/// Partials of the input factor `f = expm1(Δa)/a` w.r.t. `Δ` and `a`, given
/// `e = exp(Δa)` and `f`.
#[inline]
fn zoh_partials(dt: f64, a: f64, e: f64, f: f64) -> (f64, f64) {
    let x = dt * a;
    if x.abs() < ZOH_SERIES_THRESHOLD {
        return (1.0 + x, dt * dt * (0.5 + x / 3.0));
    }
    let df_da = if x.abs() < 1e-3 {
        dt * dt * (0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0)
    } else {
        (dt * e - f) / a
    };
    (e, df_da)
}
