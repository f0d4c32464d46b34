//! Synergistic expert: cross-modal token alignment by a one-to-one transport
//! plan, distribution alignment by squared MMD, and a BiMamba encoder over the
//! interleaved aligned tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::BiMambaLayer;

pub const DEFAULT_FUSION_DEPTH: usize = 2;
pub const DEFAULT_LAMBDA: f64 = 1.0;
const NORM_GUARD: f64 = 1e-12;

/// Cosine distances between the rows of two matrices, in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// `n × m`
    pub p2g: Tensor,
    /// `m × n`
    pub g2p: Tensor,
}

impl CostMatrix {
    pub fn new(xp: &Tensor, xg: &Tensor) -> Result<Self> {
        let p2g = cosine_cost(xp, xg)?;
        let g2p = p2g.transpose()?;
        Ok(Self { p2g, g2p })
    }
}

/// `C(i,j) = 1 − cos(aᵢ, bⱼ)`, clamped to `[0, 2]`.
pub fn cosine_cost(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, db) = b.dims2()?;
    if d != db {
        return Err(Error::dim("cosine_cost", format!("width {d} vs {db}")));
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_GUARD);
    let na: Vec<f64> = (0..n).map(|i| norm(a.row(i))).collect();
    let nb: Vec<f64> = (0..m).map(|j| norm(b.row(j))).collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out[i * m + j] = (1.0 - dot / (na[i] * nb[j])).clamp(0.0, 2.0);
        }
    }
    Tensor::matrix(n, m, out)
}

/// One-to-one transport plan: row `i` sends mass `1/rows` to `assignment[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub rows: usize,
    pub cols: usize,
    pub assignment: Vec<usize>,
}

impl Plan {
    pub fn mass(&self) -> f64 {
        1.0 / self.rows as f64
    }

    pub fn to_dense(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.rows, self.cols]);
        let mass = self.mass();
        for (i, &j) in self.assignment.iter().enumerate() {
            m.data_mut()[i * self.cols + j] = mass;
        }
        m
    }

    /// `Σ M ⊙ C`.
    pub fn objective(&self, cost: &Tensor) -> f64 {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.get2(i, j))
            .sum::<f64>()
            * self.mass()
    }

    /// Number of rows assigned to each column.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.cols];
        for &j in &self.assignment {
            c[j] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportPlan {
    /// pathology → genomics, `n × m`
    pub p2g: Plan,
    /// genomics → pathology, `m × n`
    pub g2p: Plan,
}

/// Per-row argmin of a cost matrix; ties go to the smallest column.
pub fn argmin_plan(cost: &Tensor) -> Result<Plan> {
    let (rows, cols) = cost.dims2()?;
    if cols == 0 {
        return Err(Error::dim("transport_plan", "cost matrix has no columns"));
    }
    let assignment = (0..rows)
        .map(|i| {
            let r = cost.row(i);
            let mut best = 0;
            for j in 1..cols {
                if r[j] < r[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(Plan { rows, cols, assignment })
}

pub fn transport_plan(cost: &CostMatrix) -> Result<TransportPlan> {
    Ok(TransportPlan {
        p2g: argmin_plan(&cost.p2g)?,
        g2p: argmin_plan(&cost.g2p)?,
    })
}

/// `(X_p′, X_g′) = (M_p2gᵀ X_p, M_g2pᵀ X_g)` on plain tensors.
pub fn transport_apply(plan: &TransportPlan, xp: &Tensor, xg: &Tensor) -> Result<(Tensor, Tensor)> {
    check_plan(&plan.p2g, xp, "pathology")?;
    check_plan(&plan.g2p, xg, "genomics")?;
    Ok((
        plan.p2g.to_dense().transpose()?.matmul(xp)?,
        plan.g2p.to_dense().transpose()?.matmul(xg)?,
    ))
}

fn check_plan(plan: &Plan, x: &Tensor, what: &str) -> Result<()> {
    if x.dims2()?.0 != plan.rows {
        return Err(Error::dim(
            "transport_apply",
            format!("{what} has {} rows, plan expects {}", x.rows(), plan.rows),
        ));
    }
    Ok(())
}

/// Tape version of [`transport_apply`]; the plan is a constant routing matrix.
pub fn transport_apply_tape(tape: &mut Tape, plan: &Plan, x: Var) -> Result<Var> {
    check_plan(plan, tape.value(x), "source")?;
    let mt = tape.constant(plan.to_dense().transpose()?);
    tape.matmul(mt, x)
}

/// Gaussian kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled rows, recomputed per call.
    Median,
    Fixed(f64),
}

/// Median of `‖zᵢ − zⱼ‖` over distinct pairs of the rows of `x` and `y` pooled.
/// Falls back to 1 when the median is zero or there is only one row.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).chain((0..y.rows()).map(|i| y.row(i))).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let med = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn kernel_mean(tape: &mut Tape, x: Var, y: Var, sigma: f64) -> Result<Var> {
    let d = tape.pairwise_sq_dist(x, y)?;
    let scaled = tape.scale(d, -1.0 / (2.0 * sigma * sigma))?;
    let k = tape.exp(scaled)?;
    tape.mean(k)
}

/// Biased squared MMD with `k(x,y) = exp(−‖x−y‖²/2σ²)`.
pub fn mmd2(tape: &mut Tape, x: Var, y: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain("mmd2", format!("bandwidth {sigma} must be positive")));
    }
    let (nx, dx) = tape.value(x).dims2()?;
    let (ny, dy) = tape.value(y).dims2()?;
    if nx != ny || dx != dy {
        return Err(Error::dim("mmd2", format!("{nx}×{dx} vs {ny}×{dy}")));
    }
    let kxx = kernel_mean(tape, x, x, sigma)?;
    let kyy = kernel_mean(tape, y, y, sigma)?;
    let kxy = kernel_mean(tape, x, y, sigma)?;
    let same = tape.add(kxx, kyy)?;
    let cross = tape.scale(kxy, 2.0)?;
    tape.sub(same, cross)
}

/// Plain-value [`mmd2`].
pub fn mmd2_value(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let v = mmd2(&mut tape, x, y, sigma)?;
    Ok(tape.value(v).item())
}

fn resolve_sigma(tape: &Tape, bw: Bandwidth, x: Var, y: Var) -> f64 {
    match bw {
        Bandwidth::Median => median_bandwidth(tape.value(x), tape.value(y)),
        Bandwidth::Fixed(s) => s,
    }
}

/// `MMD²(X_p′, X_g) + MMD²(X_g′, X_p)`.
pub fn global_loss(tape: &mut Tape, xp_t: Var, xg: Var, xg_t: Var, xp: Var, bandwidth: Bandwidth) -> Result<Var> {
    let s1 = resolve_sigma(tape, bandwidth, xp_t, xg);
    let a = mmd2(tape, xp_t, xg, s1)?;
    let s2 = resolve_sigma(tape, bandwidth, xg_t, xp);
    let b = mmd2(tape, xg_t, xp, s2)?;
    tape.add(a, b)
}

/// Row order of the interleaved sequence over `concat(first, second)`:
/// pairs `first₁, second₁, …` then the tail of the longer one.
pub fn interleave_order(m: usize, n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(m + n);
    for i in 0..m.min(n) {
        order.push(i);
        order.push(m + i);
    }
    order.extend(n..m);
    order.extend((m + m.min(n))..(m + n));
    order
}

pub fn interleave(xp_t: &Tensor, xg_t: &Tensor) -> Result<Tensor> {
    let (m, d) = xp_t.dims2()?;
    let (n, dg) = xg_t.dims2()?;
    if m > 0 && n > 0 && d != dg {
        return Err(Error::dim("interleave", format!("width {d} vs {dg}")));
    }
    let width = if m > 0 { d } else { dg };
    let mut data = Vec::with_capacity((m + n) * width);
    for idx in interleave_order(m, n) {
        if idx < m {
            data.extend_from_slice(xp_t.row(idx));
        } else {
            data.extend_from_slice(xg_t.row(idx - m));
        }
    }
    Tensor::matrix(m + n, width, data)
}

pub fn interleave_tape(tape: &mut Tape, xp_t: Var, xg_t: Var) -> Result<Var> {
    let m = tape.value(xp_t).dims2()?.0;
    let n = tape.value(xg_t).dims2()?.0;
    let cat = tape.concat_rows(&[xp_t, xg_t])?;
    tape.gather_rows(cat, &interleave_order(m, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub bandwidth: Bandwidth,
    pub lambda: f64,
    pub fusion_depth: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            lambda: DEFAULT_LAMBDA,
            fusion_depth: DEFAULT_FUSION_DEPTH,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("kernel bandwidth must be positive, got {s}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.fusion_depth == 0 {
            return Err(Error::Config("fusion depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of [`SynergisticExpert::forward`].
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Var,
    pub global_loss: Var,
    pub plan: TransportPlan,
}

#[derive(Debug, Clone)]
pub struct SynergisticExpert {
    pub layers: Vec<BiMambaLayer>,
    pub bandwidth: Bandwidth,
}

impl SynergisticExpert {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &FusionConfig, d_model: usize, d_state: usize) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.fusion_depth)
            .map(|i| BiMambaLayer::new(store, rng, &format!("{name}.layer{i}"), d_model, d_state))
            .collect();
        Ok(Self {
            layers,
            bandwidth: cfg.bandwidth,
        })
    }

    fn align(&self, tape: &mut Tape, xp: Var, xg: Var) -> Result<(Var, Var, TransportPlan)> {
        let cost = {
            let (p, g) = (tape.value(xp), tape.value(xg));
            let n = p.dims2()?.0;
            let (m, d) = g.dims2()?;
            let c = CostMatrix::new(p, g)?;
            tape.count_macs((n * m * d) as u64);
            c
        };
        let plan = transport_plan(&cost)?;
        let xp_t = transport_apply_tape(tape, &plan.p2g, xp)?;
        let xg_t = transport_apply_tape(tape, &plan.g2p, xg)?;
        Ok((xp_t, xg_t, plan))
    }

    fn encode_aligned(&self, tape: &mut Tape, store: &ParamStore, xp_t: Var, xg_t: Var) -> Result<Var> {
        let mut h = interleave_tape(tape, xp_t, xg_t)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    /// Transport, global alignment loss, interleave, encode.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xp: Var, xg: Var) -> Result<FusionOutput> {
        let (xp_t, xg_t, plan) = self.align(tape, xp, xg)?;
        let global_loss = global_loss(tape, xp_t, xg, xg_t, xp, self.bandwidth)?;
        let fused = self.encode_aligned(tape, store, xp_t, xg_t)?;
        Ok(FusionOutput {
            fused,
            global_loss,
            plan,
        })
    }

    /// Inference path without the alignment loss.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, xp: Var, xg: Var) -> Result<Var> {
        let (xp_t, xg_t, _) = self.align(tape, xp, xg)?;
        self.encode_aligned(tape, store, xp_t, xg_t)
    }
}
