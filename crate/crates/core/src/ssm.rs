//! Diagonal state-space kernels: zero-order-hold discretization, the recurrent
//! and convolutional scans of a time-invariant system, the input-dependent
//! (selective) scan, and the bidirectional layer built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::uniform;
use crate::autodiff::{softplus_inv, zoh, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_D_STATE: usize = 16;
pub const CONV_WIDTH: usize = 4;

/// Continuous diagonal system, one `N`-state SSM per channel.
///
/// `a`, `b`, `c` are `[d_model × d_state]` row-major; `delta` has one step per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub d_model: usize,
    pub d_state: usize,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl SsmParams {
    /// Stable default: `aₙ = −(n+1)` on every channel.
    pub fn with_default_a(d_model: usize, d_state: usize, delta: f64, b: f64, c: f64) -> Self {
        let a = (0..d_model)
            .flat_map(|_| (0..d_state).map(|n| -((n + 1) as f64)))
            .collect();
        Self {
            d_model,
            d_state,
            delta: vec![delta; d_model],
            a,
            b: vec![b; d_model * d_state],
            c: vec![c; d_model * d_state],
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, d_model: usize, d_state: usize) -> Self {
        let dn = d_model * d_state;
        Self {
            d_model,
            d_state,
            delta: (0..d_model).map(|_| rng.random_range(0.01..1.0)).collect(),
            a: (0..dn).map(|_| -rng.random_range(0.05..3.0)).collect(),
            b: (0..dn).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..dn).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

/// Discrete multipliers, either shared by every step (`steps == 1`) or one set per step.
///
/// Each buffer is `[steps × d_model × d_state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedParams {
    pub d_model: usize,
    pub d_state: usize,
    pub steps: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl DiscretizedParams {
    pub fn is_time_invariant(&self) -> bool {
        self.steps == 1
    }

    fn offset(&self, t: usize) -> usize {
        if self.steps == 1 {
            0
        } else {
            t * self.d_model * self.d_state
        }
    }
}

/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`, elementwise on the diagonal.
pub fn discretize(p: &SsmParams) -> Result<DiscretizedParams> {
    let dn = p.d_model * p.d_state;
    if p.delta.len() != p.d_model || p.a.len() != dn || p.b.len() != dn || p.c.len() != dn {
        return Err(Error::dim("discretize", "parameter buffers do not match d_model × d_state"));
    }
    if let Some(bad) = p.delta.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::domain("discretize", format!("step size {bad} is not positive")));
    }
    let mut a_bar = vec![0.0; dn];
    let mut b_bar = vec![0.0; dn];
    for ch in 0..p.d_model {
        for s in 0..p.d_state {
            let j = ch * p.d_state + s;
            let (ab, f) = zoh(p.delta[ch], p.a[j]);
            a_bar[j] = ab;
            b_bar[j] = f * p.b[j];
        }
    }
    Ok(DiscretizedParams {
        d_model: p.d_model,
        d_state: p.d_state,
        steps: 1,
        a_bar,
        b_bar,
        c: p.c.clone(),
    })
}

fn check_input(op: &'static str, x: &Tensor, p: &DiscretizedParams) -> Result<(usize, usize)> {
    let (l, d) = x.dims2()?;
    if d != p.d_model {
        return Err(Error::dim(op, format!("input width {d}, system width {}", p.d_model)));
    }
    if p.steps != 1 && p.steps != l {
        return Err(Error::dim(op, format!("{} parameter steps for length {l}", p.steps)));
    }
    Ok((l, d))
}

/// `hₜ = Āhₜ₋₁ + B̄xₜ`, `yₜ = Chₜ` from `h₋₁ = 0`.
pub fn scan_recurrent(x: &Tensor, p: &DiscretizedParams) -> Result<Tensor> {
    let (l, d) = check_input("scan_recurrent", x, p)?;
    let n = p.d_state;
    let mut h = vec![0.0; d * n];
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        let off = p.offset(t);
        for ch in 0..d {
            let xt = x.data()[t * d + ch];
            let mut y = 0.0;
            for s in 0..n {
                let j = ch * n + s;
                h[j] = p.a_bar[off + j] * h[j] + p.b_bar[off + j] * xt;
                y += p.c[off + j] * h[j];
            }
            out[t * d + ch] = y;
        }
    }
    Tensor::matrix(l, d, out)
}

/// Impulse response `K̄ₖ = C Āᵏ B̄` for `k < len`, as a `[len × d_model]` matrix.
pub fn convolution_kernel(p: &DiscretizedParams, len: usize) -> Result<Tensor> {
    if !p.is_time_invariant() {
        return Err(Error::Mode("convolution kernel needs a time-invariant system".into()));
    }
    let (d, n) = (p.d_model, p.d_state);
    let mut kernel = vec![0.0; len * d];
    for ch in 0..d {
        for s in 0..n {
            let j = ch * n + s;
            let mut power = 1.0;
            for k in 0..len {
                kernel[k * d + ch] += p.c[j] * power * p.b_bar[j];
                power *= p.a_bar[j];
            }
        }
    }
    Tensor::matrix(len, d, kernel)
}

/// Causal convolution of each channel with its full-length kernel.
pub fn scan_convolutional(x: &Tensor, p: &DiscretizedParams) -> Result<Tensor> {
    if !p.is_time_invariant() {
        return Err(Error::Mode(
            "convolutional scan is only defined for time-invariant parameters".into(),
        ));
    }
    let (l, d) = check_input("scan_convolutional", x, p)?;
    let kernel = convolution_kernel(p, l)?;
    let (xv, kv) = (x.data(), kernel.data());
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut y = 0.0;
            for k in 0..=t {
                y += kv[k * d + ch] * xv[(t - k) * d + ch];
            }
            out[t * d + ch] = y;
        }
    }
    Tensor::matrix(l, d, out)
}

/// Learned maps from the input to per-step `Δ(xₜ)`, `B(xₜ)`, `C(xₜ)`, plus the
/// diagonal `A = −exp(a_log)`.
///
/// `Δ = softplus(up(down(x)) + bias)` through a rank-`dt_rank` bottleneck.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub d_model: usize,
    pub d_state: usize,
    pub dt_down: Linear,
    pub dt_up: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
}

pub fn dt_rank(d_model: usize) -> usize {
    d_model.div_ceil(16)
}

impl SelectiveSsm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_state: usize) -> Self {
        let rank = dt_rank(d_model);
        let dt_down = Linear::new(store, rng, &format!("{name}.dt_down"), d_model, rank, false);
        let dt_up = Linear::new(store, rng, &format!("{name}.dt_up"), rank, d_model, true);
        // step sizes start log-uniform in [1e-3, 1e-1]
        let bias = dt_up.bias.expect("dt bias");
        for v in store.value_mut(bias).data_mut() {
            let log_dt = rng.random_range((1e-3f64).ln()..(1e-1f64).ln());
            *v = softplus_inv(log_dt.exp());
        }
        let b_proj = Linear::new(store, rng, &format!("{name}.b_proj"), d_model, d_state, true);
        let c_proj = Linear::new(store, rng, &format!("{name}.c_proj"), d_model, d_state, true);
        for p in [&b_proj, &c_proj] {
            store.value_mut(p.bias.expect("bias")).data_mut().fill(0.0);
        }
        let a_log = (0..d_model)
            .flat_map(|_| (0..d_state).map(|n| ((n + 1) as f64).ln()))
            .collect();
        let a_log = store.add(format!("{name}.a_log"), Tensor::new(vec![d_model, d_state], a_log).expect("shape"));
        Self {
            d_model,
            d_state,
            dt_down,
            dt_up,
            b_proj,
            c_proj,
            a_log,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let low = self.dt_down.forward(tape, store, u)?;
        let pre = self.dt_up.forward(tape, store, low)?;
        let delta = tape.softplus(pre)?;
        let b = self.b_proj.forward(tape, store, u)?;
        let c = self.c_proj.forward(tape, store, u)?;
        let a_log = tape.param(store, self.a_log);
        let a_pos = tape.exp(a_log)?;
        let a = tape.scale(a_pos, -1.0)?;
        tape.selective_scan(u, delta, a, b, c)
    }

    /// Continuous diagonal `A` currently held in `store`.
    pub fn a_matrix(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.a_log).data().iter().map(|v| -v.exp()).collect()
    }
}

/// Depthwise causal conv, SiLU, then the selective scan: one scan direction.
#[derive(Debug, Clone)]
pub struct ScanMixer {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsm,
}

impl ScanMixer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_state: usize) -> Self {
        let bound = 1.0 / (CONV_WIDTH as f64).sqrt();
        let conv_weight = store.add(format!("{name}.conv.weight"), uniform(rng, &[d_model, CONV_WIDTH], bound));
        let conv_bias = store.add(format!("{name}.conv.bias"), uniform(rng, &[d_model], bound));
        let ssm = SelectiveSsm::new(store, rng, &format!("{name}.ssm"), d_model, d_state);
        Self {
            conv_weight,
            conv_bias,
            ssm,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let w = tape.param(store, self.conv_weight);
        let b = tape.param(store, self.conv_bias);
        let conv = tape.causal_conv(u, w, b)?;
        let act = tape.silu(conv)?;
        self.ssm.forward(tape, store, act)
    }

    /// Parameter ids in construction order, for copying between mixers.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let s = &self.ssm;
        let mut ids = vec![self.conv_weight, self.conv_bias, s.dt_down.weight, s.dt_up.weight];
        ids.extend(s.dt_up.bias);
        ids.push(s.b_proj.weight);
        ids.extend(s.b_proj.bias);
        ids.push(s.c_proj.weight);
        ids.extend(s.c_proj.bias);
        ids.push(s.a_log);
        ids
    }
}

/// Bidirectional Mamba layer:
/// `out = Linear((fwd(u) + rev(bwd(rev(u)))) ⊙ SiLU(gate(x′))) + x`,
/// with `x′ = Norm(x)` and `u = in_proj(x′)`.
#[derive(Debug, Clone)]
pub struct BiMambaLayer {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub gate: Linear,
    pub forward_mixer: ScanMixer,
    pub backward_mixer: ScanMixer,
    pub out_proj: Linear,
}

impl BiMambaLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_state: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
            in_proj: Linear::new(store, rng, &format!("{name}.in_proj"), d_model, d_model, true),
            gate: Linear::new(store, rng, &format!("{name}.gate"), d_model, d_model, true),
            forward_mixer: ScanMixer::new(store, rng, &format!("{name}.fwd"), d_model, d_state),
            backward_mixer: ScanMixer::new(store, rng, &format!("{name}.bwd"), d_model, d_state),
            out_proj: Linear::new(store, rng, &format!("{name}.out_proj"), d_model, d_model, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let normed = self.norm.forward(tape, store, x)?;
        let u = self.in_proj.forward(tape, store, normed)?;
        let fwd = self.forward_mixer.forward(tape, store, u)?;
        let u_rev = tape.reverse_rows(u)?;
        let bwd_rev = self.backward_mixer.forward(tape, store, u_rev)?;
        let bwd = tape.reverse_rows(bwd_rev)?;
        let mixed = tape.add(fwd, bwd)?;
        let gate_pre = self.gate.forward(tape, store, normed)?;
        let gate = tape.silu(gate_pre)?;
        let gated = tape.mul(mixed, gate)?;
        let projected = self.out_proj.forward(tape, store, gated)?;
        tape.add(projected, x)
    }

    /// Copies the forward mixer's parameters into the backward mixer.
    pub fn tie_directions(&self, store: &mut ParamStore) {
        for (src, dst) in self.forward_mixer.param_ids().into_iter().zip(self.backward_mixer.param_ids()) {
            let v = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
    }
}
