//! Pathology and genomics experts: stacks of three-branch attention-guided Mamba
//! layers over an instance sequence.
//!
//! Each layer scans the instances in three orders: as given, transposed through
//! a square grid, and sorted by a gated attention score. Reordered branches are
//! restored to the original order before the branches are summed.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{LayerNorm, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::ScanMixer;

pub const DEFAULT_ATTENTION_HIDDEN: usize = 128;
pub const DEFAULT_EXPERT_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Pathology,
    Genomics,
}

/// `n × d` instance features from one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSequence {
    pub features: Tensor,
    pub origin: Origin,
}

impl InstanceSequence {
    pub fn new(features: Tensor, origin: Origin) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n == 0 {
            return Err(Error::dim("instance_sequence", "empty sequence"));
        }
        Ok(Self { features, origin })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A reordering of `n` instances. `order[k]` is the original index placed at
/// position `k`; `inverse` undoes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPermutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl ScanPermutation {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; order.len()];
        for (pos, &src) in order.iter().enumerate() {
            if src >= order.len() || inverse[src] != usize::MAX {
                return Err(Error::dim("scan_permutation", "order is not a permutation"));
            }
            inverse[src] = pos;
        }
        Ok(Self { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.gather_rows(&self.order)
    }

    pub fn restore(&self, x: &Tensor) -> Tensor {
        x.gather_rows(&self.inverse)
    }
}

/// Grid for the transposed scan: `R = ⌈√n⌉` rows, `C = ⌈n/R⌉` columns.
pub fn transpose_grid(n: usize) -> (usize, usize) {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    let r = r.max(1);
    (r, n.div_ceil(r))
}

/// Lays instances row-major on the grid and reads them column-major, skipping padding.
pub fn transpose_order(n: usize) -> ScanPermutation {
    let (rows, cols) = transpose_grid(n);
    let mut order = Vec::with_capacity(n);
    for c in 0..cols {
        for r in 0..rows {
            let idx = r * cols + c;
            if idx < n {
                order.push(idx);
            }
        }
    }
    ScanPermutation::from_order(order).expect("grid walk is a permutation")
}

pub fn transpose_reorder(x: &InstanceSequence) -> (InstanceSequence, ScanPermutation) {
    let perm = transpose_order(x.len());
    let features = perm.apply(&x.features);
    (
        InstanceSequence {
            features,
            origin: x.origin,
        },
        perm,
    )
}

/// Stable descending sort of scores; equal scores keep index order.
pub fn attention_order(scores: &[f64]) -> ScanPermutation {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    ScanPermutation::from_order(order).expect("sort is a permutation")
}

/// Gated attention network: `w·(tanh(V x) ⊙ σ(U x))`, one score per instance.
#[derive(Debug, Clone)]
pub struct AttentionScorer {
    pub v: Linear,
    pub u: Linear,
    pub w: Linear,
}

impl AttentionScorer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, hidden: usize) -> Self {
        Self {
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, hidden, true),
            u: Linear::new(store, rng, &format!("{name}.u"), d_model, hidden, true),
            w: Linear::new(store, rng, &format!("{name}.w"), hidden, 1, true),
        }
    }

    /// Raw scores, `[n × 1]`.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let v_pre = self.v.forward(tape, store, x)?;
        let v = tape.tanh(v_pre)?;
        let u_pre = self.u.forward(tape, store, x)?;
        let u = tape.sigmoid(u_pre)?;
        let gated = tape.mul(v, u)?;
        self.w.forward(tape, store, gated)
    }

    /// Softmax-normalized attention weights over instances, `[1 × n]`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.scores(tape, store, x)?;
        let row = tape.transpose(s)?;
        tape.softmax(row)
    }
}

/// Reorders `x` by descending attention score.
///
/// Returns the reordered sequence, its permutation, and the `[n × 1]` scores.
/// The permutation is a routing decision with no gradient; gradients reach the
/// scorer through the scores.
pub fn attention_reorder(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    scorer: &AttentionScorer,
) -> Result<(Var, ScanPermutation, Var)> {
    let scores = scorer.scores(tape, store, x)?;
    let perm = attention_order(tape.value(scores).data());
    let reordered = tape.gather_rows(x, perm.order())?;
    Ok((reordered, perm, scores))
}

/// One scan branch: `Z ⊙ SSM(SiLU(Conv(Linear(x′))))` with `Z = SiLU(Linear(x′))`, `x′ = Norm(x)`.
#[derive(Debug, Clone)]
pub struct ExpertBranch {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub mixer: ScanMixer,
    pub gate: Linear,
}

impl ExpertBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_state: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
            in_proj: Linear::new(store, rng, &format!("{name}.in_proj"), d_model, d_model, true),
            mixer: ScanMixer::new(store, rng, &format!("{name}.mixer"), d_model, d_state),
            gate: Linear::new(store, rng, &format!("{name}.gate"), d_model, d_model, true),
        }
    }

    /// Runs the branch on an already-ordered sequence. `row_weights` (`[n × 1]`,
    /// in the same order) rescales the normalized instances when present.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, row_weights: Option<Var>) -> Result<Var> {
        let mut normed = self.norm.forward(tape, store, x)?;
        if let Some(w) = row_weights {
            normed = tape.scale_rows(normed, w)?;
        }
        let u = self.in_proj.forward(tape, store, normed)?;
        let y = self.mixer.forward(tape, store, u)?;
        let z_pre = self.gate.forward(tape, store, normed)?;
        let z = tape.silu(z_pre)?;
        tape.mul(z, y)
    }
}

/// Which scan orders an [`ExpertLayer`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanBranches {
    pub original: bool,
    pub transposed: bool,
    pub attention: bool,
}

impl ScanBranches {
    pub const ALL: Self = Self {
        original: true,
        transposed: true,
        attention: true,
    };
}

impl Default for ScanBranches {
    fn default() -> Self {
        Self::ALL
    }
}

/// Three-branch attention-guided Mamba layer with a residual connection.
#[derive(Debug, Clone)]
pub struct ExpertLayer {
    pub scorer: AttentionScorer,
    pub original: ExpertBranch,
    pub transposed: ExpertBranch,
    pub attention: ExpertBranch,
    pub out_proj: Linear,
    pub branches: ScanBranches,
}

/// Intermediate per-branch outputs of one layer, all in original instance order.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub original: Option<Var>,
    pub transposed: Option<Var>,
    pub attention: Option<Var>,
    pub transpose_perm: ScanPermutation,
    pub attention_perm: Option<ScanPermutation>,
}

impl ExpertLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_state: usize,
        attention_hidden: usize,
    ) -> Self {
        Self {
            scorer: AttentionScorer::new(store, rng, &format!("{name}.scorer"), d_model, attention_hidden),
            original: ExpertBranch::new(store, rng, &format!("{name}.orig"), d_model, d_state),
            transposed: ExpertBranch::new(store, rng, &format!("{name}.trans"), d_model, d_state),
            attention: ExpertBranch::new(store, rng, &format!("{name}.attn"), d_model, d_state),
            out_proj: Linear::new(store, rng, &format!("{name}.out_proj"), d_model, d_model, true),
            branches: ScanBranches::ALL,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_traced(tape, store, x).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, LayerTrace)> {
        let n = tape.value(x).dims2()?.0;
        let transpose_perm = transpose_order(n);
        let mut trace = LayerTrace {
            original: None,
            transposed: None,
            attention: None,
            transpose_perm: transpose_perm.clone(),
            attention_perm: None,
        };
        let mut parts = Vec::with_capacity(3);
        if self.branches.original {
            let y = self.original.forward(tape, store, x, None)?;
            trace.original = Some(y);
            parts.push(y);
        }
        if self.branches.transposed {
            let xr = tape.gather_rows(x, transpose_perm.order())?;
            let yr = self.transposed.forward(tape, store, xr, None)?;
            let restored = tape.gather_rows(yr, transpose_perm.inverse())?;
            trace.transposed = Some(restored);
            parts.push(restored);
        }
        if self.branches.attention {
            let (xa, perm, scores) = attention_reorder(tape, store, x, &self.scorer)?;
            // instance weights n·softmax(score), routed into the sorted order
            let row = tape.transpose(scores)?;
            let soft = tape.softmax(row)?;
            let col = tape.transpose(soft)?;
            let rel = tape.scale(col, n as f64)?;
            let sorted_w = tape.gather_rows(rel, perm.order())?;
            let ya = self.attention.forward(tape, store, xa, Some(sorted_w))?;
            let restored = tape.gather_rows(ya, perm.inverse())?;
            trace.attention = Some(restored);
            trace.attention_perm = Some(perm);
            parts.push(restored);
        }
        let mut sum = *parts
            .first()
            .ok_or_else(|| Error::Config("expert layer with every scan branch disabled".into()))?;
        for &p in &parts[1..] {
            sum = tape.add(sum, p)?;
        }
        let projected = self.out_proj.forward(tape, store, sum)?;
        let out = tape.add(projected, x)?;
        Ok((out, trace))
    }
}

/// Stack of independently parameterized [`ExpertLayer`]s.
#[derive(Debug, Clone)]
pub struct Expert {
    pub layers: Vec<ExpertLayer>,
}

impl Expert {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        depth: usize,
        d_model: usize,
        d_state: usize,
        attention_hidden: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("expert depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|i| ExpertLayer::new(store, rng, &format!("{name}.layer{i}"), d_model, d_state, attention_hidden))
            .collect();
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn set_branches(&mut self, branches: ScanBranches) {
        for l in &mut self.layers {
            l.branches = branches;
        }
    }
}
