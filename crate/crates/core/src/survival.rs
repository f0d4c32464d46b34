//! Bag aggregation, the discrete hazard head, and the survival losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Linear, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::experts::AttentionScorer;

pub const DEFAULT_BINS: usize = 4;

/// Observed follow-up for one patient. `censored` means the event was not seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    /// 1-based interval index.
    pub k: usize,
    pub censored: bool,
}

/// Attention pooling: `Σᵢ aᵢ xᵢ` with `a = softmax(scores)`. Returns `[1 × d]`.
pub fn aggregate(tape: &mut Tape, store: &ParamStore, x: Var, scorer: &AttentionScorer) -> Result<Var> {
    let n = tape.value(x).dims2()?.0;
    if n == 0 {
        return Err(Error::dim("aggregate", "empty sequence"));
    }
    let w = scorer.weights(tape, store, x)?;
    tape.matmul(w, x)
}

/// Pooling scorer plus a two-layer SiLU MLP to per-interval hazards.
#[derive(Debug, Clone)]
pub struct HazardHead {
    pub scorer: AttentionScorer,
    pub hidden: Linear,
    pub out: Linear,
    pub n_bins: usize,
}

impl HazardHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        attention_hidden: usize,
        n_bins: usize,
    ) -> Self {
        Self {
            scorer: AttentionScorer::new(store, rng, &format!("{name}.scorer"), d_model, attention_hidden),
            hidden: Linear::new(store, rng, &format!("{name}.mlp0"), d_model, d_model, true),
            out: Linear::new(store, rng, &format!("{name}.mlp1"), d_model, n_bins, true),
            n_bins,
        }
    }

    /// Hazards `[1 × n_bins]` from a single pooled embedding `[1 × d]`.
    pub fn hazards_from_embedding(&self, tape: &mut Tape, store: &ParamStore, emb: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, emb)?;
        let h = tape.silu(h)?;
        let logits = self.out.forward(tape, store, h)?;
        tape.sigmoid(logits)
    }

    /// Concatenates the sequences row-wise, pools, and maps to hazards.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, parts: &[Var]) -> Result<Var> {
        let cat = tape.concat_rows(parts)?;
        let emb = aggregate(tape, store, cat, &self.scorer)?;
        self.hazards_from_embedding(tape, store, emb)
    }
}

pub fn surv_loss(tape: &mut Tape, hazards: Var, label: &SurvivalLabel) -> Result<Var> {
    tape.surv_nll(hazards, label.k, label.censored)
}

/// `L_surv + λ·L_global`.
pub fn total_loss(tape: &mut Tape, surv: Var, global: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::domain("total_loss", format!("lambda {lambda} must be non-negative")));
    }
    match global {
        Some(g) => {
            let weighted = tape.scale(g, lambda)?;
            tape.add(surv, weighted)
        }
        None => Ok(surv),
    }
}

/// `∏ᵢ≤ₖ (1 − hᵢ)`; `k = 0` gives 1.
pub fn f_surv(hazards: &[f64], k: usize) -> f64 {
    hazards[..k].iter().map(|h| 1.0 - h).product()
}

/// `−Σₖ f_surv(H, k)`: higher means shorter expected survival.
pub fn risk_score(hazards: &[f64]) -> f64 {
    -(1..=hazards.len()).map(|k| f_surv(hazards, k)).sum::<f64>()
}

/// Interior interval edges and the per-patient interval index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub edges: Vec<f64>,
    pub k: Vec<usize>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 1-based interval of `t`; a time equal to an edge falls in the lower interval.
pub fn interval_of(edges: &[f64], t: f64) -> usize {
    1 + edges.iter().filter(|&&e| e < t).count()
}

/// Equal-frequency binning at the quantiles of the uncensored times.
pub fn discretize_times(times: &[f64], censored: &[bool], n_bins: usize) -> Result<Binning> {
    if times.len() != censored.len() {
        return Err(Error::dim("discretize_times", format!("{} times vs {} flags", times.len(), censored.len())));
    }
    if n_bins == 0 {
        return Err(Error::Config("at least one interval is required".into()));
    }
    let edges = if n_bins == 1 {
        Vec::new()
    } else {
        let mut events: Vec<f64> = times.iter().zip(censored).filter(|(_, &c)| !c).map(|(&t, _)| t).collect();
        if events.len() < n_bins {
            return Err(Error::Config(format!(
                "{} uncensored times cannot define {n_bins} intervals",
                events.len()
            )));
        }
        events.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..n_bins).map(|i| quantile_sorted(&events, i as f64 / n_bins as f64)).collect();
        if events[0] == events[events.len() - 1] {
            return Err(Error::Config("all uncensored times are identical".into()));
        }
        edges
    };
    let k = times.iter().map(|&t| interval_of(&edges, t)).collect();
    Ok(Binning { edges, k })
}
