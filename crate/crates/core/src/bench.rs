//! Closed-form multiply-add and activation-memory counts for the fusion path
//! versus a quadratic self-attention reference, plus an instrumented
//! cross-check that runs the real ops on a small input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::data::GENOMIC_GROUPS;
use crate::error::Result;
use crate::fusion::{FusionConfig, SynergisticExpert, DEFAULT_FUSION_DEPTH};
use crate::ssm::{dt_rank, CONV_WIDTH, DEFAULT_D_STATE};

pub const DEFAULT_INSTANCE_COUNTS: [usize; 3] = [1000, 10000, 20000];
pub const BYTES_PER_FLOAT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub genomic_groups: usize,
    pub fusion_depth: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_state: DEFAULT_D_STATE,
            genomic_groups: GENOMIC_GROUPS,
            fusion_depth: DEFAULT_FUSION_DEPTH,
        }
    }
}

/// Multiply-adds and activation floats of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub activation_floats: u64,
}

impl Cost {
    pub fn mem_bytes(&self) -> u64 {
        self.activation_floats * BYTES_PER_FLOAT
    }
}

/// One direction of a BiMamba layer over `s` tokens: conv, SiLU, selective SSM.
fn mixer_cost(s: u64, d: u64, n: u64) -> Cost {
    let r = dt_rank(d as usize) as u64;
    let k = CONV_WIDTH as u64;
    Cost {
        // conv, Δ down/up, B and C projections, scan
        macs: s * d * k + 2 * s * d * r + 2 * s * d * n + 3 * s * d * n,
        // conv, silu, Δ down, Δ up, Δ bias, softplus, B (+bias), C (+bias),
        // exp(a_log), −A, scan output, scan states
        activation_floats: 2 * s * d + s * r + 3 * s * d + 4 * s * n + 2 * d * n + s * d + s * d * n,
    }
}

fn bimamba_cost(s: u64, d: u64, n: u64) -> Cost {
    let m = mixer_cost(s, d, n);
    Cost {
        // in, gate, and out projections
        macs: 3 * s * d * d + 2 * m.macs,
        // norm (3 tensors + row stats), in_proj (2), two reversals, sum, gate (2),
        // SiLU, product, out_proj (2), residual
        activation_floats: 15 * s * d + s + 2 * m.activation_floats,
    }
}

/// Inference cost of the synergistic expert for `l` pathology instances.
pub fn fusion_path_cost(l: usize, cfg: &BenchConfig) -> Cost {
    let (n, m, d, ns) = (l as u64, cfg.genomic_groups as u64, cfg.d_model as u64, cfg.d_state as u64);
    let s = n + m;
    let layer = bimamba_cost(s, d, ns);
    let depth = cfg.fusion_depth as u64;
    Cost {
        // cosine cost + two transport products
        macs: 3 * n * m * d + depth * layer.macs,
        // transported sets, concatenation, interleave
        activation_floats: m * d + n * d + 2 * s * d + depth * layer.activation_floats,
    }
}

/// Single-head self-attention without projections: `softmax(X Xᵀ) X`.
pub fn attention_cost(l: usize, d: usize) -> Cost {
    let (l, d) = (l as u64, d as u64);
    Cost {
        macs: 2 * l * l * d,
        // Xᵀ, scores, softmax, output
        activation_floats: 2 * l * d + 2 * l * l,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng;
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Runs the fusion path on random input and reads the tape counters.
pub fn instrumented_fusion_cost(l: usize, cfg: &BenchConfig, seed: u64) -> Result<Cost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fcfg = FusionConfig {
        fusion_depth: cfg.fusion_depth,
        ..FusionConfig::default()
    };
    let expert = SynergisticExpert::new(&mut store, &mut rng, "bench", &fcfg, cfg.d_model, cfg.d_state)?;
    let mut tape = Tape::new();
    let xp = tape.constant(random_matrix(&mut rng, l, cfg.d_model));
    let xg = tape.constant(random_matrix(&mut rng, cfg.genomic_groups, cfg.d_model));
    expert.encode(&mut tape, &store, xp, xg)?;
    Ok(Cost {
        macs: tape.macs(),
        activation_floats: tape.activation_floats(),
    })
}

pub fn instrumented_attention_cost(l: usize, d: usize, seed: u64) -> Result<Cost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let x = tape.constant(random_matrix(&mut rng, l, d));
    let xt = tape.transpose(x)?;
    let scores = tape.matmul(x, xt)?;
    let a = tape.softmax(scores)?;
    tape.matmul(a, x)?;
    Ok(Cost {
        macs: tape.macs(),
        activation_floats: tape.activation_floats(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRow {
    pub kernel: String,
    pub l: usize,
    pub flops: u64,
    pub mem_bytes: u64,
}

pub const FUSION_KERNEL: &str = "me_mamba_fusion";
pub const ATTENTION_KERNEL: &str = "quadratic_attention";

pub fn flop_report(counts: &[usize], cfg: &BenchConfig) -> Vec<FlopRow> {
    let mut rows = Vec::with_capacity(2 * counts.len());
    for &l in counts {
        for (kernel, c) in [
            (FUSION_KERNEL, fusion_path_cost(l, cfg)),
            (ATTENTION_KERNEL, attention_cost(l, cfg.d_model)),
        ] {
            rows.push(FlopRow {
                kernel: kernel.to_string(),
                l,
                flops: c.macs,
                mem_bytes: c.mem_bytes(),
            });
        }
    }
    rows
}

pub fn report_csv(rows: &[FlopRow]) -> String {
    let mut out = String::from("kernel,L,flops,mem_bytes\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.kernel, r.l, r.flops, r.mem_bytes));
    }
    out
}
