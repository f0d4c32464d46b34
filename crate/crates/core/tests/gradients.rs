//! Reverse-mode gradients against central finite differences.

mod common;

use common::*;
use me_mamba::autodiff::{LayerNorm, Linear, ParamStore, Tensor};
use me_mamba::experts::{AttentionScorer, Expert, ExpertBranch, ExpertLayer};
use me_mamba::fusion::{global_loss, mmd2, Bandwidth, FusionConfig, SynergisticExpert};
use me_mamba::model::{MeMamba, ModelConfig, Variant};
use me_mamba::ssm::{BiMambaLayer, ScanMixer, SelectiveSsm};
use me_mamba::survival::{aggregate, surv_loss, total_loss, HazardHead, SurvivalLabel};

fn inputs(seed: u64, shapes: &[(usize, usize)]) -> Vec<Tensor> {
    let mut r = rng(seed);
    shapes.iter().map(|&(n, d)| uniform(&mut r, n, d, -2.0, 2.0)).collect()
}

#[test]
fn matmul_and_elementwise() {
    check_inputs(&inputs(1, &[(3, 4), (4, 2)]), |t, v| {
        let p = t.matmul(v[0], v[1])?;
        weighted_sum(t, p)
    })
    .assert_elementwise();
    for op in 0..3 {
        check_inputs(&inputs(2, &[(2, 3), (2, 3)]), |t, v| {
            let y = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weighted_sum(t, y)
        })
        .assert_elementwise();
    }
    let mut xs = inputs(3, &[(2, 3)]);
    xs.push(Tensor::scalar(1.3));
    check_inputs(&xs, |t, v| {
        let y = t.mul(v[0], v[1])?;
        let z = t.affine(y, -0.7, 0.3)?;
        weighted_sum(t, z)
    })
    .assert_elementwise();
}

#[test]
fn unary_ops() {
    for op in 0..6 {
        check_inputs(&inputs(10 + op, &[(3, 4)]), |t, v| {
            let y = match op {
                0 => t.exp(v[0])?,
                1 => t.tanh(v[0])?,
                2 => t.sigmoid(v[0])?,
                3 => t.silu(v[0])?,
                4 => t.softplus(v[0])?,
                _ => t.softmax(v[0])?,
            };
            weighted_sum(t, y)
        })
        .assert_elementwise();
    }
    let mut r = rng(20);
    let pos = uniform(&mut r, 2, 3, 0.1, 2.0);
    check_inputs(&[pos], |t, v| {
        let y = t.neg_log(v[0])?;
        weighted_sum(t, y)
    })
    .assert_elementwise();
}

#[test]
fn tanh_at_point_seven() {
    let x = Tensor::scalar(0.7);
    let w = check_inputs(&[x], |t, v| t.tanh(v[0]));
    assert!(w.element < 1e-6, "{w:?}");
}

#[test]
fn row_ops_and_layout() {
    check_inputs(&inputs(30, &[(3, 4), (1, 4)]), |t, v| {
        let a = t.add_row(v[0], v[1])?;
        let m = t.mul_row(a, v[1])?;
        weighted_sum(t, m)
    })
    .assert_elementwise();
    check_inputs(&inputs(31, &[(3, 4), (3, 1)]), |t, v| {
        let y = t.scale_rows(v[0], v[1])?;
        weighted_sum(t, y)
    })
    .assert_elementwise();
    check_inputs(&inputs(32, &[(4, 5)]), |t, v| {
        let y = t.layer_norm(v[0])?;
        weighted_sum(t, y)
    })
    .assert_elementwise();
    check_inputs(&inputs(33, &[(4, 3), (2, 3)]), |t, v| {
        let g = t.gather_rows(v[0], &[2, 0, 2, 3])?;
        let r = t.reverse_rows(g)?;
        let c = t.concat_rows(&[r, v[1]])?;
        let tr = t.transpose(c)?;
        weighted_sum(t, tr)
    })
    .assert_elementwise();
    check_inputs(&inputs(34, &[(3, 3)]), |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    })
    .assert_elementwise();
}

#[test]
fn convolution_scan_and_distances() {
    check_inputs(&inputs(40, &[(6, 3), (3, 4), (1, 3)]), |t, v| {
        let y = t.causal_conv(v[0], v[1], v[2])?;
        weighted_sum(t, y)
    })
    .assert_elementwise();

    let mut r = rng(41);
    let u = uniform(&mut r, 8, 4, -2.0, 2.0);
    let delta = uniform(&mut r, 8, 4, 0.05, 1.5);
    let a = uniform(&mut r, 4, 3, -2.0, -0.1);
    let b = uniform(&mut r, 8, 3, -2.0, 2.0);
    let c = uniform(&mut r, 8, 3, -2.0, 2.0);
    check_inputs(&[u, delta, a, b, c], |t, v| {
        let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4])?;
        weighted_sum(t, y)
    })
    .assert_elementwise();

    check_inputs(&inputs(42, &[(4, 3), (5, 3)]), |t, v| {
        let d = t.pairwise_sq_dist(v[0], v[1])?;
        weighted_sum(t, d)
    })
    .assert_elementwise();
}

fn hazards_input(seed: u64) -> Tensor {
    let mut r = rng(seed);
    uniform(&mut r, 1, 4, 0.05, 0.95)
}

#[test]
fn survival_loss_both_censoring_states() {
    for k in 1..=4 {
        for censored in [false, true] {
            let label = SurvivalLabel {
                time: 1.0,
                k,
                censored,
            };
            check_inputs(&[hazards_input(50 + k as u64)], |t, v| surv_loss(t, v[0], &label)).assert_elementwise();
        }
    }
}

#[test]
fn mmd_and_global_loss() {
    check_inputs(&inputs(60, &[(4, 3), (4, 3)]), |t, v| mmd2(t, v[0], v[1], 1.3)).assert_elementwise();
    let w = check_inputs(&inputs(61, &[(3, 4), (3, 4), (5, 4), (5, 4)]), |t, v| {
        global_loss(t, v[0], v[1], v[2], v[3], Bandwidth::Fixed(2.0))
    });
    w.assert_elementwise();
    check_inputs(&[hazards_input(62), Tensor::scalar(0.8)], |t, v| {
        let label = SurvivalLabel {
            time: 1.0,
            k: 3,
            censored: false,
        };
        let s = surv_loss(t, v[0], &label)?;
        total_loss(t, s, Some(v[1]), 0.7)
    })
    .assert_elementwise();
}

#[test]
fn linear_and_layer_norm() {
    let mut store = ParamStore::new();
    let mut r = rng(70);
    let lin = Linear::new(&mut store, &mut r, "lin", 5, 3, true);
    let ln = LayerNorm::new(&mut store, "ln", 3);
    jitter(&mut store, 71);
    let x = uniform(&mut r, 4, 5, -2.0, 2.0);
    check_layer(&store, &x, |t, s, x| {
        let y = lin.forward(t, s, x)?;
        ln.forward(t, s, y)
    })
    .assert_ok();
}

#[test]
fn selective_ssm_and_mixer() {
    let mut store = ParamStore::new();
    let mut r = rng(80);
    let ssm = SelectiveSsm::new(&mut store, &mut r, "ssm", 4, 3);
    jitter(&mut store, 81);
    let x = uniform(&mut r, 8, 4, -2.0, 2.0);
    check_layer(&store, &x, |t, s, x| ssm.forward(t, s, x)).assert_ok();

    let mut store = ParamStore::new();
    let mixer = ScanMixer::new(&mut store, &mut r, "mix", 4, 3);
    jitter(&mut store, 82);
    check_layer(&store, &x, |t, s, x| mixer.forward(t, s, x)).assert_ok();
}

#[test]
fn bimamba_layer() {
    let mut store = ParamStore::new();
    let mut r = rng(90);
    let layer = BiMambaLayer::new(&mut store, &mut r, "bi", 6, 3);
    jitter(&mut store, 91);
    let x = uniform(&mut r, 6, 6, -2.0, 2.0);
    check_layer(&store, &x, |t, s, x| layer.forward(t, s, x)).assert_ok();
}

#[test]
fn expert_components() {
    let mut store = ParamStore::new();
    let mut r = rng(100);
    let scorer = AttentionScorer::new(&mut store, &mut r, "sc", 6, 5);
    let x = uniform(&mut r, 5, 6, -2.0, 2.0);
    check_layer(&store, &x, |t, s, x| scorer.weights(t, s, x)).assert_ok();
    check_layer(&store, &x, |t, s, x| aggregate(t, s, x, &scorer)).assert_ok();

    let mut store = ParamStore::new();
    let branch = ExpertBranch::new(&mut store, &mut r, "br", 6, 3);
    jitter(&mut store, 101);
    check_layer(&store, &x, |t, s, x| branch.forward(t, s, x, None)).assert_ok();
}

#[test]
fn expert_layer_and_stack() {
    let mut r = rng(110);
    let x = uniform(&mut r, 7, 6, -2.0, 2.0);
    let mut store = ParamStore::new();
    let layer = ExpertLayer::new(&mut store, &mut r, "layer", 6, 3, 5);
    jitter(&mut store, 111);
    check_layer(&store, &x, |t, s, x| layer.forward(t, s, x)).assert_ok();

    let mut store = ParamStore::new();
    let expert = Expert::new(&mut store, &mut r, "expert", 2, 6, 3, 4).unwrap();
    jitter(&mut store, 112);
    check_layer(&store, &x, |t, s, x| expert.forward(t, s, x)).assert_ok();
}

#[test]
fn hazard_head() {
    let mut r = rng(120);
    let mut store = ParamStore::new();
    let head = HazardHead::new(&mut store, &mut r, "head", 6, 5, 4);
    let a = uniform(&mut r, 3, 6, -2.0, 2.0);
    let b = uniform(&mut r, 2, 6, -2.0, 2.0);
    let label = SurvivalLabel {
        time: 1.0,
        k: 2,
        censored: false,
    };
    check_params(&store, |t, s| {
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        let h = head.predict(t, s, &[a, b])?;
        surv_loss(t, h, &label)
    })
    .assert_ok();
}

#[test]
fn synergistic_expert() {
    let mut r = rng(130);
    let cfg = FusionConfig {
        bandwidth: Bandwidth::Fixed(3.0),
        fusion_depth: 2,
        ..FusionConfig::default()
    };
    let mut store = ParamStore::new();
    let syn = SynergisticExpert::new(&mut store, &mut r, "syn", &cfg, 6, 3).unwrap();
    jitter(&mut store, 131);
    let xp = uniform(&mut r, 5, 6, -2.0, 2.0);
    let xg = uniform(&mut r, 3, 6, -2.0, 2.0);
    check_params(&store, |t, s| {
        let (p, g) = (t.constant(xp.clone()), t.constant(xg.clone()));
        let out = syn.forward(t, s, p, g)?;
        weighted_sum(t, out.fused)
    })
    .assert_ok();
    check_inputs(&[xp, xg], |t, v| {
        let out = syn.forward(t, &store, v[0], v[1])?;
        let f = weighted_sum(t, out.fused)?;
        t.add(f, out.global_loss)
    })
    .assert_ok();
}

fn toy_model(variant: Variant) -> (MeMamba, ParamStore) {
    let config = ModelConfig {
        d_model: 6,
        d_state: 3,
        expert_depth: 1,
        attention_hidden: 4,
        n_bins: 4,
        fusion: FusionConfig {
            bandwidth: Bandwidth::Fixed(3.0),
            lambda: 0.5,
            fusion_depth: 1,
        },
        variant,
    };
    MeMamba::new(config, 140).unwrap()
}

#[test]
fn full_model_loss_on_six_instances() {
    let mut r = rng(141);
    let bag = uniform(&mut r, 6, 6, -2.0, 2.0);
    let gen = uniform(&mut r, 6, 6, -2.0, 2.0);
    for variant in Variant::ALL {
        let (model, mut store) = toy_model(variant);
        jitter(&mut store, 142);
        scale_weights(&mut store, 1.5);
        for (k, censored) in [(2, false), (3, true)] {
            let label = SurvivalLabel { time: 1.0, k, censored };
            check_params(&store, |t, s| {
                let out = model.forward(t, s, &bag, &gen)?;
                model.loss(t, &out, &label)
            })
            .assert_ok();
        }
    }
}
