#![allow(dead_code)]

use me_mamba::autodiff::{softplus_inv, ParamStore, Tape, Tensor, Var};
use me_mamba::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + 1e-8)
}

/// Outcome of a gradient comparison.
///
/// `element` is the worst per-entry `|ad − fd| / (|fd| + 1e-8)`. `tensor` is the
/// worst per-tensor `max|ad − fd| / (max|fd| + 1e-8)`, which stays meaningful
/// for entries whose gradient is near zero, where the per-entry ratio measures
/// rounding noise in the finite difference rather than the gradient.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub element: f64,
    pub element_at: String,
    pub tensor: f64,
    pub tensor_at: String,
}

impl GradCheck {
    fn record(&mut self, what: &str, ad: &[f64], fd: &[f64]) {
        let mut max_diff = 0.0f64;
        let mut max_fd = 0.0f64;
        for (i, (&a, &f)) in ad.iter().zip(fd).enumerate() {
            let e = rel_err(a, f);
            if e > self.element || e.is_nan() {
                self.element = e;
                self.element_at = format!("{what}[{i}]: ad {a:e} fd {f:e}");
            }
            max_diff = max_diff.max((a - f).abs());
            max_fd = max_fd.max(f.abs());
        }
        let e = max_diff / (max_fd + 1e-8);
        if e > self.tensor || e.is_nan() {
            self.tensor = e;
            self.tensor_at = what.to_string();
        }
    }

    /// Keeps the worse of each measure.
    pub fn merge(&mut self, other: GradCheck) {
        if other.element > self.element || other.element.is_nan() {
            self.element = other.element;
            self.element_at = other.element_at;
        }
        if other.tensor > self.tensor || other.tensor.is_nan() {
            self.tensor = other.tensor;
            self.tensor_at = other.tensor_at;
        }
    }

    /// Every entry within tolerance.
    pub fn assert_elementwise(&self) {
        assert!(self.element < FD_TOL, "gradient mismatch: {self:?}");
    }

    /// Every tensor within tolerance.
    pub fn assert_ok(&self) {
        assert!(self.tensor < FD_TOL, "gradient mismatch: {self:?}");
    }
}

fn central(mut eval: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (eval(x + FD_STEP) - eval(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Central differences w.r.t. every element of `inputs`, which enter the tape as leaves.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> GradCheck {
    let run = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut check = GradCheck::default();
    for (k, v) in vars.iter().enumerate() {
        let fd: Vec<f64> = (0..inputs[k].len())
            .map(|i| {
                central(
                    |x| {
                        let mut xs = inputs.to_vec();
                        xs[k].data_mut()[i] = x;
                        run(&xs)
                    },
                    inputs[k].data()[i],
                )
            })
            .collect();
        check.record(&format!("input {k}"), grads.get(*v).data(), &fd);
    }
    check
}

/// Central differences w.r.t. every parameter in `store`.
pub fn check_params(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> GradCheck {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ad: Vec<(me_mamba::autodiff::ParamId, Tensor)> = tape.param_grads(&grads);
    let mut check = GradCheck::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let g = ad
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let mut fd = Vec::with_capacity(g.len());
        for i in 0..store.value(id).len() {
            let x0 = store.value(id).data()[i];
            fd.push(central(
                |x| {
                    probe.value_mut(id).data_mut()[i] = x;
                    let mut t = Tape::new();
                    let l = f(&mut t, &probe).unwrap();
                    t.value(l).item()
                },
                x0,
            ));
            probe.value_mut(id).data_mut()[i] = x0;
        }
        check.record(store.name(id), g.data(), &fd);
    }
    check
}

/// `mean(x ⊙ w)` with fixed pseudo-random weights, so that no gradient is
/// trivially symmetric.
pub fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 17) as f64 / 10.0 - 0.8).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(x, w)?;
    tape.mean(p)
}

/// Parameter and input gradients of a layer under a weighted-sum loss.
pub fn check_layer(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Tape, &ParamStore, Var) -> Result<Var>) -> GradCheck {
    let mut c = check_params(store, |t, s| {
        let xv = t.constant(x.clone());
        let y = f(t, s, xv)?;
        weighted_sum(t, y)
    });
    c.merge(check_inputs(std::slice::from_ref(x), |t, v| {
        let y = f(t, store, v[0])?;
        weighted_sum(t, y)
    }));
    c
}

/// Moves parameters off their special initial values so every gradient is
/// generic: LayerNorm affine away from (1, 0), and step sizes Δ from ~1e-3 up
/// to [0.2, 1] (at the initial Δ the state-matrix gradients sit below the
/// finite-difference noise floor).
pub fn jitter(store: &mut ParamStore, seed: u64) {
    use rand::Rng;
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        for v in store.value_mut(id).data_mut() {
            if name.ends_with("gamma") || name.ends_with("beta") {
                *v += r.random_range(-0.3..0.3);
            } else if name.ends_with("dt_up.bias") {
                *v = softplus_inv(r.random_range(0.2..1.0));
            }
        }
    }
}

/// Multiplies every weight matrix by `factor`. At the default init the toy
/// models are low-gain and some tensors move the loss by less than the
/// finite-difference rounding floor; a larger gain makes the check resolve them.
pub fn scale_weights(store: &mut ParamStore, factor: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("weight") {
            for v in store.value_mut(id).data_mut() {
                *v *= factor;
            }
        }
    }
}
