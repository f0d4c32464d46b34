//! Per-fold SGD training and cross-validated evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::config::RunConfig;
use crate::data::{split_folds, Cohort};
use crate::error::{Error, Result};
use crate::eval::c_index;
use crate::model::{Checkpoint, MeMamba};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub variant: String,
    pub fold: usize,
    pub epoch: usize,
    pub loss: f64,
    pub surv_loss: f64,
    pub global_loss: f64,
    pub test_c_index: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test: Vec<usize>,
    pub risks: Vec<f64>,
    pub c_index: f64,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
}

impl CvOutcome {
    pub fn c_indices(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.c_index).collect()
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn predict_risks(model: &MeMamba, store: &ParamStore, cohort: &Cohort, idx: &[usize]) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let p = &cohort.patients[i];
            model.risk(store, &p.bag, &p.genomics)
        })
        .collect()
}

pub fn subset_c_index(cohort: &Cohort, idx: &[usize], risks: &[f64]) -> Result<f64> {
    let times: Vec<f64> = idx.iter().map(|&i| cohort.patients[i].label.time).collect();
    let cens: Vec<bool> = idx.iter().map(|&i| cohort.patients[i].label.censored).collect();
    c_index(risks, &times, &cens)
}

fn clip(grads: &mut [(crate::autodiff::ParamId, Tensor)], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Trains one model on `train` and scores `test`.
pub fn train_fold(
    cohort: &Cohort,
    cfg: &RunConfig,
    fold: usize,
    train: &[usize],
    test: &[usize],
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<FoldOutcome> {
    let d_model = cohort
        .patients
        .first()
        .ok_or_else(|| Error::Config("empty cohort".into()))?
        .bag
        .cols();
    let mconf = cfg.model_config(d_model);
    let (model, mut store) = MeMamba::new(mconf, derive_seed(cfg.seed, 2 * fold as u64 + 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 * fold as u64 + 2));
    let mut order = train.to_vec();
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_schedule.rate(cfg.lr, epoch, cfg.epochs);
        let (mut tot, mut surv, mut glob) = (0.0, 0.0, 0.0);
        for &i in &order {
            let p = &cohort.patients[i];
            tape.clear();
            let out = model.forward(&mut tape, &store, &p.bag, &p.genomics)?;
            let loss = model.loss(&mut tape, &out, &p.label)?;
            let total = tape.value(loss).item();
            let g = out.global_loss.map_or(0.0, |g| tape.value(g).item());
            tot += total;
            glob += g;
            surv += total - cfg.lambda * g;
            let grads = tape.backward(loss)?;
            let mut pg = tape.param_grads(&grads);
            if let Some(c) = cfg.grad_clip {
                clip(&mut pg, c);
            }
            store.sgd_step(&pg, lr)?;
        }
        let n = order.len().max(1) as f64;
        let risks = predict_risks(&model, &store, cohort, test)?;
        on_epoch(&EpochLog {
            variant: cfg.variant.name().to_string(),
            fold,
            epoch,
            loss: tot / n,
            surv_loss: surv / n,
            global_loss: glob / n,
            test_c_index: subset_c_index(cohort, test, &risks).ok(),
        })?;
    }
    let risks = predict_risks(&model, &store, cohort, test)?;
    let c = subset_c_index(cohort, test, &risks)?;
    Ok(FoldOutcome {
        fold,
        test: test.to_vec(),
        risks,
        c_index: c,
        checkpoint: Checkpoint {
            config: mconf,
            params: store,
        },
    })
}

/// Fold assignment used by [`cross_validate`].
pub fn folds_for(cohort: &Cohort, cfg: &RunConfig) -> Result<Vec<Vec<usize>>> {
    split_folds(cohort.len(), cfg.folds, cfg.seed)
}

pub fn cross_validate(
    cohort: &Cohort,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<CvOutcome> {
    cfg.validate()?;
    let folds = folds_for(cohort, cfg)?;
    let mut out = Vec::with_capacity(folds.len());
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.push(train_fold(cohort, cfg, f, &train, test, on_epoch)?);
    }
    Ok(CvOutcome { folds: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
