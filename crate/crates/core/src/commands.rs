//! The `gen`, `train`, `eval`, `km`, and `bench` commands as library calls.
//!
//! A training run directory holds `config.json`, `folds.json`, one
//! `fold<k>.json` checkpoint per fold, and `train_log.jsonl`. Evaluation and
//! survival-curve reports are written next to them.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{flop_report, report_csv, BenchConfig};
use crate::config::RunConfig;
use crate::data::{generate_cohort, load_cohort, write_cohort, Cohort, GeneratorParams};
use crate::error::{Error, Result};
use crate::eval::{km_curve, logrank_test, stratify_median, Group, KmCurve, LogRank};
use crate::model::Checkpoint;
use crate::train::{cross_validate, folds_for, mean_std, predict_risks, subset_c_index, EpochLog};

pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CINDEX_FILE: &str = "cindex.csv";
pub const RISKS_FILE: &str = "risks.csv";
pub const KM_FILE: &str = "km.csv";
pub const LOGRANK_FILE: &str = "logrank.csv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn fold_checkpoint(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}.json"))
}

/// Generates a cohort into `out`; returns the manifest path.
pub fn cmd_gen(out: &Path, params: &GeneratorParams, seed: u64) -> Result<PathBuf> {
    let cohort = generate_cohort(params, seed)?;
    write_cohort(&cohort, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<String>>,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("missing {what} path")))
}

/// Cross-validated training; writes the run directory. Returns per-fold test C-indices.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut cohort = load_cohort(required(&cfg.cohort, "cohort")?)?;
    if cohort.edges.len() + 1 != cfg.n_bins {
        cohort.rebin(cfg.n_bins)?;
    }
    let out = required(&cfg.out, "output")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let folds = folds_for(&cohort, cfg)?;
    let assignment = FoldAssignment {
        folds: folds
            .iter()
            .map(|f| f.iter().map(|&i| cohort.patients[i].id.clone()).collect())
            .collect(),
    };
    write_text(&out.join(FOLDS_FILE), &to_json(&assignment))?;

    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut on_epoch = |e: &EpochLog| -> Result<()> {
        let line = serde_json::to_string(e).expect("serializable");
        writeln!(log, "{line}").map_err(|err| Error::io(&log_path, err))
    };
    let cv = cross_validate(&cohort, cfg, &mut on_epoch)?;
    for f in &cv.folds {
        f.checkpoint.save(&fold_checkpoint(out, f.fold))?;
    }
    Ok(cv.c_indices())
}

/// Held-out risk of every patient, from the checkpoint of the fold it was tested in.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRisks {
    pub fold: usize,
    pub idx: Vec<usize>,
    pub risks: Vec<f64>,
}

fn load_run(run: &Path, cohort_override: Option<&Path>) -> Result<(RunConfig, Cohort, Vec<FoldRisks>)> {
    let cfg: RunConfig = read_json(&run.join(CONFIG_FILE))?;
    cfg.validate()?;
    let cohort_path = match cohort_override {
        Some(p) => p.to_path_buf(),
        None => required(&cfg.cohort, "cohort")?.to_path_buf(),
    };
    let mut cohort = load_cohort(&cohort_path)?;
    if cohort.edges.len() + 1 != cfg.n_bins {
        cohort.rebin(cfg.n_bins)?;
    }
    let assignment: FoldAssignment = read_json(&run.join(FOLDS_FILE))?;
    let mut out = Vec::with_capacity(assignment.folds.len());
    for (fold, ids) in assignment.folds.iter().enumerate() {
        let idx = ids
            .iter()
            .map(|id| {
                cohort
                    .patients
                    .iter()
                    .position(|p| &p.id == id)
                    .ok_or_else(|| Error::Format {
                        path: run.join(FOLDS_FILE),
                        offset: 0,
                        detail: format!("patient {id} is not in the cohort"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let (model, store) = Checkpoint::load(&fold_checkpoint(run, fold))?.restore()?;
        let risks = predict_risks(&model, &store, &cohort, &idx)?;
        out.push(FoldRisks { fold, idx, risks });
    }
    Ok((cfg, cohort, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Writes `cindex.csv` and `risks.csv` into `out` (default: the run directory).
pub fn cmd_eval(run: &Path, cohort: Option<&Path>, out: Option<&Path>) -> Result<EvalSummary> {
    let (_, cohort, folds) = load_run(run, cohort)?;
    let out = out.unwrap_or(run);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("fold,n,c_index\n");
    let mut risks_csv = String::from("fold,id,risk,time,censor\n");
    let mut per_fold = Vec::with_capacity(folds.len());
    for f in &folds {
        let c = subset_c_index(&cohort, &f.idx, &f.risks)?;
        per_fold.push(c);
        writeln!(csv, "{},{},{c:.6}", f.fold, f.idx.len()).expect("string write");
        for (&i, r) in f.idx.iter().zip(&f.risks) {
            let p = &cohort.patients[i];
            writeln!(
                risks_csv,
                "{},{},{r:.9},{},{}",
                f.fold,
                p.id,
                p.label.time,
                u8::from(p.label.censored)
            )
            .expect("string write");
        }
    }
    let (mean, std) = mean_std(&per_fold);
    writeln!(csv, "mean,{},{mean:.6}", cohort.len()).expect("string write");
    writeln!(csv, "std,{},{std:.6}", cohort.len()).expect("string write");
    write_text(&out.join(CINDEX_FILE), &csv)?;
    write_text(&out.join(RISKS_FILE), &risks_csv)?;
    Ok(EvalSummary { per_fold, mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmReport {
    pub low: KmCurve,
    pub high: KmCurve,
    pub logrank: LogRank,
    pub n_low: usize,
    pub n_high: usize,
}

/// Splits each fold's held-out patients at that fold's median risk and pools
/// the groups across folds.
pub fn stratified_groups(folds: &[FoldRisks]) -> Result<Vec<(usize, bool)>> {
    let mut out = Vec::new();
    for f in folds {
        let high = stratify_median(&f.risks)?;
        out.extend(f.idx.iter().copied().zip(high));
    }
    Ok(out)
}

pub fn km_report(cohort: &Cohort, groups: &[(usize, bool)]) -> Result<KmReport> {
    let pick = |want: bool| -> (Vec<f64>, Vec<bool>) {
        groups
            .iter()
            .filter(|&&(_, h)| h == want)
            .map(|&(i, _)| (cohort.patients[i].label.time, cohort.patients[i].label.censored))
            .unzip()
    };
    let (lt, lc) = pick(false);
    let (ht, hc) = pick(true);
    let logrank = logrank_test(
        Group {
            times: &lt,
            censored: &lc,
        },
        Group {
            times: &ht,
            censored: &hc,
        },
    )?;
    Ok(KmReport {
        low: km_curve(&lt, &lc)?,
        high: km_curve(&ht, &hc)?,
        logrank,
        n_low: lt.len(),
        n_high: ht.len(),
    })
}

/// Writes `km.csv` and `logrank.csv` into `out` (default: the run directory).
pub fn cmd_km(run: &Path, cohort: Option<&Path>, out: Option<&Path>) -> Result<KmReport> {
    let (_, cohort, folds) = load_run(run, cohort)?;
    let report = km_report(&cohort, &stratified_groups(&folds)?)?;
    let out = out.unwrap_or(run);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut km = String::from("group,time,at_risk,events,survival\n");
    for (name, c) in [("low", &report.low), ("high", &report.high)] {
        writeln!(km, "{name},0,{},0,1", if name == "low" { report.n_low } else { report.n_high }).expect("string write");
        for i in 0..c.times.len() {
            writeln!(km, "{name},{},{},{},{:.9}", c.times[i], c.at_risk[i], c.events[i], c.survival[i]).expect("string write");
        }
    }
    write_text(&out.join(KM_FILE), &km)?;
    let lr = &report.logrank;
    let text = format!(
        "n_low,n_high,observed_low,expected_low,chi2,p\n{},{},{},{:.9},{:.9},{:.9e}\n",
        report.n_low, report.n_high, lr.observed_a, lr.expected_a, lr.chi2, lr.p
    );
    write_text(&out.join(LOGRANK_FILE), &text)?;
    Ok(report)
}

/// Returns the CSV text and writes it to `out` when given.
pub fn cmd_bench(counts: &[usize], cfg: &BenchConfig, out: Option<&Path>) -> Result<String> {
    let csv = report_csv(&flop_report(counts, cfg));
    if let Some(p) = out {
        write_text(p, &csv)?;
    }
    Ok(csv)
}
