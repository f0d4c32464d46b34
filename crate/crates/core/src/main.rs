use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use me_mamba::bench::{BenchConfig, DEFAULT_INSTANCE_COUNTS};
use me_mamba::commands;
use me_mamba::config::{LrSchedule, RunConfig, DEFAULT_SEED, SEED_ENV};
use me_mamba::data::GeneratorParams;
use me_mamba::model::Variant;
use me_mamba::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "me-mamba", version, about = "Multi-expert state-space survival model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Gen(GenArgs),
    /// Cross-validated training.
    Train(TrainArgs),
    /// Per-fold and mean C-index of a trained run.
    Eval(EvalArgs),
    /// Kaplan-Meier curves and log-rank test of median-split risk groups.
    Km(EvalArgs),
    /// Analytic multiply-add and activation-memory counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// JSON file with generator parameters; flags override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    bag_min: Option<usize>,
    #[arg(long)]
    bag_max: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    censor_fraction: Option<f64>,
    #[arg(long)]
    signal_fraction: Option<f64>,
    #[arg(long)]
    signal_scale: Option<f64>,
    #[arg(long)]
    pathology_share: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort manifest or directory.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    expert_depth: Option<usize>,
    #[arg(long)]
    fusion_depth: Option<usize>,
    #[arg(long)]
    d_state: Option<usize>,
    #[arg(long)]
    attention_hidden: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// full, pathology-only, genomics-only, or no-synergistic.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Cohort to use instead of the one recorded in the run.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Report directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Instance counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_INSTANCE_COUNTS)]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 16)]
    d_state: usize,
    #[arg(long, default_value_t = 6)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    fusion_depth: usize,
    /// CSV output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen(a: GenArgs) -> Result<()> {
    let mut p = match &a.params {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<GeneratorParams>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => GeneratorParams::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { p.$f = v; } )* };
    }
    set!(n_patients, dim, bag_min, bag_max, beta, censor_fraction, signal_fraction, signal_scale, pathology_share);
    let manifest = commands::cmd_gen(&a.out, &p, a.seed)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(seed, lr, epochs, lambda, n_bins, expert_depth, fusion_depth, d_state, attention_hidden, folds, variant, lr_schedule);
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    if a.cohort.is_some() {
        cfg.cohort = a.cohort;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let cis = commands::cmd_train(&cfg)?;
    for (f, c) in cis.iter().enumerate() {
        println!("fold {f}: c-index {c:.4}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let s = commands::cmd_eval(&a.run, a.cohort.as_deref(), a.out.as_deref())?;
    println!("c-index {:.4} ± {:.4}", s.mean, s.std);
    Ok(())
}

fn km(a: EvalArgs) -> Result<()> {
    let r = commands::cmd_km(&a.run, a.cohort.as_deref(), a.out.as_deref())?;
    println!(
        "low {} / high {}: chi2 {:.4}, p {:.3e}",
        r.n_low, r.n_high, r.logrank.chi2, r.logrank.p
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        d_model: a.d_model,
        d_state: a.d_state,
        genomic_groups: a.groups,
        fusion_depth: a.fusion_depth,
    };
    let csv = commands::cmd_bench(&a.counts, &cfg, a.out.as_deref())?;
    if a.out.is_none() {
        print!("{csv}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Km(a) => km(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
