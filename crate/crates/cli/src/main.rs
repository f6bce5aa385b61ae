//! `mflr`: allocation tables, model statistics, single fits and replication
//! experiments for multifidelity linear regression, driven by JSON configs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use mflr::allocation::{allocate_with, AllocationOptions};
use mflr::coefficients::StrategyKind;
use mflr::experiments::{fit_single, resolve_stats, run_experiment, write_report, CxxMode, ExperimentPlan, ModelSource, StatsMode};
use mflr::features::{FeatureSpec, InputDistribution};
use mflr::models::{cdr_pair, exp_pair, validate_costs, BUILTIN_FAMILIES};
use mflr::{Error, ErrorClass, Result};

const SHARED_KEYS: &str = "\
Shared config keys:
  model         {\"kind\": \"exp\"}
                {\"kind\": \"cdr1d\", \"config\": {n_fine, n_coarse, kappa, velocity,
                  pre_exp_scale, activation_scale, t_ref, heat_release, fuel_scale,
                  newton_tol, max_iter, max_halvings, initial_step, damped_iters}}
                {\"kind\": \"dataset\", \"path\": CSV with header z1..zp,y1..yK,
                  \"costs\": [w_1, ..], \"with_replacement\": false}
  features      {\"kind\": \"full-quadratic\", \"p\": 1, \"standardize\": false}
                {\"kind\": \"monomials\", \"p\": 1, \"exponents\": [[0],[1]], \"standardize\": false}
                default: full quadratic over the input dimension, unstandardized
  distribution  [{\"kind\": \"uniform\"|\"log-uniform\", \"lo\": a, \"hi\": b}, ..]
                default: the family's input distribution
  stats         {\"mode\": \"exact\"}              closed form, exp only
                {\"mode\": \"pilot\", \"n_pilot\": n}
                {\"mode\": \"reference\", \"n\": n}   one large pilot shared by all replications
                {\"mode\": \"dataset\"}            all dataset rows
                {\"mode\": \"file\", \"path\": p}     statistics JSON written by `mflr stats`
  seed          u64; overridden by --seed or MFLR_SEED
  allocation    {\"denominator\": \"per-fidelity\"|\"mfmc\", \"strict\": false}

Unknown keys are rejected. Errors go to stderr as JSON {\"error\", \"message\"};
exit codes: 2 config, 3 numerical, 4 I/O.";

const ALLOCATE_KEYS: &str = "\
Config keys:
  model, features, distribution, stats, seed, allocation   see below
  costs     [w_1, .., w_K]; overrides the model's costs (model may then be omitted
            when stats is a file)
  budgets   [p, ..]
  output    CSV path; stdout when absent
Output columns: budget, m_1..m_K, realized_cost.";

const STATS_KEYS: &str = "\
Config keys:
  model, features, distribution, stats, seed   see below
  output    JSON path; stdout when absent";

const FIT_KEYS: &str = "\
Config keys:
  model, features, distribution, stats, seed, allocation   see below
  strategy     \"single-fidelity\" | \"mf-mean\" | \"mf-alpha-star\" | \"mf-a-star\"
  budget       p; the allocation is computed from the statistics
  m            explicit counts [m_1, ..]; one entry for single-fidelity. Exactly one
               of budget and m is required
  cxx          {\"mode\": \"exact\"} | {\"mode\": \"sampled\", \"n\": 100000} | {\"mode\": \"dataset\"}
  eval_points  [[z_1, .., z_p], ..]; default z = 5 for exp, a mid-box point for 5D
  reuse_pilot  false
  output       JSON path; stdout when absent";

const EXPERIMENT_KEYS: &str = "\
Config keys:
  model, features, distribution, stats, seed, allocation   see below
  budgets           [p, ..]
  strategies        subset of [\"single-fidelity\", \"mf-mean\", \"mf-alpha-star\", \"mf-a-star\"]
  replications      R >= 2
  cxx, eval_points, reuse_pilot   as for `fit`
  workers           thread count, 0 for all cores; outputs do not depend on it
  record_estimates  true; write per-replication values to estimates.csv
  output_dir        default \"out\"; overridden by --output-dir
Writes report.json, trace_cov.csv and estimates.csv.";

#[derive(Parser)]
#[command(name = "mflr", version, about = "Multifidelity linear regression experiments", after_long_help = SHARED_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "MFLR_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample allocation table for a list of budgets.
    #[command(after_long_help = format!("{ALLOCATE_KEYS}\n\n{SHARED_KEYS}"))]
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Overrides the output path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Model statistics (sigma, rho, C_1k, C_kk) as JSON.
    #[command(after_long_help = format!("{STATS_KEYS}\n\n{SHARED_KEYS}"))]
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// One regression fit and its predictions.
    #[command(after_long_help = format!("{FIT_KEYS}\n\n{SHARED_KEYS}"))]
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replicated comparison of strategies across budgets.
    #[command(after_long_help = format!("{EXPERIMENT_KEYS}\n\n{SHARED_KEYS}"))]
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// List built-in model families.
    Models,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocateConfig {
    #[serde(default)]
    model: Option<ModelSource>,
    #[serde(default)]
    features: Option<FeatureSpec>,
    #[serde(default)]
    distribution: Option<InputDistribution>,
    stats: StatsMode,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    costs: Option<Vec<f64>>,
    budgets: Vec<f64>,
    #[serde(default)]
    allocation: AllocationOptions,
    #[serde(default)]
    output: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsConfig {
    model: ModelSource,
    #[serde(default)]
    features: Option<FeatureSpec>,
    #[serde(default)]
    distribution: Option<InputDistribution>,
    stats: StatsMode,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    model: ModelSource,
    #[serde(default)]
    features: Option<FeatureSpec>,
    #[serde(default)]
    distribution: Option<InputDistribution>,
    stats: StatsMode,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    allocation: AllocationOptions,
    strategy: StrategyKind,
    #[serde(default)]
    budget: Option<f64>,
    #[serde(default)]
    m: Option<Vec<usize>>,
    #[serde(default)]
    cxx: Option<CxxMode>,
    #[serde(default)]
    eval_points: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    reuse_pilot: bool,
    #[serde(default)]
    output: Option<PathBuf>,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, bytes).map_err(|e| Error::io(p, e))
        }
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn model_costs(model: &ModelSource) -> Result<Vec<f64>> {
    Ok(match model {
        ModelSource::Exp => exp_pair().costs().to_vec(),
        ModelSource::Cdr1d { config } => cdr_pair(config)?.costs().to_vec(),
        ModelSource::Dataset { costs, .. } => costs.clone(),
    })
}

fn cmd_allocate(common: Common, output: Option<PathBuf>) -> Result<()> {
    let cfg: AllocateConfig = read_config(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let costs = match (&cfg.costs, &cfg.model) {
        (Some(c), _) => c.clone(),
        (None, Some(m)) => model_costs(m)?,
        (None, None) => return Err(Error::InvalidPlan("either `costs` or `model` is required".into())),
    };
    validate_costs(&costs)?;
    let stats = match (&cfg.stats, &cfg.model) {
        (StatsMode::File { path }, None) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        (mode, Some(m)) => resolve_stats(m, cfg.features.clone(), cfg.distribution.clone(), mode, seed)?,
        (_, None) => return Err(Error::InvalidPlan("`model` is required unless stats come from a file".into())),
    };
    if cfg.budgets.is_empty() {
        return Err(Error::InvalidPlan("`budgets` is empty".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["budget".to_string()];
    header.extend((1..=costs.len()).map(|k| format!("m_{k}")));
    header.push("realized_cost".into());
    w.write_record(&header)?;
    for &b in &cfg.budgets {
        let a = allocate_with(&stats, &costs, b, cfg.allocation)?;
        let mut row = vec![b.to_string()];
        row.extend(a.m.iter().map(|m| m.to_string()));
        row.push(a.realized_cost.to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    emit(output.or(cfg.output).as_deref(), &bytes)
}

fn cmd_stats(common: Common, output: Option<PathBuf>) -> Result<()> {
    let cfg: StatsConfig = read_config(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let stats = resolve_stats(&cfg.model, cfg.features, cfg.distribution, &cfg.stats, seed)?;
    let mut text = serde_json::to_string_pretty(&stats)?;
    text.push('\n');
    emit(output.or(cfg.output).as_deref(), text.as_bytes())
}

fn cmd_fit(common: Common, output: Option<PathBuf>) -> Result<()> {
    let cfg: FitConfig = read_config(&common.config)?;
    let budget = match (cfg.budget, &cfg.m) {
        (Some(b), None) => b,
        // budget is unused when counts are explicit
        (None, Some(_)) => 1.0,
        _ => return Err(Error::InvalidPlan("exactly one of `budget` and `m` is required".into())),
    };
    let plan = ExperimentPlan {
        model: cfg.model,
        features: cfg.features,
        distribution: cfg.distribution,
        budgets: vec![budget],
        strategies: vec![cfg.strategy],
        stats: cfg.stats,
        cxx: cfg.cxx,
        replications: 2,
        seed: common.seed.unwrap_or(cfg.seed),
        eval_points: cfg.eval_points,
        reuse_pilot: cfg.reuse_pilot,
        allocation: cfg.allocation,
        workers: Some(1),
        record_estimates: false,
        output_dir: None,
    };
    let result = fit_single(&plan, cfg.strategy, cfg.m)?;
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    emit(output.or(cfg.output).as_deref(), text.as_bytes())
}

fn cmd_experiment(common: Common, output_dir: Option<PathBuf>) -> Result<()> {
    let mut plan: ExperimentPlan = read_config(&common.config)?;
    if let Some(s) = common.seed {
        plan.seed = s;
    }
    let dir = output_dir.or(plan.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let report = run_experiment(&plan)?;
    write_report(&report, &dir)?;
    for c in &report.cells {
        let beta = c.beta.as_ref().map_or(f64::NAN, |m| m.trace);
        eprintln!(
            "budget {:>8} {:<16} ok {:>5} failed {:>5} tr cov beta {:.6e}",
            c.budget,
            c.strategy.name(),
            c.successes,
            c.failures,
            beta
        );
    }
    Ok(())
}

fn cmd_models() -> Result<()> {
    let out: String = BUILTIN_FAMILIES.iter().map(|(name, about)| format!("{name}\t{about}\n")).collect();
    emit(None, out.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Allocate { common, output } => cmd_allocate(common, output),
        Command::Stats { common, output } => cmd_stats(common, output),
        Command::Fit { common, output } => cmd_fit(common, output),
        Command::Experiment { common, output_dir } => cmd_experiment(common, output_dir),
        Command::Models => cmd_models(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{doc}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
