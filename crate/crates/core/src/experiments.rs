//! Replication harness: repeated fits of every strategy on shared data
//! realizations, with empirical means, covariances and trace summaries.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_with, single_fidelity_allocation, AllocationOptions};
use crate::coefficients::{strategy_for, StrategyKind};
use crate::error::{Error, Result};
use crate::estimators::{fit, predict, NestedSampleSet};
use crate::features::{exact_cxx, sample_cxx, FeatureMap, FeatureSpec, InputDistribution};
use crate::linalg::{spd_solve, Matrix, SymMatrix};
use crate::models::{cdr_distribution, cdr_pair, exp_distribution, exp_pair, exp_pair_models, CdrConfig, CostLedger, ModelSet};
use crate::statistics::{exact_cxy_exponential, exact_stats_exp, stats_from_dataset, ModelStats, Provenance};

/// Stream ids reserved for one-off draws, far from replication indices.
const REFERENCE_STREAM: u64 = u64::MAX;
const CXX_STREAM: u64 = u64::MAX - 1;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    /// Built-in analytic pair on `U(0, 5)`.
    Exp,
    /// Built-in 1D convection-diffusion-reaction pair.
    Cdr1d {
        #[serde(default)]
        config: CdrConfig,
    },
    /// Tabulated outputs, CSV with header `z1..zp,y1..yK`.
    Dataset {
        path: PathBuf,
        /// Per-evaluation cost of each fidelity.
        costs: Vec<f64>,
        /// Draw training rows with replacement instead of subsampling.
        #[serde(default)]
        with_replacement: bool,
    },
}

impl ModelSource {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSource::Exp => "exp",
            ModelSource::Cdr1d { .. } => "cdr1d",
            ModelSource::Dataset { .. } => "dataset",
        }
    }
}

/// How the model statistics feeding coefficients and allocation are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StatsMode {
    /// Closed-form statistics (exponential pair only).
    Exact,
    /// Fresh pilot sample of size `n_pilot` in every replication.
    Pilot { n_pilot: usize },
    /// One high-sample pilot estimate shared by all replications.
    Reference { n: usize },
    /// All rows of the dataset.
    Dataset,
    /// Statistics JSON written by `stats`.
    File { path: PathBuf },
}

/// How `C_XX` is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CxxMode {
    /// Closed-form moments of the input distribution.
    Exact,
    /// Moment matrix of `n` draws from the input distribution.
    Sampled {
        #[serde(default = "default_cxx_samples")]
        n: usize,
    },
    /// Moment matrix over all dataset inputs.
    Dataset,
}

fn default_cxx_samples() -> usize {
    100_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub model: ModelSource,
    /// Defaults to a full quadratic map over the input dimension.
    #[serde(default)]
    pub features: Option<FeatureSpec>,
    /// Defaults to the family's distribution; required for exact `C_XX` with datasets.
    #[serde(default)]
    pub distribution: Option<InputDistribution>,
    pub budgets: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
    pub stats: StatsMode,
    /// Defaults to exact, or to the dataset inputs when no distribution is known.
    #[serde(default)]
    pub cxx: Option<CxxMode>,
    pub replications: usize,
    pub seed: u64,
    /// Prediction points; defaults depend on the family.
    #[serde(default)]
    pub eval_points: Option<Vec<Vec<f64>>>,
    /// Pilot samples become the first training samples.
    #[serde(default)]
    pub reuse_pilot: bool,
    #[serde(default)]
    pub allocation: AllocationOptions,
    /// Worker threads; 0 or absent uses all cores. Results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Keep per-replication estimates for `estimates.csv`.
    #[serde(default = "default_true")]
    pub record_estimates: bool,
    /// Where the CLI writes report files.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.replications < 2 {
            return bad(format!("replications must be >= 2, got {}", self.replications));
        }
        if self.budgets.is_empty() || self.budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad(format!("budgets must be positive, got {:?}", self.budgets));
        }
        if self.strategies.is_empty() {
            return bad("no strategies given".into());
        }
        if let StatsMode::Pilot { n_pilot } = self.stats {
            if n_pilot < 2 {
                return bad(format!("n_pilot must be >= 2, got {n_pilot}"));
            }
        } else if self.reuse_pilot {
            return bad("reuse_pilot needs stats mode pilot".into());
        }
        if let StatsMode::Reference { n } = self.stats {
            if n < 2 {
                return bad(format!("reference sample size must be >= 2, got {n}"));
            }
        }
        let is_dataset = matches!(self.model, ModelSource::Dataset { .. });
        if matches!(self.stats, StatsMode::Exact) && !matches!(self.model, ModelSource::Exp) {
            return bad("exact statistics exist only for the exp family".into());
        }
        if matches!(self.stats, StatsMode::Dataset) && !is_dataset {
            return bad("stats mode dataset needs a dataset model source".into());
        }
        if matches!(self.cxx, Some(CxxMode::Dataset)) && !is_dataset {
            return bad("cxx mode dataset needs a dataset model source".into());
        }
        Ok(())
    }
}

/// Tabulated nested data: every fidelity evaluated on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

/// Reads a CSV with header `z1,...,zp,y1,...,yK`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_reader(file)
}

impl Dataset {
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        let p = names.iter().take_while(|h| h.starts_with('z')).count();
        let k = names.len() - p;
        if p == 0 {
            return Err(Error::FormatError("header has no z1.. input columns".into()));
        }
        if k == 0 {
            return Err(Error::MissingFidelity("header has no y1.. output columns".into()));
        }
        for (i, h) in names[..p].iter().enumerate() {
            if *h != format!("z{}", i + 1) {
                return Err(Error::FormatError(format!("column {} is '{h}', expected 'z{}'", i + 1, i + 1)));
            }
        }
        for (i, h) in names[p..].iter().enumerate() {
            if *h != format!("y{}", i + 1) {
                return Err(Error::MissingFidelity(format!(
                    "column {} is '{h}', expected 'y{}'",
                    p + i + 1,
                    i + 1
                )));
            }
        }
        let mut inputs = Vec::new();
        let mut outputs = vec![Vec::new(); k];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != p + k {
                return Err(Error::FormatError(format!("row {} has {} fields, expected {}", row + 1, rec.len(), p + k)));
            }
            let vals = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::FormatError(format!("row {}: '{s}' is not a finite number", row + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            inputs.push(vals[..p].to_vec());
            for (o, v) in outputs.iter_mut().zip(&vals[p..]) {
                o.push(*v);
            }
        }
        Ok(Dataset { inputs, outputs })
    }

    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        let n = inputs.len();
        if outputs.is_empty() {
            return Err(Error::MissingFidelity("no outputs".into()));
        }
        if outputs.iter().any(|o| o.len() != n) {
            return Err(Error::CountMismatch("every fidelity needs one output per row".into()));
        }
        if let Some(z) = inputs.first() {
            if inputs.iter().any(|x| x.len() != z.len()) {
                return Err(Error::FormatError("rows differ in input dimension".into()));
            }
        }
        Ok(Dataset { inputs, outputs })
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |z| z.len())
    }

    /// Number of fidelities.
    pub fn k(&self) -> usize {
        self.outputs.len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self, k: usize) -> &[f64] {
        &self.outputs[k]
    }

    /// All rows as one nested set with equal counts.
    pub fn as_nested(&self, map: &FeatureMap) -> Result<NestedSampleSet> {
        NestedSampleSet::from_inputs(map, vec![self.rows(); self.k()], self.inputs.clone(), self.outputs.clone())
    }

    /// Nested subset of the given rows; fidelity `k` uses the first `counts[k]`.
    pub fn subset(&self, map: &FeatureMap, rows: &[usize], counts: &[usize]) -> Result<NestedSampleSet> {
        if counts.len() > self.k() {
            return Err(Error::MissingFidelity(format!("{} fidelities requested, dataset has {}", counts.len(), self.k())));
        }
        let m_k = counts.last().copied().unwrap_or(0);
        if rows.len() < m_k {
            return Err(Error::InsufficientRows {
                rows: rows.len(),
                requested: m_k,
            });
        }
        let inputs = rows[..m_k].iter().map(|&i| self.inputs[i].clone()).collect();
        let outputs = counts
            .iter()
            .enumerate()
            .map(|(k, &m)| rows[..m].iter().map(|&i| self.outputs[k][i]).collect())
            .collect();
        NestedSampleSet::from_inputs(map, counts.to_vec(), inputs, outputs)
    }

    /// Seeded nested sample of sizes `counts`: the first `m_K` rows of a
    /// shuffle, or `m_K` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        map: &FeatureMap,
        counts: &[usize],
        rng: &mut R,
        with_replacement: bool,
    ) -> Result<NestedSampleSet> {
        let m_k = counts.last().copied().unwrap_or(0);
        let rows = self.draw_rows(m_k, &[], rng, with_replacement)?;
        self.subset(map, &rows, counts)
    }

    fn draw_rows<R: Rng + ?Sized>(&self, n: usize, exclude: &[usize], rng: &mut R, with_replacement: bool) -> Result<Vec<usize>> {
        if self.rows() == 0 && n > 0 {
            return Err(Error::InsufficientRows { rows: 0, requested: n });
        }
        if with_replacement {
            return Ok((0..n).map(|_| rng.gen_range(0..self.rows())).collect());
        }
        let mut taken = vec![false; self.rows()];
        exclude.iter().for_each(|&i| taken[i] = true);
        let mut pool: Vec<usize> = (0..self.rows()).filter(|&i| !taken[i]).collect();
        if pool.len() < n {
            return Err(Error::InsufficientRows {
                rows: pool.len(),
                requested: n,
            });
        }
        let (chosen, _) = pool.partial_shuffle(rng, n);
        Ok(chosen.to_vec())
    }
}

/// Everything a replication needs, resolved once from the plan.
struct Context {
    family: String,
    models: Option<ModelSet>,
    dataset: Option<Dataset>,
    with_replacement: bool,
    dist: Option<InputDistribution>,
    map: FeatureMap,
    costs: Vec<f64>,
    cxx: SymMatrix,
    shared_stats: Option<ModelStats>,
    eval_points: Vec<Vec<f64>>,
    eval_features: Vec<Vec<f64>>,
}

fn base_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_eval_points(family: &str, p: usize) -> Vec<Vec<f64>> {
    match (family, p) {
        ("exp", 1) => vec![vec![5.0]],
        (_, 5) => vec![vec![5.5e11, 6000.0, 300.0, 925.0, 1.0]],
        _ => Vec::new(),
    }
}

impl Context {
    fn build(plan: &ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let (models, dataset, with_replacement, family_dist) = match &plan.model {
            ModelSource::Exp => (Some(exp_pair()), None, false, Some(exp_distribution())),
            ModelSource::Cdr1d { config } => (Some(cdr_pair(config)?), None, false, Some(cdr_distribution())),
            ModelSource::Dataset {
                path,
                costs,
                with_replacement,
            } => {
                let data = load_dataset(path)?;
                crate::models::validate_costs(costs)?;
                if costs.len() != data.k() {
                    return Err(Error::MissingFidelity(format!(
                        "{} costs for {} dataset fidelities",
                        costs.len(),
                        data.k()
                    )));
                }
                (None, Some(data), *with_replacement, None)
            }
        };
        let dist = plan.distribution.clone().or(family_dist);
        let p = match (&models, &dataset) {
            (Some(m), _) => m.input_dim(),
            (_, Some(d)) => d.input_dim(),
            _ => unreachable!("a source is always present"),
        };
        if let Some(d) = &dist {
            if d.dim() != p {
                return Err(Error::DimensionMismatch { expected: p, got: d.dim() });
            }
        }
        let spec = plan.features.clone().unwrap_or(FeatureSpec::FullQuadratic { p, standardize: false });
        let map = match (&dist, spec.standardize()) {
            (Some(d), _) => spec.build(d)?,
            (None, false) => spec.build(&InputDistribution::new(vec![crate::features::Marginal::uniform(0.0, 1.0)?; p])?)?,
            (None, true) => {
                return Err(Error::InvalidPlan("standardized features need a distribution".into()));
            }
        };
        let costs = match (&models, &plan.model) {
            (Some(m), _) => m.costs().to_vec(),
            (None, ModelSource::Dataset { costs, .. }) => costs.clone(),
            _ => unreachable!(),
        };

        let cxx_mode = plan.cxx.clone().unwrap_or(if dist.is_some() { CxxMode::Exact } else { CxxMode::Dataset });
        let cxx = match (&cxx_mode, &dist) {
            (CxxMode::Exact, Some(d)) => exact_cxx(&map, d)?,
            (CxxMode::Exact, None) => {
                return Err(Error::InvalidPlan("exact C_XX needs a distribution".into()));
            }
            (CxxMode::Sampled { n }, Some(d)) => {
                let mut rng = base_rng(plan.seed, CXX_STREAM);
                sample_cxx(&map, &d.sample_n(*n, &mut rng))?
            }
            (CxxMode::Sampled { .. }, None) => {
                return Err(Error::InvalidPlan("sampled C_XX needs a distribution".into()));
            }
            (CxxMode::Dataset, _) => sample_cxx(&map, dataset.as_ref().expect("validated").inputs())?,
        };

        let shared_stats = match &plan.stats {
            StatsMode::Exact => Some(exact_stats_exp()),
            StatsMode::Pilot { .. } => None,
            StatsMode::Reference { n } => {
                let mut rng = base_rng(plan.seed, REFERENCE_STREAM);
                let ledger = CostLedger::new(costs.len());
                let data = draw_pilot(models.as_ref(), dataset.as_ref(), dist.as_ref(), &map, *n, &mut rng, &ledger, with_replacement)?;
                let mut s = stats_from_dataset(&data.set, &map)?;
                s = ModelStats::new(
                    s.sigma().to_vec(),
                    s.rho().to_vec(),
                    s.mean().map(|m| m.to_vec()),
                    Some(((0..s.k()).map(|k| s.c1k(k).cloned()).collect::<Result<_>>()?, (0..s.k()).map(|k| s.ckk(k).cloned()).collect::<Result<_>>()?)),
                    Provenance::Pilot { n_pilot: *n },
                )?;
                Some(s)
            }
            StatsMode::Dataset => Some(stats_from_dataset(&dataset.as_ref().expect("validated").as_nested(&map)?, &map)?),
            StatsMode::File { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Some(serde_json::from_str::<ModelStats>(&text)?)
            }
        };
        if let Some(s) = &shared_stats {
            if s.k() != costs.len() {
                return Err(Error::MissingFidelity(format!("statistics cover {} fidelities, model has {}", s.k(), costs.len())));
            }
        }

        let family = plan.model.name().to_string();
        let eval_points = plan.eval_points.clone().unwrap_or_else(|| default_eval_points(&family, p));
        if let Some(d) = &dist {
            if let Some(z) = eval_points.iter().find(|z| z.len() != p || !d.contains(z)) {
                return Err(Error::InvalidPlan(format!("evaluation point {z:?} is outside the input distribution")));
            }
        }
        let eval_features = eval_points.iter().map(|z| map.eval(z)).collect::<Result<Vec<_>>>()?;
        Ok(Context {
            family,
            models,
            dataset,
            with_replacement,
            dist,
            map,
            costs,
            cxx,
            shared_stats,
            eval_points,
            eval_features,
        })
    }
}

/// Rows drawn for a pilot, kept so training can reuse them.
struct PilotDraw {
    set: NestedSampleSet,
    /// Dataset rows used, empty for generative families.
    rows: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn draw_pilot<R: Rng + ?Sized>(
    models: Option<&ModelSet>,
    dataset: Option<&Dataset>,
    dist: Option<&InputDistribution>,
    map: &FeatureMap,
    n: usize,
    rng: &mut R,
    ledger: &CostLedger,
    with_replacement: bool,
) -> Result<PilotDraw> {
    match (models, dataset) {
        (Some(set), _) => {
            let dist = dist.expect("generative families have a distribution");
            let set = NestedSampleSet::generate(set, map, dist, vec![n; set.len()], rng, ledger)?;
            Ok(PilotDraw { set, rows: Vec::new() })
        }
        (None, Some(data)) => {
            let rows = data.draw_rows(n, &[], rng, with_replacement)?;
            let set = data.subset(map, &rows, &vec![n; data.k()])?;
            Ok(PilotDraw { set, rows })
        }
        _ => unreachable!(),
    }
}

impl Context {
    fn k(&self) -> usize {
        self.costs.len()
    }

    /// Training data with `counts`, optionally starting with the pilot rows.
    fn draw_training<R: Rng + ?Sized>(
        &self,
        counts: &[usize],
        pilot: Option<&PilotDraw>,
        reuse: bool,
        rng: &mut R,
        ledger: &CostLedger,
    ) -> Result<NestedSampleSet> {
        let m_k = counts.last().copied().unwrap_or(0);
        let prefix = if reuse { pilot } else { None };
        let n_pre = prefix.map_or(0, |p| p.set.counts()[0].min(m_k));
        match (&self.models, &self.dataset) {
            (Some(set), _) => {
                let dist = self.dist.as_ref().expect("generative families have a distribution");
                let mut inputs: Vec<Vec<f64>> = prefix.map_or(Vec::new(), |p| p.set.inputs()[..n_pre].to_vec());
                inputs.extend(dist.sample_n(m_k - n_pre, rng));
                let outputs = counts
                    .iter()
                    .enumerate()
                    .map(|(k, &m)| {
                        let reused = n_pre.min(m);
                        let mut y: Vec<f64> = prefix.map_or(Vec::new(), |p| p.set.outputs(k)[..reused].to_vec());
                        y.extend(set.evaluate_batch(k, &inputs[reused..m], ledger)?);
                        Ok(y)
                    })
                    .collect::<Result<Vec<_>>>()?;
                NestedSampleSet::from_inputs(&self.map, counts.to_vec(), inputs, outputs)
            }
            (None, Some(data)) => {
                let mut rows: Vec<usize> = prefix.map_or(Vec::new(), |p| p.rows[..n_pre].to_vec());
                let exclude: &[usize] = pilot.map_or(&[], |p| &p.rows);
                rows.extend(data.draw_rows(m_k - n_pre, exclude, rng, self.with_replacement)?);
                data.subset(&self.map, &rows, counts)
            }
            _ => unreachable!(),
        }
    }
}

/// Estimates of one strategy in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub c_xy: Vec<f64>,
    pub beta: Vec<f64>,
    pub predictions: Vec<f64>,
    pub m: Vec<usize>,
    pub cost: f64,
}

type CellOutcome = std::result::Result<ReplicateEstimate, String>;

struct ReplicationOutcome {
    /// `[budget][strategy]`.
    cells: Vec<Vec<CellOutcome>>,
    /// Multifidelity allocation per budget, if one was computed.
    allocations: Vec<Option<Vec<usize>>>,
    pilot_cost: f64,
}

fn run_replication(ctx: &Context, plan: &ExperimentPlan, r: usize) -> Result<ReplicationOutcome> {
    let mut rng = base_rng(plan.seed, r as u64);
    let pilot_ledger = CostLedger::new(ctx.k());
    let (stats, pilot) = match (&ctx.shared_stats, &plan.stats) {
        (Some(s), _) => (s.clone(), None),
        (None, StatsMode::Pilot { n_pilot }) => {
            let p = draw_pilot(
                ctx.models.as_ref(),
                ctx.dataset.as_ref(),
                ctx.dist.as_ref(),
                &ctx.map,
                *n_pilot,
                &mut rng,
                &pilot_ledger,
                ctx.with_replacement,
            )?;
            let s = stats_from_dataset(&p.set, &ctx.map)?;
            (s, Some(p))
        }
        _ => unreachable!("only pilot mode lacks shared statistics"),
    };
    let pilot_cost = match &pilot {
        Some(p) if ctx.models.is_none() => p.set.counts().iter().zip(&ctx.costs).map(|(&m, &w)| m as f64 * w).sum(),
        _ => pilot_ledger.total(&ctx.costs),
    };

    let coeffs: Vec<std::result::Result<_, String>> = plan
        .strategies
        .iter()
        .map(|&k| strategy_for(k, &stats).map_err(|e| e.to_string()))
        .collect();
    let wants_sf = plan.strategies.contains(&StrategyKind::SingleFidelity);
    let wants_mf = plan.strategies.iter().any(|k| k.is_multifidelity());

    let mut cells = Vec::with_capacity(plan.budgets.len());
    let mut allocations = Vec::with_capacity(plan.budgets.len());
    let ledger = CostLedger::new(ctx.k());
    for &budget in &plan.budgets {
        let mf_alloc = if wants_mf {
            Some(allocate_with(&stats, &ctx.costs, budget, plan.allocation).map_err(|e| e.to_string()))
        } else {
            None
        };
        let sf_alloc = if wants_sf {
            Some(single_fidelity_allocation(&ctx.costs, budget).map_err(|e| e.to_string()))
        } else {
            None
        };
        // union of all requested counts, so every strategy sees the same inputs
        let mut union = vec![0usize; if matches!(mf_alloc, Some(Ok(_))) { ctx.k() } else { 1 }];
        if let Some(Ok(a)) = &mf_alloc {
            union.copy_from_slice(&a.m);
        }
        if let Some(Ok(a)) = &sf_alloc {
            union[0] = union[0].max(a.m[0]);
        }
        for j in 1..union.len() {
            union[j] = union[j].max(union[j - 1]);
        }
        let data = if union[0] > 0 {
            Some(ctx.draw_training(&union, pilot.as_ref(), plan.reuse_pilot, &mut rng, &ledger)?)
        } else {
            None
        };

        let row = plan
            .strategies
            .iter()
            .zip(&coeffs)
            .map(|(&kind, coef)| -> CellOutcome {
                let coef = coef.as_ref().map_err(|e| e.clone())?;
                let alloc = if kind.is_multifidelity() { &mf_alloc } else { &sf_alloc };
                let alloc = alloc.as_ref().expect("requested").as_ref().map_err(|e| e.clone())?;
                let data = data.as_ref().expect("allocation succeeded");
                let view = data.prefix(&alloc.m).map_err(|e| e.to_string())?;
                let f = fit(&view, coef, &ctx.cxx).map_err(|e| e.to_string())?;
                let predictions = ctx
                    .eval_points
                    .iter()
                    .map(|z| predict(&f, &ctx.map, z))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.to_string())?;
                Ok(ReplicateEstimate {
                    cost: alloc.realized_cost,
                    m: f.m,
                    c_xy: f.c_xy,
                    beta: f.beta,
                    predictions,
                })
            })
            .collect();
        cells.push(row);
        allocations.push(match mf_alloc {
            Some(Ok(a)) => Some(a.m),
            _ => None,
        });
    }
    Ok(ReplicationOutcome {
        cells,
        allocations,
        pilot_cost,
    })
}

/// Replication mean and empirical covariance (`1/(R-1)`) of a vector estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub trace: f64,
}

impl MomentSummary {
    pub fn from_samples(samples: &[&[f64]]) -> Option<Self> {
        let n = samples.len();
        let d = samples.first()?.len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Matrix::zeros(d, d);
        if n >= 2 {
            for s in samples {
                for i in 0..d {
                    let di = s[i] - mean[i];
                    for j in 0..d {
                        cov[(i, j)] += di * (s[j] - mean[j]);
                    }
                }
            }
            cov = cov.scale(1.0 / (n - 1) as f64);
        }
        let trace = cov.trace();
        Some(MomentSummary { mean, cov, trace })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub z: Vec<f64>,
    pub mean: f64,
    /// Empirical variance of the predictions.
    pub var: f64,
    /// `x(z)^T Cov[β̂] x(z)` from the same replications.
    pub var_from_beta: f64,
}

/// Results of one (budget, strategy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub budget: f64,
    pub strategy: StrategyKind,
    pub successes: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
    /// Sample counts per successful replication.
    pub allocations: Vec<Vec<usize>>,
    pub max_realized_cost: f64,
    pub c_xy: Option<MomentSummary>,
    pub beta: Option<MomentSummary>,
    pub predictions: Vec<PredictionSummary>,
    /// Per-replication estimates, `None` where the fit failed.
    #[serde(skip)]
    pub estimates: Vec<Option<ReplicateEstimate>>,
}

/// Spread of pilot-based allocations at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationSummary {
    pub budget: f64,
    pub mean_m: Vec<f64>,
    pub std_m: Vec<f64>,
    /// `std / mean` of each `m_k`.
    pub variation: Vec<f64>,
    pub samples: usize,
}

/// Known exact targets, when the family admits them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub c_xy: Vec<f64>,
    pub beta: Vec<f64>,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub family: String,
    pub seed: u64,
    pub replications: usize,
    pub feature_dim: usize,
    pub standardized: bool,
    pub costs: Vec<f64>,
    pub eval_points: Vec<Vec<f64>>,
    pub cxx: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<ModelStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Oracle>,
    /// Pilot cost per replication; not deducted from the budgets.
    pub pilot_cost: Vec<f64>,
    pub allocation_variation: Vec<VariationSummary>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentReport {
    pub fn cell(&self, budget: f64, strategy: StrategyKind) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.budget == budget && c.strategy == strategy)
    }
}

fn variation(budget: f64, allocs: &[&Vec<usize>]) -> Option<VariationSummary> {
    let n = allocs.len();
    let k = allocs.first()?.len();
    let mean_m: Vec<f64> = (0..k).map(|j| allocs.iter().map(|a| a[j] as f64).sum::<f64>() / n as f64).collect();
    let std_m: Vec<f64> = (0..k)
        .map(|j| {
            if n < 2 {
                return 0.0;
            }
            let ss: f64 = allocs.iter().map(|a| (a[j] as f64 - mean_m[j]).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        })
        .collect();
    let variation = std_m.iter().zip(&mean_m).map(|(s, m)| s / m).collect();
    Some(VariationSummary {
        budget,
        mean_m,
        std_m,
        variation,
        samples: n,
    })
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidPlan(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn oracle(ctx: &Context, plan: &ExperimentPlan) -> Result<Option<Oracle>> {
    let (ModelSource::Exp, Some(dist)) = (&plan.model, &ctx.dist) else {
        return Ok(None);
    };
    if ctx.map.is_standardized() {
        return Ok(None);
    }
    let c_xy = exact_cxy_exponential(&exp_pair_models()[0], &ctx.map, dist)?;
    let beta = spd_solve(&ctx.cxx, &c_xy)?;
    let predictions = ctx.eval_features.iter().map(|x| x.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
    Ok(Some(Oracle { c_xy, beta, predictions }))
}

/// Runs every replication and aggregates per (budget, strategy).
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let ctx = Context::build(plan)?;
    let outcomes: Vec<Result<ReplicationOutcome>> = with_pool(plan.workers, || {
        (0..plan.replications)
            .into_par_iter()
            .map(|r| run_replication(&ctx, plan, r))
            .collect()
    })?;
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for (b, &budget) in plan.budgets.iter().enumerate() {
        for (s, &kind) in plan.strategies.iter().enumerate() {
            let results: Vec<&CellOutcome> = outcomes.iter().map(|o| &o.cells[b][s]).collect();
            let ok: Vec<&ReplicateEstimate> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
            let first_failure = results.iter().find_map(|r| r.as_ref().err().cloned());
            let c_xy = MomentSummary::from_samples(&ok.iter().map(|e| e.c_xy.as_slice()).collect::<Vec<_>>());
            let beta = MomentSummary::from_samples(&ok.iter().map(|e| e.beta.as_slice()).collect::<Vec<_>>());
            let predictions = ctx
                .eval_points
                .iter()
                .zip(&ctx.eval_features)
                .enumerate()
                .filter_map(|(i, (z, x))| {
                    let vals: Vec<f64> = ok.iter().map(|e| e.predictions[i]).collect();
                    let m = MomentSummary::from_samples(&vals.iter().map(std::slice::from_ref).collect::<Vec<_>>())?;
                    let var_from_beta = crate::coefficients::quadratic_form(&beta.as_ref()?.cov, x).ok()?;
                    Some(PredictionSummary {
                        z: z.clone(),
                        mean: m.mean[0],
                        var: m.trace,
                        var_from_beta,
                    })
                })
                .collect();
            cells.push(CellSummary {
                budget,
                strategy: kind,
                successes: ok.len(),
                failures: results.len() - ok.len(),
                first_failure,
                allocations: ok.iter().map(|e| e.m.clone()).collect(),
                max_realized_cost: ok.iter().map(|e| e.cost).fold(0.0, f64::max),
                c_xy,
                beta,
                predictions,
                estimates: if plan.record_estimates {
                    results.iter().map(|r| r.as_ref().ok().cloned()).collect()
                } else {
                    Vec::new()
                },
            });
        }
    }
    let allocation_variation = if matches!(plan.stats, StatsMode::Pilot { .. }) {
        plan.budgets
            .iter()
            .enumerate()
            .filter_map(|(b, &budget)| {
                let allocs: Vec<&Vec<usize>> = outcomes.iter().filter_map(|o| o.allocations[b].as_ref()).collect();
                variation(budget, &allocs)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ExperimentReport {
        family: ctx.family.clone(),
        seed: plan.seed,
        replications: plan.replications,
        feature_dim: ctx.map.dim(),
        standardized: ctx.map.is_standardized(),
        costs: ctx.costs.clone(),
        eval_points: ctx.eval_points.clone(),
        cxx: ctx.cxx.matrix().clone(),
        stats: ctx.shared_stats.clone(),
        oracle: oracle(&ctx, plan)?,
        pilot_cost: outcomes.iter().map(|o| o.pilot_cost).collect(),
        allocation_variation,
        cells,
    })
}

/// Spread (`std / mean`) of allocations computed from `replications`
/// independent pilot samples of size `n_pilot`; no training data is drawn.
pub fn allocation_variation(plan: &ExperimentPlan, n_pilot: usize, replications: usize) -> Result<Vec<VariationSummary>> {
    let plan = ExperimentPlan {
        stats: StatsMode::Pilot { n_pilot },
        replications: replications.max(2),
        reuse_pilot: false,
        ..plan.clone()
    };
    let ctx = Context::build(&plan)?;
    let per_rep: Vec<Result<Vec<Option<Vec<usize>>>>> = with_pool(plan.workers, || {
        (0..replications)
            .into_par_iter()
            .map(|r| {
                let mut rng = base_rng(plan.seed, r as u64);
                let ledger = CostLedger::new(ctx.k());
                let p = draw_pilot(
                    ctx.models.as_ref(),
                    ctx.dataset.as_ref(),
                    ctx.dist.as_ref(),
                    &ctx.map,
                    n_pilot,
                    &mut rng,
                    &ledger,
                    ctx.with_replacement,
                )?;
                let stats = stats_from_dataset(&p.set, &ctx.map)?;
                Ok(plan
                    .budgets
                    .iter()
                    .map(|&b| allocate_with(&stats, &ctx.costs, b, plan.allocation).ok().map(|a| a.m))
                    .collect())
            })
            .collect()
    })?;
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(plan
        .budgets
        .iter()
        .enumerate()
        .filter_map(|(b, &budget)| {
            let allocs: Vec<&Vec<usize>> = per_rep.iter().filter_map(|r| r[b].as_ref()).collect();
            variation(budget, &allocs)
        })
        .collect())
}

/// Statistics for a model source, as the `stats` subcommand computes them.
/// A pilot draws `n_pilot` samples from the seed's reference stream.
pub fn resolve_stats(
    model: &ModelSource,
    features: Option<FeatureSpec>,
    distribution: Option<InputDistribution>,
    mode: &StatsMode,
    seed: u64,
) -> Result<ModelStats> {
    let stats = match mode {
        StatsMode::Pilot { n_pilot } => StatsMode::Reference { n: *n_pilot },
        m => m.clone(),
    };
    let plan = ExperimentPlan {
        model: model.clone(),
        features,
        distribution,
        budgets: vec![1.0],
        strategies: vec![StrategyKind::SingleFidelity],
        stats,
        cxx: None,
        replications: 2,
        seed,
        eval_points: Some(Vec::new()),
        reuse_pilot: false,
        allocation: AllocationOptions::default(),
        workers: Some(1),
        record_estimates: false,
        output_dir: None,
    };
    Ok(Context::build(&plan)?.shared_stats.expect("non-pilot modes resolve statistics"))
}

/// Outcome of one fit through the same pipeline as a replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFit {
    pub fit: crate::estimators::FitResult,
    pub eval_points: Vec<Vec<f64>>,
    pub predictions: Vec<f64>,
    /// Pilot cost, not part of `fit.cost`.
    pub pilot_cost: f64,
}

/// Fits `strategy` once, using replication stream 0 of `plan.seed`. Counts are
/// `counts` when given, else the allocation for `plan.budgets[0]`.
pub fn fit_single(plan: &ExperimentPlan, strategy: StrategyKind, counts: Option<Vec<usize>>) -> Result<SingleFit> {
    let ctx = Context::build(plan)?;
    let mut rng = base_rng(plan.seed, 0);
    let pilot_ledger = CostLedger::new(ctx.k());
    let (stats, pilot) = match &ctx.shared_stats {
        Some(s) => (s.clone(), None),
        None => {
            let StatsMode::Pilot { n_pilot } = plan.stats else { unreachable!() };
            let p = draw_pilot(
                ctx.models.as_ref(),
                ctx.dataset.as_ref(),
                ctx.dist.as_ref(),
                &ctx.map,
                n_pilot,
                &mut rng,
                &pilot_ledger,
                ctx.with_replacement,
            )?;
            (stats_from_dataset(&p.set, &ctx.map)?, Some(p))
        }
    };
    let pilot_cost = pilot.as_ref().map_or(0.0, |p| p.set.counts().iter().zip(&ctx.costs).map(|(&m, &w)| m as f64 * w).sum());
    let coefficients = strategy_for(strategy, &stats)?;
    let m = match counts {
        Some(m) => {
            let expected = if strategy.is_multifidelity() { ctx.k() } else { 1 };
            if m.len() != expected {
                return Err(Error::CountMismatch(format!("{strategy} needs {expected} counts, got {}", m.len())));
            }
            crate::allocation::validate_allocation(&m, &ctx.costs[..expected], None)?;
            m
        }
        None if strategy.is_multifidelity() => allocate_with(&stats, &ctx.costs, plan.budgets[0], plan.allocation)?.m,
        None => single_fidelity_allocation(&ctx.costs, plan.budgets[0])?.m,
    };
    let ledger = CostLedger::new(ctx.k());
    let data = ctx.draw_training(&m, pilot.as_ref(), plan.reuse_pilot, &mut rng, &ledger)?;
    let f = fit(&data, &coefficients, &ctx.cxx)?.with_costs(&ctx.costs).with_seed(plan.seed);
    let predictions = ctx.eval_points.iter().map(|z| predict(&f, &ctx.map, z)).collect::<Result<Vec<_>>>()?;
    Ok(SingleFit {
        fit: f,
        eval_points: ctx.eval_points.clone(),
        predictions,
        pilot_cost,
    })
}

fn point_label(z: &[f64]) -> String {
    let parts: Vec<String> = z.iter().map(|v| v.to_string()).collect();
    format!("pred@{}", parts.join(";"))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `trace_cov.csv` and `estimates.csv` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("report.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    writeln!(f).map_err(|e| Error::io(&path, e))?;

    let mut w = csv::Writer::from_writer(create(&dir.join("trace_cov.csv"))?);
    w.write_record(["budget", "strategy", "target", "trace"])?;
    for c in &report.cells {
        let (b, s) = (c.budget.to_string(), c.strategy.name());
        if let Some(m) = &c.c_xy {
            w.write_record([b.as_str(), s, "cxy", &m.trace.to_string()])?;
        }
        if let Some(m) = &c.beta {
            w.write_record([b.as_str(), s, "beta", &m.trace.to_string()])?;
        }
        for p in &c.predictions {
            w.write_record([b.as_str(), s, &point_label(&p.z), &p.var.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("trace_cov.csv"), e))?;

    let mut w = csv::Writer::from_writer(create(&dir.join("estimates.csv"))?);
    w.write_record(["replication", "budget", "strategy", "component", "value"])?;
    let labels: Vec<String> = report.eval_points.iter().map(|z| point_label(z)).collect();
    for c in &report.cells {
        let b = c.budget.to_string();
        for (r, e) in c.estimates.iter().enumerate() {
            let Some(e) = e else { continue };
            let r = r.to_string();
            let mut row = |comp: &str, v: f64| w.write_record([r.as_str(), b.as_str(), c.strategy.name(), comp, &v.to_string()]);
            for (i, v) in e.c_xy.iter().enumerate() {
                row(&format!("cxy_{i}"), *v)?;
            }
            for (i, v) in e.beta.iter().enumerate() {
                row(&format!("beta_{i}"), *v)?;
            }
            for (l, v) in labels.iter().zip(&e.predictions) {
                row(l, *v)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("estimates.csv"), e))?;
    Ok(())
}
