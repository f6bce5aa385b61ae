//! Model hierarchies `f^(1), ..., f^(K)` with per-evaluation costs.
//!
//! Fidelity indices are zero-based throughout the crate: index 0 is the
//! high-fidelity reference model.

mod cdr;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use cdr::{cdr_distribution, cdr_pair, CdrConfig, CdrSolution, CdrSolver};

use crate::error::{Error, Result};
use crate::features::InputDistribution;

/// A scalar input-output map.
pub trait Model: Send + Sync {
    fn eval(&self, z: &[f64]) -> Result<f64>;

    fn name(&self) -> &str;

    fn input_dim(&self) -> usize;
}

/// Ordered fidelity hierarchy with strictly decreasing positive costs.
#[derive(Clone)]
pub struct ModelSet {
    family: String,
    models: Vec<Arc<dyn Model>>,
    costs: Vec<f64>,
}

impl fmt::Debug for ModelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSet")
            .field("family", &self.family)
            .field("models", &self.models.iter().map(|m| m.name()).collect::<Vec<_>>())
            .field("costs", &self.costs)
            .finish()
    }
}

impl ModelSet {
    pub fn new(family: impl Into<String>, models: Vec<Arc<dyn Model>>, costs: Vec<f64>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidModelSet("need at least one model".into()));
        }
        if models.len() != costs.len() {
            return Err(Error::InvalidModelSet(format!(
                "{} models but {} costs",
                models.len(),
                costs.len()
            )));
        }
        validate_costs(&costs)?;
        let p = models[0].input_dim();
        if models.iter().any(|m| m.input_dim() != p) {
            return Err(Error::InvalidModelSet("models disagree on input dimension".into()));
        }
        Ok(ModelSet {
            family: family.into(),
            models,
            costs,
        })
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    /// Number of fidelities `K`.
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn input_dim(&self) -> usize {
        self.models[0].input_dim()
    }

    pub fn model(&self, k: usize) -> Result<&dyn Model> {
        self.models
            .get(k)
            .map(|m| m.as_ref())
            .ok_or(Error::FidelityOutOfRange {
                index: k,
                count: self.models.len(),
            })
    }

    /// Evaluates `f^(k)(z)` and charges `w_k` to the ledger.
    pub fn evaluate(&self, k: usize, z: &[f64], ledger: &CostLedger) -> Result<f64> {
        let model = self.model(k)?;
        let y = model.eval(z)?;
        ledger.charge(k, 1);
        Ok(y)
    }

    /// Same as repeated [`ModelSet::evaluate`]; stops at the first failure.
    pub fn evaluate_batch<Z: AsRef<[f64]>>(&self, k: usize, zs: &[Z], ledger: &CostLedger) -> Result<Vec<f64>> {
        zs.iter().map(|z| self.evaluate(k, z.as_ref(), ledger)).collect()
    }

    pub fn ledger(&self) -> CostLedger {
        CostLedger::new(self.len())
    }
}

/// `w_1 > w_2 > ... > w_K > 0`.
pub fn validate_costs(costs: &[f64]) -> Result<()> {
    if costs.is_empty() {
        return Err(Error::InvalidCosts("no costs given".into()));
    }
    if costs.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidCosts(format!("costs must be positive, got {costs:?}")));
    }
    if costs.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidCosts(format!(
            "costs must be strictly decreasing, got {costs:?}"
        )));
    }
    Ok(())
}

/// Per-fidelity evaluation counter. Counts are atomic so one ledger can be
/// shared by concurrent workers; the total is `sum_k count_k * w_k` evaluated
/// in fidelity order, so it never depends on interleaving.
#[derive(Debug)]
pub struct CostLedger {
    counts: Vec<AtomicU64>,
}

impl CostLedger {
    pub fn new(k: usize) -> Self {
        CostLedger {
            counts: (0..k).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn charge(&self, k: usize, evaluations: u64) {
        self.counts[k].fetch_add(evaluations, Ordering::Relaxed);
    }

    pub fn counts(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn total(&self, costs: &[f64]) -> f64 {
        self.counts()
            .iter()
            .zip(costs)
            .map(|(&n, &w)| n as f64 * w)
            .sum()
    }

    /// Adds another ledger's counts into this one.
    pub fn merge(&self, other: &CostLedger) {
        for (mine, theirs) in self.counts.iter().zip(other.counts()) {
            mine.fetch_add(theirs, Ordering::Relaxed);
        }
    }
}

impl Clone for CostLedger {
    fn clone(&self) -> Self {
        CostLedger {
            counts: self.counts().into_iter().map(AtomicU64::new).collect(),
        }
    }
}

/// `f(z) = scale * exp(rate * z)` in one dimension.
#[derive(Debug, Clone)]
pub struct Exponential {
    name: String,
    scale: f64,
    rate: f64,
}

impl Exponential {
    pub fn new(name: impl Into<String>, scale: f64, rate: f64) -> Self {
        Exponential {
            name: name.into(),
            scale,
            rate,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Model for Exponential {
    fn eval(&self, z: &[f64]) -> Result<f64> {
        if z.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: z.len(),
            });
        }
        Ok(self.scale * (self.rate * z[0]).exp())
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn input_dim(&self) -> usize {
        1
    }
}

/// High-fidelity `8 e^z` and low-fidelity `0.9 sqrt(8 f1) = 7.2 e^{z/2}`.
pub fn exp_pair_models() -> Vec<Exponential> {
    vec![
        Exponential::new("8 exp(z)", 8.0, 1.0),
        Exponential::new("7.2 exp(z/2)", 0.9 * 8.0, 0.5),
    ]
}

/// [`exp_pair_models`] with costs `(1, 0.001)`.
pub fn exp_pair() -> ModelSet {
    let models = exp_pair_models()
        .into_iter()
        .map(|m| Arc::new(m) as Arc<dyn Model>)
        .collect();
    ModelSet::new("exp", models, vec![1.0, 0.001]).expect("built-in exponential pair is valid")
}

/// Input distribution of the exponential example, `U(0, 5)`.
pub fn exp_distribution() -> InputDistribution {
    InputDistribution::uniform_1d(0.0, 5.0).expect("valid bounds")
}

/// Names of the built-in model families.
pub const BUILTIN_FAMILIES: &[(&str, &str)] = &[
    ("exp", "analytic pair 8e^z / 7.2e^(z/2) on U(0,5), costs (1, 0.001)"),
    (
        "cdr1d",
        "steady 1D convection-diffusion-reaction, fine/coarse finite differences, max temperature",
    ),
];
