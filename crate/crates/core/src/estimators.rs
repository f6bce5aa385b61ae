//! Nested training data and the single- and multifidelity estimators of
//! `C_XY` and `β`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientStrategy, Coefficients, StrategyKind};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, InputDistribution};
use crate::linalg::{dot, spd_solve, Matrix, SymMatrix};
use crate::models::{CostLedger, ModelSet};

/// Training data where fidelity `k` is evaluated on the first `m_k` inputs
/// of one shared input list, with `m_1 <= ... <= m_K`. Prefixes share storage.
#[derive(Debug, Clone)]
pub struct NestedSampleSet {
    counts: Vec<usize>,
    inputs: Arc<Vec<Vec<f64>>>,
    features: Arc<Vec<Vec<f64>>>,
    outputs: Arc<Vec<Vec<f64>>>,
    standardized: bool,
}

impl PartialEq for NestedSampleSet {
    fn eq(&self, other: &Self) -> bool {
        self.counts == other.counts
            && self.standardized == other.standardized
            && self.inputs() == other.inputs()
            && self.features() == other.features()
            && (0..self.k()).all(|k| self.outputs(k) == other.outputs(k))
    }
}

impl NestedSampleSet {
    /// `outputs[k]` must hold exactly `counts[k]` values and `inputs` exactly
    /// `counts[K-1]` points.
    pub fn from_inputs(
        map: &FeatureMap,
        counts: Vec<usize>,
        inputs: Vec<Vec<f64>>,
        outputs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let features = inputs.iter().map(|z| map.eval(z)).collect::<Result<Vec<_>>>()?;
        Self::from_parts(counts, inputs, features, outputs, map.is_standardized())
    }

    fn from_parts(
        counts: Vec<usize>,
        inputs: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        outputs: Vec<Vec<f64>>,
        standardized: bool,
    ) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::NonNestedData("no fidelities".into()));
        }
        if let Some(k) = (1..counts.len()).find(|&k| counts[k] < counts[k - 1]) {
            return Err(Error::NonNestedData(format!(
                "m_{} = {} exceeds m_{} = {}",
                k,
                counts[k - 1],
                k + 1,
                counts[k]
            )));
        }
        if outputs.len() != counts.len() {
            return Err(Error::CountMismatch(format!(
                "{} counts but outputs for {} fidelities",
                counts.len(),
                outputs.len()
            )));
        }
        if let Some(k) = (0..counts.len()).find(|&k| outputs[k].len() != counts[k]) {
            return Err(Error::CountMismatch(format!(
                "fidelity {} has {} outputs, expected {}",
                k + 1,
                outputs[k].len(),
                counts[k]
            )));
        }
        let m_k = *counts.last().expect("nonempty");
        if inputs.len() != m_k || features.len() != m_k {
            return Err(Error::CountMismatch(format!(
                "{} inputs for m_K = {m_k}",
                inputs.len()
            )));
        }
        if let Some(f) = features.first() {
            let d = f.len();
            if let Some(bad) = features.iter().find(|x| x.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: bad.len(),
                });
            }
        }
        Ok(NestedSampleSet {
            counts,
            inputs: Arc::new(inputs),
            features: Arc::new(features),
            outputs: Arc::new(outputs),
            standardized,
        })
    }

    /// Evaluates fidelity `k` of `set` on the first `counts[k]` of `inputs`.
    pub fn evaluate(
        set: &ModelSet,
        map: &FeatureMap,
        inputs: Vec<Vec<f64>>,
        counts: Vec<usize>,
        ledger: &CostLedger,
    ) -> Result<Self> {
        if counts.len() > set.len() {
            return Err(Error::MissingFidelity(format!(
                "{} counts for {} models",
                counts.len(),
                set.len()
            )));
        }
        let m_k = counts.last().copied().unwrap_or(0);
        if inputs.len() < m_k {
            return Err(Error::CountMismatch(format!("{} inputs for m_K = {m_k}", inputs.len())));
        }
        let mut inputs = inputs;
        inputs.truncate(m_k);
        let outputs = counts
            .iter()
            .enumerate()
            .map(|(k, &m)| set.evaluate_batch(k, &inputs[..m], ledger))
            .collect::<Result<Vec<_>>>()?;
        Self::from_inputs(map, counts, inputs, outputs)
    }

    /// Draws `m_K` fresh inputs from `dist` and evaluates them.
    pub fn generate<R: Rng + ?Sized>(
        set: &ModelSet,
        map: &FeatureMap,
        dist: &InputDistribution,
        counts: Vec<usize>,
        rng: &mut R,
        ledger: &CostLedger,
    ) -> Result<Self> {
        let m_k = counts.last().copied().unwrap_or(0);
        let inputs = dist.sample_n(m_k, rng);
        Self::evaluate(set, map, inputs, counts, ledger)
    }

    /// The nested subset with smaller `counts`, possibly over fewer fidelities.
    pub fn prefix(&self, counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.len() > self.counts.len() {
            return Err(Error::CountMismatch(format!(
                "prefix over {} fidelities of {}",
                counts.len(),
                self.counts.len()
            )));
        }
        if let Some(k) = (0..counts.len()).find(|&k| counts[k] > self.counts[k]) {
            return Err(Error::CountMismatch(format!(
                "fidelity {} has {} samples, {} requested",
                k + 1,
                self.counts[k],
                counts[k]
            )));
        }
        if let Some(k) = (1..counts.len()).find(|&k| counts[k] < counts[k - 1]) {
            return Err(Error::NonNestedData(format!(
                "m_{} = {} exceeds m_{} = {}",
                k,
                counts[k - 1],
                k + 1,
                counts[k]
            )));
        }
        Ok(NestedSampleSet {
            counts: counts.to_vec(),
            inputs: Arc::clone(&self.inputs),
            features: Arc::clone(&self.features),
            outputs: Arc::clone(&self.outputs),
            standardized: self.standardized,
        })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Number of fidelities.
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Feature dimension `d`, if there is any sample.
    pub fn dim(&self) -> Option<usize> {
        self.features().first().map(|x| x.len())
    }

    fn m_k(&self) -> usize {
        *self.counts.last().expect("nonempty")
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs[..self.m_k()]
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features[..self.m_k()]
    }

    /// Outputs of zero-based fidelity `k` on its `m_k` inputs.
    pub fn outputs(&self, k: usize) -> &[f64] {
        &self.outputs[k][..self.counts[k]]
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// `sum_{i < m} x_i y_i / m`, summed left to right.
    fn moment(&self, k: usize, m: usize) -> Vec<f64> {
        let d = self.features[0].len();
        let mut acc = vec![0.0; d];
        for (x, y) in self.features[..m].iter().zip(&self.outputs[k][..m]) {
            for (a, xi) in acc.iter_mut().zip(x) {
                *a += xi * y;
            }
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        acc
    }

    /// `sum_{i < m} y_i / m` for zero-based fidelity `k`.
    fn mean(&self, k: usize, m: usize) -> f64 {
        self.outputs[k][..m].iter().sum::<f64>() / m as f64
    }

    fn corrections(&self, expected: usize) -> Result<()> {
        if self.counts[0] == 0 {
            return Err(Error::EmptyData);
        }
        if expected + 1 != self.k() {
            return Err(Error::CountMismatch(format!(
                "{expected} coefficients for {} fidelities",
                self.k()
            )));
        }
        Ok(())
    }
}

/// `(1/m_1) X_{m_1} Y^(1)_{m_1}`.
pub fn sf_cxy(data: &NestedSampleSet) -> Result<Vec<f64>> {
    if data.counts[0] == 0 {
        return Err(Error::EmptyData);
    }
    Ok(data.moment(0, data.counts[0]))
}

/// Scalar control variates: high-fidelity moment plus
/// `α_k ((1/m_k) X_{m_k} Y^(k)_{m_k} - (1/m_{k-1}) X_{m_{k-1}} Y^(k)_{m_{k-1}})`.
pub fn mf_cxy_scalar(data: &NestedSampleSet, alphas: &[f64]) -> Result<Vec<f64>> {
    data.corrections(alphas.len())?;
    let mut c = data.moment(0, data.counts[0]);
    for (j, &alpha) in alphas.iter().enumerate() {
        let k = j + 1;
        let (m_prev, m_k) = (data.counts[k - 1], data.counts[k]);
        if m_prev == m_k {
            continue;
        }
        let hi = data.moment(k, m_k);
        let lo = data.moment(k, m_prev);
        for ((ci, h), l) in c.iter_mut().zip(&hi).zip(&lo) {
            *ci += alpha * (h - l);
        }
    }
    Ok(c)
}

/// Matrix control variates; the correction of fidelity `k` is multiplied
/// by `A_k`.
pub fn mf_cxy_matrix(data: &NestedSampleSet, mats: &[Matrix]) -> Result<Vec<f64>> {
    data.corrections(mats.len())?;
    let d = data.dim().ok_or(Error::EmptyData)?;
    if let Some(bad) = mats.iter().find(|a| a.rows() != d || a.cols() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if bad.rows() != d { bad.rows() } else { bad.cols() },
        });
    }
    let mut c = data.moment(0, data.counts[0]);
    for (j, a) in mats.iter().enumerate() {
        let k = j + 1;
        let (m_prev, m_k) = (data.counts[k - 1], data.counts[k]);
        if m_prev == m_k {
            continue;
        }
        let hi = data.moment(k, m_k);
        let lo = data.moment(k, m_prev);
        let diff: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
        for (ci, v) in c.iter_mut().zip(a.matvec(&diff)?) {
            *ci += v;
        }
    }
    Ok(c)
}

/// Scalar multifidelity Monte Carlo estimate of `E[f_1(Z)]`.
pub fn mfmc_mean(data: &NestedSampleSet, alphas: &[f64]) -> Result<f64> {
    data.corrections(alphas.len())?;
    let mut mu = data.mean(0, data.counts[0]);
    for (j, &alpha) in alphas.iter().enumerate() {
        let k = j + 1;
        let (m_prev, m_k) = (data.counts[k - 1], data.counts[k]);
        if m_prev == m_k {
            continue;
        }
        mu += alpha * (data.mean(k, m_k) - data.mean(k, m_prev));
    }
    Ok(mu)
}

/// Result of one regression fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub c_xy: Vec<f64>,
    pub beta: Vec<f64>,
    pub strategy: CoefficientStrategy,
    /// Sample counts actually used, one per fidelity that entered the fit.
    pub m: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub standardized: bool,
}

impl FitResult {
    /// Sets `cost = sum_k m_k w_k`.
    pub fn with_costs(mut self, costs: &[f64]) -> Self {
        self.cost = Some(self.m.iter().zip(costs).map(|(&m, &w)| m as f64 * w).sum());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Estimates `Ĉ_XY` with `strategy` and solves `C_XX β = Ĉ_XY`.
pub fn fit(data: &NestedSampleSet, strategy: &CoefficientStrategy, cxx: &SymMatrix) -> Result<FitResult> {
    let (c_xy, m) = match strategy.coefficients() {
        Coefficients::None => {
            if strategy.kind() != StrategyKind::SingleFidelity && data.k() > 1 {
                return Err(Error::CountMismatch(format!(
                    "{} has no coefficients for {} fidelities",
                    strategy.kind(),
                    data.k()
                )));
            }
            (sf_cxy(data)?, vec![data.counts[0]])
        }
        Coefficients::Scalar(a) => (mf_cxy_scalar(data, a)?, data.counts.clone()),
        Coefficients::Matrix(a) => (mf_cxy_matrix(data, a)?, data.counts.clone()),
    };
    let beta = spd_solve(cxx, &c_xy)?;
    Ok(FitResult {
        c_xy,
        beta,
        strategy: strategy.clone(),
        m,
        cost: None,
        seed: None,
        standardized: data.standardized,
    })
}

/// `x(z)^T β̂`.
pub fn predict(fit: &FitResult, map: &FeatureMap, z: &[f64]) -> Result<f64> {
    let x = map.eval(z)?;
    if x.len() != fit.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: fit.beta.len(),
            got: x.len(),
        });
    }
    Ok(dot(&x, &fit.beta))
}
