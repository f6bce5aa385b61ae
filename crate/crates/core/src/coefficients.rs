//! Control-variate coefficient strategies and the closed-form covariance of
//! the resulting `C_XY` estimators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix, SymMatrix};
use crate::statistics::ModelStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    SingleFidelity,
    MfMean,
    MfAlphaStar,
    MfAStar,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::SingleFidelity,
        StrategyKind::MfMean,
        StrategyKind::MfAlphaStar,
        StrategyKind::MfAStar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::SingleFidelity => "single-fidelity",
            StrategyKind::MfMean => "mf-mean",
            StrategyKind::MfAlphaStar => "mf-alpha-star",
            StrategyKind::MfAStar => "mf-a-star",
        }
    }

    pub fn is_multifidelity(self) -> bool {
        self != StrategyKind::SingleFidelity
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidPlan(format!(
                    "unknown strategy '{s}' (expected single-fidelity, mf-mean, mf-alpha-star or mf-a-star)"
                ))
            })
    }
}

/// Correction weights for fidelities `2..K`.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    /// No correction terms.
    None,
    Scalar(Vec<f64>),
    Matrix(Vec<Matrix>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StrategyDoc", into = "StrategyDoc")]
pub struct CoefficientStrategy {
    kind: StrategyKind,
    coefficients: Coefficients,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyDoc {
    kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<Matrix>>,
}

impl From<CoefficientStrategy> for StrategyDoc {
    fn from(s: CoefficientStrategy) -> Self {
        let (alpha, a) = match s.coefficients {
            Coefficients::None => (None, None),
            Coefficients::Scalar(v) => (Some(v), None),
            Coefficients::Matrix(m) => (None, Some(m)),
        };
        StrategyDoc { kind: s.kind, alpha, a }
    }
}

impl TryFrom<StrategyDoc> for CoefficientStrategy {
    type Error = Error;

    fn try_from(doc: StrategyDoc) -> Result<Self> {
        let coefficients = match (doc.alpha, doc.a) {
            (None, None) => Coefficients::None,
            (Some(v), None) => Coefficients::Scalar(v),
            (None, Some(m)) => Coefficients::Matrix(m),
            _ => return Err(Error::InvalidPlan("give either alpha or A, not both".into())),
        };
        Ok(CoefficientStrategy {
            kind: doc.kind,
            coefficients,
        })
    }
}

impl CoefficientStrategy {
    pub fn single_fidelity() -> Self {
        CoefficientStrategy {
            kind: StrategyKind::SingleFidelity,
            coefficients: Coefficients::None,
        }
    }

    /// Fixed user-chosen scalar coefficients, labelled with `kind`.
    pub fn scalar(kind: StrategyKind, alphas: Vec<f64>) -> Result<Self> {
        if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
            return Err(Error::DegenerateStats(format!("coefficient {a} is not finite")));
        }
        Ok(CoefficientStrategy {
            kind,
            coefficients: Coefficients::Scalar(alphas),
        })
    }

    /// Fixed user-chosen matrix coefficients, labelled with `kind`.
    pub fn matrix(kind: StrategyKind, mats: Vec<Matrix>) -> Result<Self> {
        if let Some(m) = mats.first() {
            let d = m.rows();
            if mats.iter().any(|a| a.rows() != d || a.cols() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: mats.iter().map(|a| a.cols()).find(|&c| c != d).unwrap_or(d),
                });
            }
        }
        if mats.iter().any(|a| !a.is_finite()) {
            return Err(Error::DegenerateStats("matrix coefficient is not finite".into()));
        }
        Ok(CoefficientStrategy {
            kind,
            coefficients: Coefficients::Matrix(mats),
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coefficients
    }

    /// Number of correction terms (`K - 1`, or 0 without corrections).
    pub fn corrections(&self) -> usize {
        match &self.coefficients {
            Coefficients::None => 0,
            Coefficients::Scalar(v) => v.len(),
            Coefficients::Matrix(m) => m.len(),
        }
    }

    /// The coefficients as `d x d` matrices, scalars becoming `α I`.
    pub fn as_matrices(&self, d: usize) -> Vec<Matrix> {
        match &self.coefficients {
            Coefficients::None => Vec::new(),
            Coefficients::Scalar(v) => v.iter().map(|&a| Matrix::identity(d).scale(a)).collect(),
            Coefficients::Matrix(m) => m.clone(),
        }
    }
}

/// `α_k = ρ_1k σ_1 / σ_k`.
pub fn mf_mean_alpha(stats: &ModelStats) -> Result<CoefficientStrategy> {
    let (s, r) = (stats.sigma(), stats.rho());
    let alphas = (1..stats.k())
        .map(|k| {
            if !(s[k] > 0.0) {
                return Err(Error::DegenerateStats(format!("sigma[{k}] = {}", s[k])));
            }
            Ok(r[k] * s[0] / s[k])
        })
        .collect::<Result<Vec<_>>>()?;
    CoefficientStrategy::scalar(StrategyKind::MfMean, alphas)
}

/// `α*_k = Tr C_1k / Tr C_kk`.
pub fn mf_alpha_star(stats: &ModelStats) -> Result<CoefficientStrategy> {
    let alphas = (1..stats.k())
        .map(|k| {
            let den = stats.ckk(k)?.trace();
            if !(den > 0.0) {
                return Err(Error::DegenerateStats(format!("Tr C_kk = {den} for fidelity {k}")));
            }
            Ok(stats.c1k(k)?.trace() / den)
        })
        .collect::<Result<Vec<_>>>()?;
    CoefficientStrategy::scalar(StrategyKind::MfAlphaStar, alphas)
}

/// Relative pivot threshold below which `C_kk` counts as singular.
const SINGULAR_PIVOT: f64 = 1e-10;

/// `A*_k = C_1k C_kk^{-1}`, from `C_kk X = C_1k^T` and `A* = X^T`.
pub fn mf_a_star(stats: &ModelStats) -> Result<CoefficientStrategy> {
    let mats = (1..stats.k())
        .map(|k| a_star(stats.c1k(k)?, stats.ckk(k)?))
        .collect::<Result<Vec<_>>>()?;
    CoefficientStrategy::matrix(StrategyKind::MfAStar, mats)
}

/// `C_12 C_22^{-1}` for a single pair of blocks.
pub fn a_star(c12: &Matrix, c22: &Matrix) -> Result<Matrix> {
    let chol = Cholesky::factor_rel(&SymMatrix::from_symmetrized(c22)?, SINGULAR_PIVOT)?;
    Ok(chol.solve_matrix(&c12.transpose())?.transpose())
}

/// Builds the coefficients for `kind` from `stats`.
pub fn strategy_for(kind: StrategyKind, stats: &ModelStats) -> Result<CoefficientStrategy> {
    match kind {
        StrategyKind::SingleFidelity => Ok(CoefficientStrategy::single_fidelity()),
        StrategyKind::MfMean => mf_mean_alpha(stats),
        StrategyKind::MfAlphaStar => mf_alpha_star(stats),
        StrategyKind::MfAStar => mf_a_star(stats),
    }
}

/// Covariance of the nested control-variate estimator of `C_XY`:
///
/// ```text
/// C_11 / m_1 + sum_k (1/m_{k-1} - 1/m_k) (A_k C_kk A_k^T - C_1k A_k^T - A_k C_1k^T)
/// ```
///
/// `c1k[j]`, `ckk[j]` and `coeffs[j]` belong to fidelity `j + 2`.
pub fn estimator_cov_parts(
    c11: &Matrix,
    c1k: &[&Matrix],
    ckk: &[&Matrix],
    counts: &[usize],
    coeffs: &[Matrix],
) -> Result<Matrix> {
    if counts.is_empty() || counts[0] == 0 {
        return Err(Error::ZeroHighFidelity);
    }
    let terms = coeffs.len();
    if c1k.len() < terms || ckk.len() < terms || counts.len() < terms + 1 {
        return Err(Error::CountMismatch(format!(
            "{terms} coefficients but {} counts",
            counts.len()
        )));
    }
    let mut cov = c11.scale(1.0 / counts[0] as f64);
    for j in 0..terms {
        let (m_prev, m_k) = (counts[j] as f64, counts[j + 1] as f64);
        let w = 1.0 / m_prev - 1.0 / m_k;
        if w == 0.0 {
            continue;
        }
        let a = &coeffs[j];
        let at = a.transpose();
        let aca = a.matmul(ckk[j])?.matmul(&at)?;
        let cat = c1k[j].matmul(&at)?;
        let term = aca.sub(&cat)?.sub(&cat.transpose())?;
        cov = cov.add(&term.scale(w))?;
    }
    Ok(cov)
}

/// [`estimator_cov_parts`] with blocks taken from `stats`. With no
/// correction terms only `counts[0]` is used.
pub fn estimator_cov(stats: &ModelStats, counts: &[usize], strategy: &CoefficientStrategy) -> Result<Matrix> {
    let c11 = stats.c1k(0)?;
    let coeffs = strategy.as_matrices(c11.rows());
    if coeffs.len() + 1 > stats.k() {
        return Err(Error::CountMismatch(format!(
            "{} correction terms for {} fidelities",
            coeffs.len(),
            stats.k()
        )));
    }
    let c1k = (1..=coeffs.len()).map(|k| stats.c1k(k)).collect::<Result<Vec<_>>>()?;
    let ckk = (1..=coeffs.len()).map(|k| stats.ckk(k)).collect::<Result<Vec<_>>>()?;
    estimator_cov_parts(c11, &c1k, &ckk, counts, &coeffs)
}

/// `C_XX^{-1} Σ C_XX^{-1}`, the covariance of `β̂` given that of `Ĉ_XY`.
pub fn beta_cov(cov_cxy: &Matrix, cxx: &SymMatrix) -> Result<Matrix> {
    let chol = Cholesky::factor(cxx)?;
    let left = chol.solve_matrix(cov_cxy)?;
    Ok(chol.solve_matrix(&left.transpose())?.symmetrized())
}

/// `x^T Σ x`.
pub fn quadratic_form(sigma: &Matrix, x: &[f64]) -> Result<f64> {
    let sx = sigma.matvec(x)?;
    Ok(x.iter().zip(&sx).map(|(a, b)| a * b).sum())
}
