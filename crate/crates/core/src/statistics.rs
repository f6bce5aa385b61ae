//! Second-order model statistics: `σ_k`, `ρ_1k` and the covariances
//! `C_1k = Cov[g1, gk]`, `C_kk = Cov[gk, gk]` of `g_k(z) = x(z) f_k(z)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::NestedSampleSet;
use crate::features::{FeatureMap, InputDistribution, Marginal};
use crate::linalg::{sample_cov, sym_eigvals, Matrix, SymMatrix};
use crate::models::{exp_distribution, exp_pair_models, CostLedger, Exponential, ModelSet};

/// Where a set of statistics came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Provenance {
    ExactOracle,
    Pilot { n_pilot: usize },
    Dataset { rows: usize },
    /// Entered by hand, e.g. copied from a published table.
    Manual {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StatsDoc", into = "StatsDoc")]
pub struct ModelStats {
    sigma: Vec<f64>,
    rho: Vec<f64>,
    mean: Option<Vec<f64>>,
    c1k: Option<Vec<Matrix>>,
    ckk: Option<Vec<Matrix>>,
    provenance: Provenance,
}

/// On-disk JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsDoc {
    #[serde(rename = "K")]
    k: usize,
    sigma: Vec<f64>,
    rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    #[serde(rename = "C1k", default, skip_serializing_if = "Option::is_none")]
    c1k: Option<Vec<Matrix>>,
    #[serde(rename = "Ckk", default, skip_serializing_if = "Option::is_none")]
    ckk: Option<Vec<Matrix>>,
    provenance: Provenance,
}

impl TryFrom<StatsDoc> for ModelStats {
    type Error = Error;

    fn try_from(doc: StatsDoc) -> Result<Self> {
        if doc.sigma.len() != doc.k {
            return Err(Error::DegenerateStats(format!(
                "K = {} but sigma has {} entries",
                doc.k,
                doc.sigma.len()
            )));
        }
        let matrices = match (doc.c1k, doc.ckk) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => {
                return Err(Error::DegenerateStats(
                    "C1k and Ckk must be given together".into(),
                ))
            }
        };
        ModelStats::new(doc.sigma, doc.rho, doc.mean, matrices, doc.provenance)
    }
}

impl From<ModelStats> for StatsDoc {
    fn from(s: ModelStats) -> Self {
        StatsDoc {
            k: s.sigma.len(),
            sigma: s.sigma,
            rho: s.rho,
            mean: s.mean,
            c1k: s.c1k,
            ckk: s.ckk,
            provenance: s.provenance,
        }
    }
}

impl ModelStats {
    /// Validates and assembles statistics. `matrices` holds `(C_1k, C_kk)` for
    /// `k = 1..K`, so the first entry of each list is `C_11`.
    pub fn new(
        sigma: Vec<f64>,
        rho: Vec<f64>,
        mean: Option<Vec<f64>>,
        matrices: Option<(Vec<Matrix>, Vec<Matrix>)>,
        provenance: Provenance,
    ) -> Result<Self> {
        let k = sigma.len();
        if k == 0 {
            return Err(Error::DegenerateStats("no fidelities".into()));
        }
        if rho.len() != k {
            return Err(Error::DegenerateStats(format!(
                "{k} sigmas but {} correlations",
                rho.len()
            )));
        }
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::DegenerateStats(format!("sigma[{i}] = {} is not positive", sigma[i])));
        }
        if (rho[0] - 1.0).abs() > 1e-12 {
            return Err(Error::DegenerateStats(format!("rho[0] must be 1, got {}", rho[0])));
        }
        if let Some(i) = rho.iter().position(|r| !(r.abs() <= 1.0 + 1e-12)) {
            return Err(Error::DegenerateStats(format!("|rho[{i}]| = {} exceeds 1", rho[i])));
        }
        if let Some(m) = &mean {
            if m.len() != k {
                return Err(Error::DegenerateStats(format!("{k} sigmas but {} means", m.len())));
            }
        }
        let (c1k, ckk) = match matrices {
            None => (None, None),
            Some((c1k, ckk)) => {
                if c1k.len() != k || ckk.len() != k {
                    return Err(Error::DegenerateStats(format!(
                        "expected {k} C1k and Ckk matrices, got {} and {}",
                        c1k.len(),
                        ckk.len()
                    )));
                }
                let d = ckk[0].rows();
                for (i, m) in c1k.iter().chain(&ckk).enumerate() {
                    if m.rows() != d || m.cols() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: if m.rows() != d { m.rows() } else { m.cols() },
                        });
                    }
                    if !m.is_finite() {
                        return Err(Error::DegenerateStats(format!("matrix {i} has non-finite entries")));
                    }
                }
                for (i, c) in ckk.iter().enumerate() {
                    check_psd(c, i)?;
                }
                (Some(c1k), Some(ckk))
            }
        };
        let mut rho = rho;
        rho[0] = 1.0;
        Ok(ModelStats {
            sigma,
            rho,
            mean,
            c1k,
            ckk,
            provenance,
        })
    }

    /// Number of fidelities `K`.
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn has_matrices(&self) -> bool {
        self.c1k.is_some()
    }

    /// Feature dimension `d` of the matrix statistics, if present.
    pub fn feature_dim(&self) -> Option<usize> {
        self.ckk.as_ref().map(|c| c[0].rows())
    }

    /// `C_1k` for zero-based fidelity `k` (`k = 0` gives `C_11`).
    pub fn c1k(&self, k: usize) -> Result<&Matrix> {
        self.matrix(&self.c1k, k)
    }

    /// `C_kk` for zero-based fidelity `k`.
    pub fn ckk(&self, k: usize) -> Result<&Matrix> {
        self.matrix(&self.ckk, k)
    }

    fn matrix<'a>(&self, list: &'a Option<Vec<Matrix>>, k: usize) -> Result<&'a Matrix> {
        let list = list.as_ref().ok_or(Error::MissingMatrixStats)?;
        list.get(k).ok_or(Error::FidelityOutOfRange {
            index: k,
            count: list.len(),
        })
    }
}

fn check_psd(c: &Matrix, k: usize) -> Result<()> {
    let sym = SymMatrix::from_symmetrized(c)?;
    let tr = sym.trace();
    let min = sym_eigvals(&sym).last().copied().unwrap_or(0.0);
    if tr < 0.0 || min < -1e-9 * tr.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateStats(format!(
            "C_kk for fidelity {k} is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Sample statistics of paired outputs `outputs[k][i] = f_k(z_i)` with
/// features `features[i] = x(z_i)`.
fn sample_stats<X: AsRef<[f64]>>(features: &[X], outputs: &[&[f64]], provenance: Provenance) -> Result<ModelStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if let Some(bad) = outputs.iter().find(|o| o.len() != n) {
        return Err(Error::CountMismatch(format!(
            "{n} inputs but {} outputs",
            bad.len()
        )));
    }
    let k = outputs.len();
    let mean: Vec<f64> = outputs.iter().map(|o| o.iter().sum::<f64>() / n as f64).collect();
    let cov_with = |a: usize, b: usize| -> f64 {
        let s: f64 = outputs[a]
            .iter()
            .zip(outputs[b])
            .map(|(x, y)| (x - mean[a]) * (y - mean[b]))
            .sum();
        s / (n - 1) as f64
    };
    let sigma: Vec<f64> = (0..k).map(|j| cov_with(j, j).sqrt()).collect();
    let rho: Vec<f64> = (0..k)
        .map(|j| {
            if j == 0 {
                1.0
            } else {
                (cov_with(0, j) / (sigma[0] * sigma[j])).clamp(-1.0, 1.0)
            }
        })
        .collect();

    let g: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|o| {
            features
                .iter()
                .zip(o.iter())
                .map(|(x, y)| x.as_ref().iter().map(|v| v * y).collect())
                .collect()
        })
        .collect();
    let mut c1k = Vec::with_capacity(k);
    let mut ckk = Vec::with_capacity(k);
    for j in 0..k {
        let ckk_j = sample_cov(&g[j], &g[j])?.symmetrized();
        c1k.push(if j == 0 {
            ckk_j.clone()
        } else {
            sample_cov(&g[0], &g[j])?
        });
        ckk.push(ckk_j);
    }
    ModelStats::new(sigma, rho, Some(mean), Some((c1k, ckk)), provenance)
}

/// Pilot statistics from `n_pilot` fresh inputs drawn with `seed`; every
/// model is evaluated on every pilot input and charged to `ledger`.
pub fn pilot_stats(
    set: &ModelSet,
    map: &FeatureMap,
    dist: &InputDistribution,
    n_pilot: usize,
    seed: u64,
    ledger: &CostLedger,
) -> Result<ModelStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pilot_stats_with_rng(set, map, dist, n_pilot, &mut rng, ledger).map(|(s, _)| s)
}

/// Pilot data as drawn: the inputs and each fidelity's outputs on them.
#[derive(Debug, Clone)]
pub struct PilotData {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// As [`pilot_stats`] with a caller-owned generator; also returns the pilot
/// data so it can be reused for training.
pub fn pilot_stats_with_rng<R: Rng + ?Sized>(
    set: &ModelSet,
    map: &FeatureMap,
    dist: &InputDistribution,
    n_pilot: usize,
    rng: &mut R,
    ledger: &CostLedger,
) -> Result<(ModelStats, PilotData)> {
    if n_pilot < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: n_pilot,
        });
    }
    let inputs = dist.sample_n(n_pilot, rng);
    let features = inputs.iter().map(|z| map.eval(z)).collect::<Result<Vec<_>>>()?;
    let outputs = (0..set.len())
        .map(|k| set.evaluate_batch(k, &inputs, ledger))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = outputs.iter().map(|o| o.as_slice()).collect();
    let stats = sample_stats(&features, &refs, Provenance::Pilot { n_pilot })?;
    Ok((stats, PilotData { inputs, outputs }))
}

/// Statistics over the inputs shared by every fidelity of `data`, i.e. its
/// first `m_1` records. No model is evaluated.
pub fn stats_from_dataset(data: &NestedSampleSet, map: &FeatureMap) -> Result<ModelStats> {
    let n = data.counts()[0];
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let features = data.inputs()[..n]
        .iter()
        .map(|z| map.eval(z))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = (0..data.k()).map(|k| &data.outputs(k)[..n]).collect();
    sample_stats(&features, &refs, Provenance::Dataset { rows: n })
}

/// `(1 / (hi - lo)) ∫_lo^hi z^a e^{bz} dz` from the antiderivative
/// `e^{bz} sum_j (-1)^j a!/(a-j)! z^{a-j} / b^{j+1}`.
pub fn uniform_exp_moment(a: u32, b: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    if b == 0.0 {
        let e = a as i32 + 1;
        return (hi.powi(e) - lo.powi(e)) / (e as f64 * width);
    }
    let antiderivative = |z: f64| -> f64 {
        let mut sum = 0.0;
        let mut coef = 1.0; // a!/(a-j)!
        for j in 0..=a {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * coef * z.powi((a - j) as i32) / b.powi(j as i32 + 1);
            coef *= (a - j) as f64;
        }
        (b * z).exp() * sum
    };
    (antiderivative(hi) - antiderivative(lo)) / width
}

fn one_dim_uniform(map: &FeatureMap, dist: &InputDistribution) -> Result<(f64, f64)> {
    if map.input_dim() != 1 || dist.dim() != 1 {
        return Err(Error::UnsupportedDistribution(
            "closed-form exponential statistics need a one-dimensional input".into(),
        ));
    }
    if map.is_standardized() {
        return Err(Error::UnsupportedDistribution(
            "closed-form exponential statistics need an unstandardized feature map".into(),
        ));
    }
    match dist.marginals()[0] {
        Marginal::Uniform { lo, hi } => Ok((lo, hi)),
        Marginal::LogUniform { .. } => Err(Error::UnsupportedDistribution(
            "closed-form exponential statistics need a uniform input".into(),
        )),
    }
}

/// Exact statistics of exponential models `c_k e^{r_k z}` on a uniform input
/// with a one-dimensional monomial feature map.
pub fn exact_stats_exponential(
    models: &[Exponential],
    map: &FeatureMap,
    dist: &InputDistribution,
) -> Result<ModelStats> {
    let (lo, hi) = one_dim_uniform(map, dist)?;
    if models.is_empty() {
        return Err(Error::InvalidModelSet("no models".into()));
    }
    let pw: Vec<u32> = map.exponents().iter().map(|e| e[0]).collect();
    let d = pw.len();
    let m = |a: u32, b: f64| uniform_exp_moment(a, b, lo, hi);
    // E[f_i f_j x x^T] - E[f_i x] E[f_j x]^T
    let cross = |i: &Exponential, j: &Exponential| -> Matrix {
        let rate = i.rate() + j.rate();
        let s = i.scale() * j.scale();
        let mut c = Matrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let ea = i.scale() * m(pw[a], i.rate());
                let eb = j.scale() * m(pw[b], j.rate());
                c[(a, b)] = s * m(pw[a] + pw[b], rate) - ea * eb;
            }
        }
        c
    };
    let mean: Vec<f64> = models.iter().map(|f| f.scale() * m(0, f.rate())).collect();
    let var = |i: usize, j: usize| {
        let (fi, fj) = (&models[i], &models[j]);
        fi.scale() * fj.scale() * m(0, fi.rate() + fj.rate()) - mean[i] * mean[j]
    };
    let sigma: Vec<f64> = (0..models.len()).map(|k| var(k, k).sqrt()).collect();
    let rho: Vec<f64> = (0..models.len())
        .map(|k| if k == 0 { 1.0 } else { var(0, k) / (sigma[0] * sigma[k]) })
        .collect();
    let c1k = models.iter().map(|f| cross(&models[0], f)).collect();
    let ckk = models.iter().map(|f| cross(f, f).symmetrized()).collect();
    ModelStats::new(sigma, rho, Some(mean), Some((c1k, ckk)), Provenance::ExactOracle)
}

/// Exact statistics of the built-in exponential pair on `U(0, 5)` with the
/// quadratic feature map `[1, z, z^2]`.
pub fn exact_stats_exp() -> ModelStats {
    let map = FeatureMap::full_quadratic(1).expect("p = 1 is valid");
    exact_stats_exponential(&exp_pair_models(), &map, &exp_distribution())
        .expect("closed-form statistics of the built-in pair are valid")
}

/// Exact `C_XY = E[x(Z) f_1(Z)]` for the high-fidelity exponential model.
pub fn exact_cxy_exponential(model: &Exponential, map: &FeatureMap, dist: &InputDistribution) -> Result<Vec<f64>> {
    let (lo, hi) = one_dim_uniform(map, dist)?;
    Ok(map
        .exponents()
        .iter()
        .map(|e| model.scale() * uniform_exp_moment(e[0], model.rate(), lo, hi))
        .collect())
}

/// [`exact_cxy_exponential`] for the built-in pair, with `map` over `U(0, 5)`.
pub fn exact_cxy_exp(map: &FeatureMap) -> Result<Vec<f64>> {
    exact_cxy_exponential(&exp_pair_models()[0], map, &exp_distribution())
}
