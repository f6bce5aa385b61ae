//! Sample allocation `m_1 <= ... <= m_K` for a computational budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::validate_costs;
use crate::statistics::ModelStats;

/// Denominator of the ratio `r_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// `1 - ρ_1k^2`.
    #[default]
    PerFidelity,
    /// `1 - ρ_12^2` for every `k`, as in standard multifidelity Monte Carlo.
    Mfmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationOptions {
    pub denominator: Denominator,
    /// Repair ties `m_k = m_{k-1}` to `m_{k-1} + 1` where the budget allows.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// `m_1..m_K`.
    pub m: Vec<usize>,
    /// Budget the allocation was computed for, if any.
    pub budget: Option<f64>,
    /// `sum_k m_k w_k`.
    pub realized_cost: f64,
}

impl Allocation {
    pub fn counts(&self) -> &[usize] {
        &self.m
    }
}

/// An accepted allocation together with non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedAllocation {
    pub allocation: Allocation,
    pub warnings: Vec<String>,
}

fn realized_cost(m: &[usize], costs: &[f64]) -> f64 {
    m.iter().zip(costs).map(|(&n, &w)| n as f64 * w).sum()
}

/// Ratios `r_1 = 1, r_k = sqrt(w_1 (ρ_k^2 - ρ_{k+1}^2) / (w_k (1 - ρ^2)))`.
pub fn allocation_ratios(rho: &[f64], costs: &[f64], denominator: Denominator) -> Result<Vec<f64>> {
    let k = rho.len();
    if costs.len() != k {
        return Err(Error::CountMismatch(format!("{k} correlations but {} costs", costs.len())));
    }
    let rho2: Vec<f64> = rho.iter().map(|r| r * r).collect();
    if (rho2[0] - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidCorrelationOrdering(format!("rho_11 = {}", rho[0])));
    }
    for j in 1..k {
        if !(rho2[j] < rho2[j - 1]) || !(rho2[j] < 1.0) {
            return Err(Error::InvalidCorrelationOrdering(format!("{rho:?}")));
        }
    }
    let mut r = vec![1.0; k];
    for j in 1..k {
        let next = if j + 1 < k { rho2[j + 1] } else { 0.0 };
        let den = match denominator {
            Denominator::PerFidelity => 1.0 - rho2[j],
            Denominator::Mfmc => 1.0 - rho2[1],
        };
        if !(den > 0.0) {
            return Err(Error::InvalidCorrelationOrdering(format!(
                "non-positive denominator for fidelity {}",
                j + 1
            )));
        }
        r[j] = (costs[0] * (rho2[j] - next) / (costs[j] * den)).sqrt();
    }
    Ok(r)
}

/// Budget allocation with default options.
pub fn allocate(stats: &ModelStats, costs: &[f64], budget: f64) -> Result<Allocation> {
    allocate_with(stats, costs, budget, AllocationOptions::default())
}

/// `m_1 = floor(p / w^T r)` and `m_k = floor(m_1^real r_k)`, then repaired
/// to be nondecreasing. If `m_1^real < 1`, `m_1` is clamped to one and the
/// remaining budget `p - w_1` is spread over `k >= 2` in proportion to `r_k`.
pub fn allocate_with(stats: &ModelStats, costs: &[f64], budget: f64, opts: AllocationOptions) -> Result<Allocation> {
    validate_costs(costs)?;
    let k = costs.len();
    if stats.k() != k {
        return Err(Error::CountMismatch(format!("{} fidelities in stats, {k} costs", stats.k())));
    }
    if !(budget >= costs[0]) {
        return Err(Error::BudgetTooSmall {
            budget,
            cost: costs[0],
        });
    }
    let r = allocation_ratios(stats.rho(), costs, opts.denominator)?;
    // Normalizing by w_1 makes the result invariant to rescaling costs and budget together.
    let w: Vec<f64> = costs.iter().map(|c| c / costs[0]).collect();
    let p = budget / costs[0];
    let wr: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
    let m1_real = p / wr;

    let mut m = vec![0usize; k];
    let mut base: Vec<f64> = r.iter().map(|rk| m1_real * rk).collect();
    if m1_real < 1.0 {
        let rest: f64 = w[1..].iter().zip(&r[1..]).map(|(a, b)| a * b).sum();
        base[0] = 1.0;
        for j in 1..k {
            base[j] = if rest > 0.0 { (p - 1.0) / rest * r[j] } else { 0.0 };
        }
    }
    let slack = p + w[k - 1];
    let mut m1 = (base[0].floor() as usize).max(1);
    loop {
        m[0] = m1;
        for j in 1..k {
            m[j] = (base[j].floor() as usize).max(m[j - 1]);
        }
        if realized_cost(&m, &w) <= slack * (1.0 + 1e-12) || m1 == 1 {
            break;
        }
        m1 -= 1;
    }
    if realized_cost(&m, &w) > slack * (1.0 + 1e-12) {
        return Err(Error::BudgetTooSmall {
            budget,
            cost: realized_cost(&m, costs),
        });
    }
    if opts.strict {
        for j in 1..k {
            if m[j] <= m[j - 1] {
                let bump = m[j - 1] + 1 - m[j];
                if realized_cost(&m, &w) + bump as f64 * w[j] <= p {
                    m[j] += bump;
                }
            }
        }
    }
    Ok(Allocation {
        realized_cost: realized_cost(&m, costs),
        m,
        budget: Some(budget),
    })
}

/// High-fidelity-only allocation `n = floor(p / w_1)` at the same budget.
pub fn single_fidelity_allocation(costs: &[f64], budget: f64) -> Result<Allocation> {
    validate_costs(costs)?;
    let n = (budget / costs[0]).floor();
    if !(n >= 1.0) {
        return Err(Error::BudgetTooSmall {
            budget,
            cost: costs[0],
        });
    }
    let n = n as usize;
    Ok(Allocation {
        m: vec![n],
        budget: Some(budget),
        realized_cost: n as f64 * costs[0],
    })
}

/// Checks a given allocation without changing it.
pub fn validate_allocation(m: &[usize], costs: &[f64], budget: Option<f64>) -> Result<CheckedAllocation> {
    validate_costs(costs)?;
    if m.len() != costs.len() {
        return Err(Error::CountMismatch(format!("{} counts for {} costs", m.len(), costs.len())));
    }
    if m[0] == 0 {
        return Err(Error::ZeroHighFidelity);
    }
    let mut warnings = Vec::new();
    for j in 1..m.len() {
        if m[j] < m[j - 1] {
            return Err(Error::NonMonotoneAllocation {
                k: j,
                prev: m[j - 1],
                next: m[j],
            });
        }
        if m[j] == m[j - 1] {
            warnings.push(format!(
                "m_{} = m_{} = {}: the correction term of fidelity {} vanishes",
                j,
                j + 1,
                m[j],
                j + 1
            ));
        }
    }
    let cost = realized_cost(m, costs);
    if let Some(p) = budget {
        if cost > p {
            warnings.push(format!("realized cost {cost} exceeds budget {p}"));
        }
    }
    Ok(CheckedAllocation {
        allocation: Allocation {
            m: m.to_vec(),
            budget,
            realized_cost: cost,
        },
        warnings,
    })
}
