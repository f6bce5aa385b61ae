//! Steady 1D convection-diffusion-reaction pair on `[0, 1]`.
//!
//! State per node is the fuel mass fraction `Y` and the scaled temperature
//! `θ = T / T_ref`. With a one-step Arrhenius rate `ω = a Y exp(-β/θ)`:
//!
//! ```text
//! κ Y'' - U Y' - ω   = 0
//! κ θ'' - U θ' + q ω = 0
//! Y(0) = Y(1) = Y_in,   T(0) = T_i,   T(1) = T_0
//! ```
//!
//! The inputs are `z = [A_pe, E, T_i, T_0, φ]`: `a = A_pe * pre_exp_scale`,
//! `β = E * activation_scale / T_ref`, `Y_in = fuel_scale * φ`. The model
//! output is the largest nodal temperature in Kelvin. Central differences on
//! a uniform grid give a 2x2 block-tridiagonal Jacobian, solved by block
//! Thomas elimination.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSet};
use crate::error::{Error, Result};
use crate::features::{InputDistribution, Marginal};
use crate::linalg::norm2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdrConfig {
    /// Grid intervals of the high-fidelity model.
    pub n_fine: usize,
    /// Grid intervals of the low-fidelity model.
    pub n_coarse: usize,
    pub kappa: f64,
    pub velocity: f64,
    pub pre_exp_scale: f64,
    pub activation_scale: f64,
    pub t_ref: f64,
    pub heat_release: f64,
    pub fuel_scale: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// First trial step length of the first `damped_iters` Newton iterations.
    pub initial_step: f64,
    pub damped_iters: usize,
}

impl Default for CdrConfig {
    fn default() -> Self {
        CdrConfig {
            n_fine: 100,
            n_coarse: 10,
            kappa: 0.05,
            velocity: 0.5,
            pre_exp_scale: 1e-11,
            activation_scale: 0.3,
            t_ref: 1000.0,
            heat_release: 5000.0,
            fuel_scale: 0.1,
            newton_tol: 1e-8,
            max_iter: 50,
            max_halvings: 30,
            initial_step: 1.0,
            damped_iters: 0,
        }
    }
}

impl CdrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSolverConfig(m.to_string()));
        if self.n_coarse < 3 || self.n_fine <= self.n_coarse {
            return bad("need n_fine > n_coarse >= 3");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if !(self.newton_tol > 0.0) {
            return bad("newton_tol must be positive");
        }
        if !(self.t_ref > 0.0) || !(self.initial_step > 0.0 && self.initial_step <= 1.0) {
            return bad("t_ref must be positive and initial_step in (0, 1]");
        }
        if self.pre_exp_scale < 0.0 || self.max_iter == 0 {
            return bad("pre_exp_scale must be >= 0 and max_iter >= 1");
        }
        Ok(())
    }
}

/// Converged discrete state.
#[derive(Debug, Clone)]
pub struct CdrSolution {
    /// Fuel mass fraction at nodes `0..=n`.
    pub fuel: Vec<f64>,
    /// Temperature in Kelvin at nodes `0..=n`.
    pub temperature: Vec<f64>,
    /// Max-norm of the discrete residual at the returned state.
    pub residual: f64,
    pub newton_iterations: usize,
}

impl CdrSolution {
    pub fn max_temperature(&self) -> f64 {
        self.temperature.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

struct Problem {
    n: usize,
    h: f64,
    kappa: f64,
    velocity: f64,
    rate: f64,
    beta: f64,
    q: f64,
    y_in: f64,
    theta_left: f64,
    theta_right: f64,
}

type Block = [[f64; 2]; 2];

impl Problem {
    fn interior(&self) -> usize {
        self.n - 1
    }

    fn reaction(&self, y: f64, th: f64, s: f64) -> f64 {
        s * self.rate * y * (-self.beta / th).exp()
    }

    fn node(&self, u: &[f64], i: usize) -> (f64, f64) {
        if i == 0 {
            (self.y_in, self.theta_left)
        } else if i == self.n {
            (self.y_in, self.theta_right)
        } else {
            (u[2 * (i - 1)], u[2 * (i - 1) + 1])
        }
    }

    /// Residual at interior nodes, interleaved `(R_Y, R_θ)` per node.
    fn residual(&self, u: &[f64], s: f64, out: &mut [f64]) -> bool {
        let c2 = self.kappa / (self.h * self.h);
        let c1 = self.velocity / (2.0 * self.h);
        for i in 1..self.n {
            let (yl, tl) = self.node(u, i - 1);
            let (y, t) = self.node(u, i);
            let (yr, tr) = self.node(u, i + 1);
            if !(t > 0.0) {
                return false;
            }
            let w = self.reaction(y, t, s);
            out[2 * (i - 1)] = c2 * (yl - 2.0 * y + yr) - c1 * (yr - yl) - w;
            out[2 * (i - 1) + 1] = c2 * (tl - 2.0 * t + tr) - c1 * (tr - tl) + self.q * w;
        }
        out.iter().all(|v| v.is_finite())
    }

    /// Solves `J du = rhs` in place; `J` is block tridiagonal with constant
    /// diagonal off-blocks and a reaction-dependent main diagonal.
    fn solve_linear(&self, u: &[f64], s: f64, rhs: &mut [f64]) -> bool {
        let m = self.interior();
        let c2 = self.kappa / (self.h * self.h);
        let c1 = self.velocity / (2.0 * self.h);
        let lower = c2 + c1;
        let upper = c2 - c1;

        let mut diag: Vec<Block> = Vec::with_capacity(m);
        for i in 0..m {
            let y = u[2 * i];
            let t = u[2 * i + 1];
            let e = s * self.rate * (-self.beta / t).exp();
            let dw_dy = e;
            let dw_dt = e * y * self.beta / (t * t);
            diag.push([
                [-2.0 * c2 - dw_dy, -dw_dt],
                [self.q * dw_dy, -2.0 * c2 + self.q * dw_dt],
            ]);
        }

        // forward elimination; off-diagonal blocks are lower*I and upper*I
        let mut inv: Vec<Block> = Vec::with_capacity(m);
        for i in 0..m {
            if i > 0 {
                let prev = inv[i - 1];
                let f = lower * upper;
                for r in 0..2 {
                    for c in 0..2 {
                        diag[i][r][c] -= f * prev[r][c];
                    }
                }
                let (b0, b1) = (rhs[2 * (i - 1)], rhs[2 * (i - 1) + 1]);
                rhs[2 * i] -= lower * (prev[0][0] * b0 + prev[0][1] * b1);
                rhs[2 * i + 1] -= lower * (prev[1][0] * b0 + prev[1][1] * b1);
            }
            let d = diag[i];
            let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
            if !(det.abs() > 0.0) || !det.is_finite() {
                return false;
            }
            inv.push([[d[1][1] / det, -d[0][1] / det], [-d[1][0] / det, d[0][0] / det]]);
        }
        // back substitution
        for i in (0..m).rev() {
            let (mut b0, mut b1) = (rhs[2 * i], rhs[2 * i + 1]);
            if i + 1 < m {
                b0 -= upper * rhs[2 * (i + 1)];
                b1 -= upper * rhs[2 * (i + 1) + 1];
            }
            let a = inv[i];
            rhs[2 * i] = a[0][0] * b0 + a[0][1] * b1;
            rhs[2 * i + 1] = a[1][0] * b0 + a[1][1] * b1;
        }
        rhs.iter().all(|v| v.is_finite())
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Finite-difference solver at a fixed grid size.
#[derive(Debug, Clone)]
pub struct CdrSolver {
    cfg: CdrConfig,
    n: usize,
    name: String,
}

impl CdrSolver {
    pub fn new(cfg: CdrConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        if n < 3 {
            return Err(Error::InvalidSolverConfig("grid needs at least 3 intervals".into()));
        }
        Ok(CdrSolver {
            cfg,
            n,
            name: format!("cdr1d n={n}"),
        })
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    fn problem(&self, z: &[f64]) -> Result<Problem> {
        if z.len() != 5 {
            return Err(Error::DimensionMismatch {
                expected: 5,
                got: z.len(),
            });
        }
        let c = &self.cfg;
        let (a_pe, e, t_in, t_wall, phi) = (z[0], z[1], z[2], z[3], z[4]);
        if !(t_in > 0.0 && t_wall > 0.0) {
            return Err(Error::SolverDivergence {
                z: z.to_vec(),
                reason: "boundary temperatures must be positive".into(),
            });
        }
        Ok(Problem {
            n: self.n,
            h: 1.0 / self.n as f64,
            kappa: c.kappa,
            velocity: c.velocity,
            rate: c.pre_exp_scale * a_pe,
            beta: c.activation_scale * e / c.t_ref,
            q: c.heat_release / c.t_ref,
            y_in: c.fuel_scale * phi,
            theta_left: t_in / c.t_ref,
            theta_right: t_wall / c.t_ref,
        })
    }

    /// Damped Newton on the source-scaled system `F(u; s) = 0`. Returns the
    /// iteration count, or `None` if the line search or iteration limit fails.
    fn newton(&self, prob: &Problem, u: &mut Vec<f64>, s: f64, tol: f64) -> Option<usize> {
        let len = u.len();
        let mut r = vec![0.0; len];
        if !prob.residual(u, s, &mut r) {
            return None;
        }
        let mut merit = norm2(&r);
        let mut trial = vec![0.0; len];
        let mut r_trial = vec![0.0; len];
        for it in 0..self.cfg.max_iter {
            if norm_inf(&r) <= tol {
                return Some(it);
            }
            let mut du: Vec<f64> = r.iter().map(|v| -v).collect();
            if !prob.solve_linear(u, s, &mut du) {
                return None;
            }
            let mut lambda = if it < self.cfg.damped_iters {
                self.cfg.initial_step
            } else {
                1.0
            };
            let mut accepted = false;
            for _ in 0..=self.cfg.max_halvings {
                for ((t, &x), &d) in trial.iter_mut().zip(u.iter()).zip(&du) {
                    *t = x + lambda * d;
                }
                if prob.residual(&trial, s, &mut r_trial) {
                    let m = norm2(&r_trial);
                    if m < (1.0 - 1e-4 * lambda) * merit || norm_inf(&r_trial) <= tol {
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                return None;
            }
            std::mem::swap(u, &mut trial);
            std::mem::swap(&mut r, &mut r_trial);
            merit = norm2(&r);
        }
        (norm_inf(&r) <= tol).then_some(self.cfg.max_iter)
    }

    /// Solves from the linear interpolation of the boundary data. If Newton
    /// fails on the full source, the source is ramped in from zero with an
    /// adaptive continuation step.
    pub fn solve(&self, z: &[f64]) -> Result<CdrSolution> {
        let prob = self.problem(z)?;
        let m = prob.interior();
        let mut u = Vec::with_capacity(2 * m);
        for i in 1..prob.n {
            let x = i as f64 * prob.h;
            u.push(prob.y_in);
            u.push(prob.theta_left + (prob.theta_right - prob.theta_left) * x);
        }
        let tol = self.cfg.newton_tol;

        let mut iterations = 0;
        let mut direct = u.clone();
        match self.newton(&prob, &mut direct, 1.0, tol) {
            Some(it) => {
                iterations += it;
                u = direct;
            }
            None => {
                let mut s = 0.0_f64;
                let mut ds = 0.5_f64;
                while s < 1.0 {
                    let target = (s + ds).min(1.0);
                    let mut next = u.clone();
                    match self.newton(&prob, &mut next, target, tol) {
                        Some(it) => {
                            iterations += it;
                            u = next;
                            s = target;
                            ds = (2.0 * ds).min(1.0);
                        }
                        None => {
                            ds *= 0.5;
                            if ds < 1e-6 {
                                return Err(Error::SolverDivergence {
                                    z: z.to_vec(),
                                    reason: format!("continuation stalled at source scale {s:.6}"),
                                });
                            }
                        }
                    }
                }
            }
        }

        let mut r = vec![0.0; u.len()];
        prob.residual(&u, 1.0, &mut r);
        let residual = norm_inf(&r);
        if !(residual <= tol) {
            return Err(Error::SolverDivergence {
                z: z.to_vec(),
                reason: format!("residual {residual:e} above tolerance"),
            });
        }
        let mut fuel = Vec::with_capacity(prob.n + 1);
        let mut temperature = Vec::with_capacity(prob.n + 1);
        for i in 0..=prob.n {
            let (y, t) = prob.node(&u, i);
            fuel.push(y);
            temperature.push(t * self.cfg.t_ref);
        }
        Ok(CdrSolution {
            fuel,
            temperature,
            residual,
            newton_iterations: iterations,
        })
    }
}

impl Model for CdrSolver {
    fn eval(&self, z: &[f64]) -> Result<f64> {
        Ok(self.solve(z)?.max_temperature())
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn input_dim(&self) -> usize {
        5
    }
}

/// Fine/coarse pair with costs `(1, n_coarse / n_fine)`.
pub fn cdr_pair(cfg: &CdrConfig) -> Result<ModelSet> {
    cfg.validate()?;
    let fine = CdrSolver::new(cfg.clone(), cfg.n_fine)?;
    let coarse = CdrSolver::new(cfg.clone(), cfg.n_coarse)?;
    ModelSet::new(
        "cdr1d",
        vec![Arc::new(fine), Arc::new(coarse)],
        vec![1.0, cfg.n_coarse as f64 / cfg.n_fine as f64],
    )
}

/// `[A_pe, E, T_i, T_0, φ]`: log-uniform pre-exponential factor and
/// activation energy, uniform temperatures and equivalence ratio.
pub fn cdr_distribution() -> InputDistribution {
    InputDistribution::new(vec![
        Marginal::log_uniform(5.5e11, 1.5e12).expect("valid"),
        Marginal::log_uniform(1.5e3, 9.5e3).expect("valid"),
        Marginal::uniform(200.0, 400.0).expect("valid"),
        Marginal::uniform(850.0, 1000.0).expect("valid"),
        Marginal::uniform(0.5, 1.5).expect("valid"),
    ])
    .expect("valid")
}
