use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::assemble::Layout;
use super::backend::{RawSolution, SolveStatus};
use super::problem::{CovSteerProblem, TerminalMeanMode};
use crate::chance::ConstraintTarget;
use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, min_eigenvalue, right_solve_spd, symmetrize};
use crate::linsys::FeedbackPolicy;

/// Smallest admissible eigenvalue of a planned covariance before gain extraction.
pub const MIN_COVARIANCE_EIGENVALUE: f64 = 1e-10;

/// Optimal steering policy and its predicted uncertainty tube.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovSteerSolution {
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub u: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub status: SolveStatus,
    /// `||Y_k - U_k Sigma_k^{-1} U_k^T||_F / max(1, ||Y_k||_F)` per step.
    pub relaxation_gap: Vec<f64>,
    pub solve_seconds: f64,
}

impl CovSteerSolution {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn max_relaxation_gap(&self) -> f64 {
        self.relaxation_gap.iter().copied().fold(0.0, f64::max)
    }

    /// Position block (first three states) of the planned covariance at step `k`.
    pub fn position_covariance(&self, k: usize) -> DMatrix<f64> {
        self.sigma[k].view((0, 0), (3, 3)).into_owned()
    }
}

impl FeedbackPolicy for CovSteerSolution {
    fn steps(&self) -> usize {
        self.gains.len()
    }

    fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    fn feedforward(&self, k: usize) -> &DVector<f64> {
        &self.feedforward[k]
    }
}

/// Reads the raw blocks and forms `K_k = U_k Sigma_k^{-1}` by Cholesky solves.
pub fn extract_policy(
    raw: &RawSolution,
    layout: &Layout,
    p: &CovSteerProblem,
) -> Result<CovSteerSolution> {
    if raw.status == SolveStatus::Infeasible {
        return Err(Error::Backend(format!(
            "cannot extract a policy from an infeasible solve ({})",
            raw.detail
        )));
    }
    let horizon = p.horizon();
    let x = &raw.x;
    let sigma: Vec<DMatrix<f64>> = layout
        .sigma
        .iter()
        .map(|b| symmetrize(&b.read_matrix(x)))
        .collect();
    let mu: Vec<DVector<f64>> = layout.mean.iter().map(|b| b.read_vector(x)).collect();
    let mut gains = Vec::with_capacity(horizon);
    let mut u = Vec::with_capacity(horizon);
    let mut y = Vec::with_capacity(horizon);
    let mut gaps = Vec::with_capacity(horizon);
    let mut feedforward = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let lo = min_eigenvalue(&sigma[k]);
        if lo < MIN_COVARIANCE_EIGENVALUE {
            return Err(Error::Conditioning {
                step: k,
                detail: format!("minimum eigenvalue {lo:e} below {MIN_COVARIANCE_EIGENVALUE:e}"),
            });
        }
        let uk = layout.gain_cov[k].read_matrix(x);
        let yk = symmetrize(&layout.input_cov[k].read_matrix(x));
        let gain = right_solve_spd(&uk, &sigma[k]).ok_or_else(|| Error::Conditioning {
            step: k,
            detail: "Cholesky factorization failed".into(),
        })?;
        let implied = &gain * uk.transpose();
        gaps.push((&yk - implied).norm() / yk.norm().max(1.0));
        gains.push(gain);
        u.push(uk);
        y.push(yk);
        feedforward.push(layout.feedforward[k].read_vector(x));
    }
    Ok(CovSteerSolution {
        mu,
        sigma,
        gains,
        feedforward,
        u,
        y,
        objective: raw.objective,
        status: raw.status,
        relaxation_gap: gaps,
        solve_seconds: raw.solve_seconds,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValidationTolerances {
    pub dynamics: f64,
    pub terminal: f64,
    pub constraint: f64,
    pub waypoint: f64,
    pub relaxation_gap: f64,
}

impl Default for ValidationTolerances {
    fn default() -> Self {
        Self {
            dynamics: 1e-7,
            terminal: 1e-7,
            constraint: 1e-7,
            waypoint: 1e-6,
            relaxation_gap: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub label: String,
    /// Largest violation over the window (negative means slack).
    pub worst: f64,
    pub worst_step: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `||residual||_F / max(1, ||Sigma_{k+1}||_F)` per step.
    pub covariance_dynamics: Vec<f64>,
    pub max_covariance_dynamics: f64,
    pub max_mean_dynamics: f64,
    pub initial_error: f64,
    /// `lambda_max(Sigma_N - Sigma_f)`.
    pub terminal_excess: f64,
    pub terminal_mean_error: Option<f64>,
    pub chance: Vec<ConstraintResidual>,
    pub covariance_bounds: Vec<ConstraintResidual>,
    pub waypoint_errors: Vec<f64>,
    pub max_relaxation_gap: f64,
    pub min_covariance_eigenvalue: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

pub fn validate(sol: &CovSteerSolution, p: &CovSteerProblem) -> ValidationReport {
    validate_with(sol, p, &ValidationTolerances::default())
}

pub fn validate_with(
    sol: &CovSteerSolution,
    p: &CovSteerProblem,
    tol: &ValidationTolerances,
) -> ValidationReport {
    let sys = &p.sys;
    let horizon = p.horizon();
    let mut cov_dyn = Vec::with_capacity(horizon);
    let mut mean_dyn: f64 = 0.0;
    for k in 0..horizon {
        let (a, b, d) = (sys.a(k), sys.b(k), sys.d(k));
        let bua = b * &sol.u[k] * a.transpose();
        let predicted = a * &sol.sigma[k] * a.transpose()
            + &bua
            + bua.transpose()
            + b * &sol.y[k] * b.transpose()
            + d * d.transpose();
        let next = &sol.sigma[k + 1];
        cov_dyn.push((predicted - next).norm() / next.norm().max(1.0));
        let mean_res = a * &sol.mu[k] + b * &sol.feedforward[k] - &sol.mu[k + 1];
        mean_dyn = mean_dyn.max(mean_res.amax());
    }
    let initial_error = (&sol.sigma[0] - &p.boundary.sigma_i)
        .amax()
        .max((&sol.mu[0] - &p.boundary.mu_i).amax());
    let terminal_excess = max_eigenvalue(&(&sol.sigma[horizon] - &p.boundary.sigma_f));
    let terminal_mean_error = match (p.terminal_mean_mode, &p.boundary.mu_f) {
        (TerminalMeanMode::Equality, Some(mf)) => Some((&sol.mu[horizon] - mf).amax()),
        _ => None,
    };

    let mut chance = Vec::new();
    for (c, spec) in p.chance.iter().enumerate() {
        let target = spec.constraint.target;
        let mut worst = f64::NEG_INFINITY;
        let mut worst_step = spec.constraint.window.start;
        for k in spec.constraint.window.steps(target, horizon) {
            let Ok(s) = spec.surrogate_at(k, horizon) else {
                continue;
            };
            let value = match target {
                ConstraintTarget::State => s.value(&sol.mu[k], &sol.sigma[k]),
                ConstraintTarget::Input => s.value(&sol.feedforward[k], &sol.y[k]),
            };
            if value > worst {
                worst = value;
                worst_step = k;
            }
        }
        chance.push(ConstraintResidual {
            label: format!("chance[{c}]"),
            worst,
            worst_step,
        });
    }

    let mut covariance_bounds = Vec::new();
    for (c, bound) in p.cov_bounds.iter().enumerate() {
        let mut worst = f64::NEG_INFINITY;
        let mut worst_step = bound.window.start;
        for k in bound.window.steps(bound.target, horizon) {
            let cov = match bound.target {
                ConstraintTarget::State => &sol.sigma[k],
                ConstraintTarget::Input => &sol.y[k],
            };
            let v = bound.violation(cov);
            if v > worst {
                worst = v;
                worst_step = k;
            }
        }
        covariance_bounds.push(ConstraintResidual {
            label: format!("covariance_bound[{c}]"),
            worst,
            worst_step,
        });
    }

    let waypoint_errors: Vec<f64> = p
        .waypoints
        .iter()
        .map(|w| (&w.selector * &sol.mu[w.step] - &w.target).amax())
        .collect();
    let min_eig = sol
        .sigma
        .iter()
        .map(min_eigenvalue)
        .fold(f64::INFINITY, f64::min);

    let max_cov_dyn = cov_dyn.iter().copied().fold(0.0, f64::max);
    let max_gap = sol.max_relaxation_gap();
    let mut failures = Vec::new();
    if sol.status != SolveStatus::Optimal {
        failures.push(format!("solver status {:?}", sol.status));
    }
    if max_cov_dyn > tol.dynamics {
        failures.push(format!("covariance dynamics residual {max_cov_dyn:e}"));
    }
    if mean_dyn > tol.dynamics {
        failures.push(format!("mean dynamics residual {mean_dyn:e}"));
    }
    if initial_error > tol.dynamics {
        failures.push(format!("initial boundary error {initial_error:e}"));
    }
    if terminal_excess > tol.terminal {
        failures.push(format!("terminal covariance excess {terminal_excess:e}"));
    }
    if let Some(e) = terminal_mean_error {
        if e > tol.waypoint {
            failures.push(format!("terminal mean error {e:e}"));
        }
    }
    for r in chance.iter().chain(&covariance_bounds) {
        if r.worst > tol.constraint {
            failures.push(format!("{} violated by {:e} at step {}", r.label, r.worst, r.worst_step));
        }
    }
    for (i, e) in waypoint_errors.iter().enumerate() {
        if *e > tol.waypoint {
            failures.push(format!("waypoint[{i}] error {e:e}"));
        }
    }
    if max_gap > tol.relaxation_gap {
        failures.push(format!("relaxation gap {max_gap:e}"));
    }
    ValidationReport {
        covariance_dynamics: cov_dyn,
        max_covariance_dynamics: max_cov_dyn,
        max_mean_dynamics: mean_dyn,
        initial_error,
        terminal_excess,
        terminal_mean_error,
        chance,
        covariance_bounds,
        waypoint_errors,
        max_relaxation_gap: max_gap,
        min_covariance_eigenvalue: min_eig,
        pass: failures.is_empty(),
        failures,
    }
}
