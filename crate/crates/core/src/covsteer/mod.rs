//! Covariance steering: program assembly, conic backends and policy extraction.

pub mod assemble;
pub mod backend;
pub mod problem;
pub mod program;
pub mod solution;

pub use assemble::{
    assemble, assemble_scaled, assemble_with, AssembledProgram, Layout, QuadraticCostMode,
    VariableScaling,
};
pub use backend::{
    backend_from_env, backend_from_name, backend_with_tolerances, ClarabelBackend, RawSolution, SolveStatus, SolverBackend,
    SolverTolerances, BACKEND_ENV,
};
pub use problem::{
    BetaTaper, ChanceSpec, CovSteerProblem, SurrogateReference, TerminalMeanMode, Waypoint,
};
pub use program::{AffineExpr, Cone, ConicProgram, MatExpr, ProgramStats, VarBlock, VarKind};
pub use solution::{
    extract_policy, validate, validate_with, ConstraintResidual, CovSteerSolution,
    ValidationReport, ValidationTolerances,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chance::ConstraintTarget;
use crate::error::{Error, Result};

/// Regularization added to a pilot reference covariance that is singular along `alpha`.
const REFERENCE_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct PlanOptions {
    pub mode: QuadraticCostMode,
    /// Extra fixed-point passes re-linearizing around the previous solution (0 = solve once).
    pub relinearize: usize,
    /// Stop re-linearizing once every `beta` moves less than this.
    pub beta_tolerance: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            mode: QuadraticCostMode::Epigraph,
            relinearize: 0,
            beta_tolerance: 1e-6,
        }
    }
}

/// Diagnostics from [`plan`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PlanLog {
    pub pilot_seconds: Option<f64>,
    pub relinearization_passes: usize,
    /// Largest `beta` change of each re-linearization pass.
    pub beta_changes: Vec<f64>,
}

/// Solves the problem as posed: assemble, solve, extract. Pilot references must be resolved.
pub fn solve_problem(
    p: &CovSteerProblem,
    backend: &mut dyn SolverBackend,
    mode: QuadraticCostMode,
) -> Result<(CovSteerSolution, RawSolution)> {
    let assembled = assemble_with(p, mode)?;
    let raw = backend.solve(&assembled.program)?;
    if raw.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible(raw.detail.clone()));
    }
    let sol = extract_policy(&raw, &assembled.layout, p)?;
    Ok((sol, raw))
}

/// Per-step reference covariances taken from a solution, for the given target.
fn references_from(sol: &CovSteerSolution, target: ConstraintTarget) -> Vec<DMatrix<f64>> {
    match target {
        ConstraintTarget::State => sol.sigma.clone(),
        ConstraintTarget::Input => sol.y.clone(),
    }
}

/// Replaces pilot references (and, with `all`, every non-fixed reference) with per-step
/// covariances from `sol`.
fn resolve_references(p: &CovSteerProblem, sol: &CovSteerSolution, all: bool) -> CovSteerProblem {
    let mut out = p.clone();
    for spec in &mut out.chance {
        let replace = match spec.reference {
            SurrogateReference::Pilot => true,
            SurrogateReference::PerStep(_) | SurrogateReference::Covariance(_) => all,
            _ => false,
        };
        if !replace {
            continue;
        }
        let alpha = &spec.constraint.alpha;
        let refs = references_from(sol, spec.constraint.target)
            .into_iter()
            .map(|r| {
                let v = (alpha.transpose() * &r * alpha)[(0, 0)];
                if v > REFERENCE_FLOOR * alpha.norm_squared() {
                    r
                } else {
                    let dim = r.nrows();
                    r + DMatrix::identity(dim, dim) * REFERENCE_FLOOR
                }
            })
            .collect();
        spec.reference = SurrogateReference::PerStep(refs);
    }
    out
}

fn beta_change(a: &CovSteerProblem, b: &CovSteerProblem) -> Result<f64> {
    let horizon = a.horizon();
    let mut worst: f64 = 0.0;
    for (sa, sb) in a.chance.iter().zip(&b.chance) {
        for k in sa.constraint.window.steps(sa.constraint.target, horizon) {
            let ba = sa.surrogate_at(k, horizon)?.beta;
            let bb = sb.surrogate_at(k, horizon)?.beta;
            worst = worst.max((ba - bb).abs());
        }
    }
    Ok(worst)
}

/// Full planning pipeline.
///
/// Pilot references are resolved by first solving without chance constraints. With
/// `relinearize > 0`, per-step surrogates are refreshed around the latest solution until
/// `beta` settles. Returns the problem actually solved alongside the solution.
pub fn plan(
    p: &CovSteerProblem,
    backend: &mut dyn SolverBackend,
    opts: &PlanOptions,
) -> Result<(CovSteerSolution, CovSteerProblem, PlanLog)> {
    p.check()?;
    let mut log = PlanLog::default();
    let mut current = if p.needs_pilot() {
        let (pilot, raw) = solve_problem(&p.without_chance(), backend, opts.mode)?;
        log.pilot_seconds = Some(raw.solve_seconds);
        resolve_references(p, &pilot, false)
    } else {
        p.clone()
    };
    let (mut sol, _) = solve_problem(&current, backend, opts.mode)?;
    for _ in 0..opts.relinearize {
        let next = resolve_references(&current, &sol, true);
        let change = beta_change(&current, &next)?;
        log.beta_changes.push(change);
        if change < opts.beta_tolerance {
            break;
        }
        let (s, _) = solve_problem(&next, backend, opts.mode)?;
        sol = s;
        current = next;
        log.relinearization_passes += 1;
    }
    Ok((sol, current, log))
}
