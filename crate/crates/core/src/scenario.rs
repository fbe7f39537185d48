//! Declarative scenario files (TOML).
//!
//! Keys carry their unit where one applies (`dt_s`, `mean_mps`). Unknown keys are
//! rejected. The shipped scenarios are compiled in and available through [`builtin`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chance::{
    AffineChanceConstraint, ConstraintTarget, LinearizedSurrogate, PartialCovarianceBound,
    StepWindow,
};
use crate::covsteer::{
    BetaTaper, ChanceSpec, CovSteerProblem, PlanOptions, QuadraticCostMode, SolverTolerances,
    SurrogateReference, TerminalMeanMode,
};
use crate::error::{Error, Result};
use crate::linsys::{build_double_integrator, CostWeights, GaussianBoundary};
use crate::quadsim::{EstimatorKind, SimConfig};

pub const BUILTIN_SCENARIOS: [(&str, &str); 3] = [
    ("figure8", include_str!("../../../scenarios/figure8.toml")),
    ("landing", include_str!("../../../scenarios/landing.toml")),
    ("minimal", include_str!("../../../scenarios/minimal.toml")),
];

/// Source text of a shipped scenario.
pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub system: SystemSection,
    pub boundary: BoundarySection,
    pub weights: WeightsSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<WaypointSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariance_bounds: Vec<CovarianceBoundSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chance: Vec<ChanceSection>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub lqr: LqrSection,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub dt_s: f64,
    pub horizon: usize,
    /// Diagonal of the position block of `D`.
    pub noise_pos: f64,
    /// Diagonal of the velocity block of `D`.
    pub noise_vel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    /// `[r (m); v (m/s)]`.
    pub mu_i: Vec<f64>,
    pub sigma_i_diag: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_f: Option<Vec<f64>>,
    pub sigma_f_diag: Vec<f64>,
    #[serde(default)]
    pub terminal_mean: TerminalMeanMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub qbar_diag: Vec<f64>,
    pub rbar_diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSection {
    pub step: usize,
    pub position_m: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    /// First three states.
    Position,
    /// Whole state (or input) vector.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceBoundSection {
    pub target: ConstraintTarget,
    pub selector: SelectorKind,
    pub cap_diag: Vec<f64>,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    /// Surrogate constants `ell`, `beta` given in the file.
    Fixed,
    /// Linearize around the initial covariance.
    Initial,
    /// Linearize around a chance-free pilot solution.
    Pilot,
    /// Linearize around the diagonal covariance `reference_diag`.
    Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub target: ConstraintTarget,
    pub alpha: Vec<f64>,
    pub bound: f64,
    /// Required probability of `alpha' x <= bound`.
    pub delta: f64,
    pub start: usize,
    pub end: usize,
    pub reference: ReferenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taper: Option<BetaTaper>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub feasibility_tol: f64,
    pub gap_rel_tol: f64,
    pub gap_abs_tol: f64,
    pub max_iterations: u32,
    pub relinearize_passes: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let t = SolverTolerances::default();
        Self {
            feasibility_tol: t.feasibility,
            gap_rel_tol: t.gap_rel,
            gap_abs_tol: t.gap_abs,
            max_iterations: t.max_iterations,
            relinearize_passes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrSection {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    /// Raise the position block of `Q` until the stationary position covariance meets the
    /// scenario's position cap (or the terminal position covariance when there is none).
    pub match_cap: bool,
}

impl Default for LqrSection {
    fn default() -> Self {
        Self {
            q_diag: vec![1.0; 6],
            r_diag: vec![1.0; 3],
            match_cap: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Ocs,
    Lqr,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Ocs => "ocs",
            ControllerKind::Lqr => "lqr",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ocs" => Ok(ControllerKind::Ocs),
            "lqr" => Ok(ControllerKind::Lqr),
            other => Err(crate::error::invalid(format!("unknown controller '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub controller: ControllerKind,
    pub estimator: EstimatorKind,
    pub rollouts: usize,
    pub seed: u64,
    /// Add the planning model's `D w` to the simulated state every control step.
    pub inject_process_noise: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            controller: ControllerKind::Ocs,
            estimator: EstimatorKind::Ekf,
            rollouts: 10,
            seed: 0,
            inject_process_noise: false,
        }
    }
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

fn config_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn expect_len(field: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(config_error(field, format!("expected {n} entries, found {}", v.len())));
    }
    Ok(())
}

fn window(field: &str, start: usize, end: usize, horizon: usize) -> Result<StepWindow> {
    if end > horizon {
        return Err(config_error(field, format!("window end {end} beyond horizon {horizon}")));
    }
    StepWindow::new(start, end).map_err(|e| config_error(field, e))
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// A builtin name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match builtin(name_or_path) {
            Some(text) => Self::from_toml(text),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    /// Structural checks beyond parsing; also builds the problem once.
    pub fn validate(&self) -> Result<()> {
        if self.experiment.rollouts == 0 {
            return Err(config_error("experiment.rollouts", "must be at least 1"));
        }
        self.problem().map(|_| ())
    }

    pub fn problem(&self) -> Result<CovSteerProblem> {
        let s = &self.system;
        if s.horizon == 0 {
            return Err(config_error("system.horizon", "must be at least 1"));
        }
        if !(s.dt_s > 0.0) {
            return Err(config_error("system.dt_s", "must be positive"));
        }
        let sys = build_double_integrator(s.dt_s, s.noise_pos, s.noise_vel, s.horizon)?;
        let (n, m, horizon) = (6, 3, s.horizon);

        let b = &self.boundary;
        expect_len("boundary.mu_i", &b.mu_i, n)?;
        expect_len("boundary.sigma_i_diag", &b.sigma_i_diag, n)?;
        expect_len("boundary.sigma_f_diag", &b.sigma_f_diag, n)?;
        if let Some(mf) = &b.mu_f {
            expect_len("boundary.mu_f", mf, n)?;
        }
        let boundary = GaussianBoundary::new(
            DVector::from_column_slice(&b.mu_i),
            diag(&b.sigma_i_diag),
            b.mu_f.as_ref().map(|v| DVector::from_column_slice(v)),
            diag(&b.sigma_f_diag),
        )
        .map_err(|e| config_error("boundary", e))?;

        let w = &self.weights;
        expect_len("weights.q_diag", &w.q_diag, n)?;
        expect_len("weights.r_diag", &w.r_diag, m)?;
        expect_len("weights.qbar_diag", &w.qbar_diag, n)?;
        expect_len("weights.rbar_diag", &w.rbar_diag, m)?;
        let weights = CostWeights::constant(
            diag(&w.q_diag),
            diag(&w.r_diag),
            diag(&w.qbar_diag),
            diag(&w.rbar_diag),
            horizon,
        )
        .map_err(|e| config_error("weights", e))?;

        let mut p = CovSteerProblem::new(sys, boundary, weights);
        p.terminal_mean_mode = b.terminal_mean;

        for (i, wp) in self.waypoints.iter().enumerate() {
            if wp.step > horizon {
                return Err(config_error(
                    &format!("waypoints[{i}].step"),
                    format!("{} beyond horizon {horizon}", wp.step),
                ));
            }
            p.waypoints
                .push(CovSteerProblem::position_waypoint(wp.step, wp.position_m));
        }

        for (i, cb) in self.covariance_bounds.iter().enumerate() {
            let field = format!("covariance_bounds[{i}]");
            let dim = match cb.target {
                ConstraintTarget::State => n,
                ConstraintTarget::Input => m,
            };
            let selector = match cb.selector {
                SelectorKind::Position if cb.target == ConstraintTarget::State => {
                    PartialCovarianceBound::position_selector()
                }
                SelectorKind::Position => {
                    return Err(config_error(&field, "position selector needs a state target"))
                }
                SelectorKind::Full => DMatrix::identity(dim, dim),
            };
            expect_len(&format!("{field}.cap_diag"), &cb.cap_diag, selector.ncols())?;
            let win = window(&field, cb.start, cb.end, horizon)?;
            p.cov_bounds.push(
                PartialCovarianceBound::new(selector, diag(&cb.cap_diag), cb.target, win)
                    .map_err(|e| config_error(&field, e))?,
            );
        }

        for (i, c) in self.chance.iter().enumerate() {
            let field = format!("chance[{i}]");
            let dim = match c.target {
                ConstraintTarget::State => n,
                ConstraintTarget::Input => m,
            };
            expect_len(&format!("{field}.alpha"), &c.alpha, dim)?;
            let win = window(&field, c.start, c.end, horizon)?;
            let alpha = DVector::from_column_slice(&c.alpha);
            let constraint = AffineChanceConstraint::new(alpha.clone(), c.bound, c.delta, c.target, win)
                .map_err(|e| config_error(&field, e))?;
            let reference = match c.reference {
                ReferenceKind::Fixed => {
                    let ell = c
                        .ell
                        .as_ref()
                        .ok_or_else(|| config_error(&format!("{field}.ell"), "required for fixed reference"))?;
                    expect_len(&format!("{field}.ell"), ell, dim)?;
                    let beta = c
                        .beta
                        .ok_or_else(|| config_error(&format!("{field}.beta"), "required for fixed reference"))?;
                    SurrogateReference::Fixed(LinearizedSurrogate {
                        ell: DVector::from_column_slice(ell),
                        alpha,
                        beta,
                        target: c.target,
                    })
                }
                ReferenceKind::Initial => {
                    if c.target != ConstraintTarget::State {
                        return Err(config_error(
                            &format!("{field}.reference"),
                            "initial reference applies to state constraints only",
                        ));
                    }
                    SurrogateReference::Covariance(p.boundary.sigma_i.clone())
                }
                ReferenceKind::Pilot => SurrogateReference::Pilot,
                ReferenceKind::Covariance => {
                    let d = c.reference_diag.as_ref().ok_or_else(|| {
                        config_error(&format!("{field}.reference_diag"), "required for covariance reference")
                    })?;
                    expect_len(&format!("{field}.reference_diag"), d, dim)?;
                    SurrogateReference::Covariance(diag(d))
                }
            };
            if c.reference != ReferenceKind::Covariance && c.reference_diag.is_some() {
                return Err(config_error(&field, "reference_diag only applies to covariance references"));
            }
            if c.reference != ReferenceKind::Fixed && (c.ell.is_some() || c.beta.is_some()) {
                return Err(config_error(&field, "ell/beta only apply to fixed references"));
            }
            if let Some(t) = &c.taper {
                if t.end > horizon || t.start > t.end {
                    return Err(config_error(&format!("{field}.taper"), "window outside horizon"));
                }
            }
            let mut spec = ChanceSpec::new(constraint, reference);
            spec.taper = c.taper;
            p.chance.push(spec);
        }
        p.check().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    pub fn tolerances(&self) -> SolverTolerances {
        SolverTolerances {
            feasibility: self.solver.feasibility_tol,
            gap_rel: self.solver.gap_rel_tol,
            gap_abs: self.solver.gap_abs_tol,
            max_iterations: self.solver.max_iterations,
        }
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            mode: QuadraticCostMode::Epigraph,
            relinearize: self.solver.relinearize_passes,
            ..Default::default()
        }
    }

    /// Simulator settings, with the planning noise `D` attached when requested.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut sim = self.sim.clone();
        if self.experiment.inject_process_noise {
            let sys = self.problem()?.sys;
            sim.process_noise = Some(sys.d(0).clone());
        }
        Ok(sim)
    }

    /// LQR baseline weights `(Q, R)`, after cap matching when enabled.
    pub fn lqr_weights(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        expect_len("lqr.q_diag", &self.lqr.q_diag, 6)?;
        expect_len("lqr.r_diag", &self.lqr.r_diag, 3)?;
        let q = diag(&self.lqr.q_diag);
        let r = diag(&self.lqr.r_diag);
        if !self.lqr.match_cap {
            return Ok((q, r));
        }
        let p = self.problem()?;
        let position = PartialCovarianceBound::position_selector();
        let (selector, cap) = p
            .cov_bounds
            .iter()
            .find(|b| b.target == ConstraintTarget::State && b.selector == position)
            .map(|b| (b.selector.clone(), b.cap.clone()))
            .unwrap_or_else(|| {
                let cap = (position.transpose() * &p.boundary.sigma_f * &position).into_owned();
                (position.clone(), cap)
            });
        let scale = crate::lqr::cap_matched_scale(
            p.sys.a(0),
            p.sys.b(0),
            p.sys.d(0),
            &q,
            &r,
            &selector,
            &cap,
        )
        .map_err(|e| config_error("lqr.match_cap", e))?;
        Ok((crate::lqr::scale_block(&q, &selector, scale), r))
    }
}
