use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chance::{linearize, AffineChanceConstraint, ConstraintTarget, LinearizedSurrogate, PartialCovarianceBound};
use crate::error::{invalid, Error, Result};
use crate::linsys::{CostWeights, GaussianBoundary, LinearGaussianSystem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalMeanMode {
    Equality,
    #[default]
    Free,
}

/// Equality constraint `selector * mu_step = target` on the mean trajectory.
#[derive(Clone, Debug)]
pub struct Waypoint {
    pub step: usize,
    pub selector: DMatrix<f64>,
    pub target: DVector<f64>,
}

/// Where the linearization point of a chance constraint comes from.
#[derive(Clone, Debug)]
pub enum SurrogateReference {
    /// Surrogate constants given directly (configuration data).
    Fixed(LinearizedSurrogate),
    /// One reference covariance for every step of the window.
    Covariance(DMatrix<f64>),
    /// Reference covariance per step, indexed by absolute step.
    PerStep(Vec<DMatrix<f64>>),
    /// Resolved by an unconstrained pilot solve before assembly.
    Pilot,
}

/// Linear taper of `beta` from full value at `start` to `end_scale * beta` at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaTaper {
    pub start: usize,
    pub end: usize,
    pub end_scale: f64,
}

impl BetaTaper {
    pub fn factor(&self, k: usize) -> f64 {
        if k <= self.start || self.end <= self.start {
            return if k > self.start { self.end_scale } else { 1.0 };
        }
        let t = ((k - self.start) as f64 / (self.end - self.start) as f64).min(1.0);
        1.0 + t * (self.end_scale - 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct ChanceSpec {
    pub constraint: AffineChanceConstraint,
    pub reference: SurrogateReference,
    pub taper: Option<BetaTaper>,
}

impl ChanceSpec {
    pub fn new(constraint: AffineChanceConstraint, reference: SurrogateReference) -> Self {
        Self {
            constraint,
            reference,
            taper: None,
        }
    }

    /// Surrogate applied at step `k`.
    pub fn surrogate_at(&self, k: usize, horizon: usize) -> Result<LinearizedSurrogate> {
        let base = match &self.reference {
            SurrogateReference::Fixed(s) => s.clone(),
            SurrogateReference::Covariance(c) => linearize(&self.constraint, c)?,
            SurrogateReference::PerStep(refs) => {
                let r = refs.get(k).ok_or_else(|| {
                    invalid(format!("no reference covariance for step {k} (horizon {horizon})"))
                })?;
                linearize(&self.constraint, r).map_err(|e| match e {
                    Error::DegenerateReference(msg) => {
                        Error::DegenerateReference(format!("step {k}: {msg}"))
                    }
                    other => other,
                })?
            }
            SurrogateReference::Pilot => {
                return Err(invalid(
                    "chance constraint references an unresolved pilot solve",
                ))
            }
        };
        Ok(match self.taper {
            Some(t) => {
                let beta = base.beta * t.factor(k);
                base.with_beta(beta)
            }
            None => base,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CovSteerProblem {
    pub sys: LinearGaussianSystem,
    pub boundary: GaussianBoundary,
    pub weights: CostWeights,
    pub chance: Vec<ChanceSpec>,
    pub cov_bounds: Vec<PartialCovarianceBound>,
    pub waypoints: Vec<Waypoint>,
    pub terminal_mean_mode: TerminalMeanMode,
}

impl CovSteerProblem {
    pub fn new(sys: LinearGaussianSystem, boundary: GaussianBoundary, weights: CostWeights) -> Self {
        Self {
            sys,
            boundary,
            weights,
            chance: Vec::new(),
            cov_bounds: Vec::new(),
            waypoints: Vec::new(),
            terminal_mean_mode: TerminalMeanMode::Free,
        }
    }

    pub fn horizon(&self) -> usize {
        self.sys.horizon()
    }

    /// Dimension and window checks.
    pub fn check(&self) -> Result<()> {
        let n = self.sys.state_dim();
        let m = self.sys.input_dim();
        let horizon = self.horizon();
        if self.boundary.mu_i.len() != n || self.boundary.sigma_i.nrows() != n {
            return Err(invalid("boundary dimension does not match the plant"));
        }
        if self.weights.q.len() != horizon || self.weights.r.len() != horizon {
            return Err(invalid("cost weight sequences must match the horizon"));
        }
        if self.weights.q[0].shape() != (n, n)
            || self.weights.r[0].shape() != (m, m)
            || self.weights.q_bar.shape() != (n, n)
            || self.weights.r_bar.shape() != (m, m)
        {
            return Err(invalid("cost weight dimensions do not match the plant"));
        }
        if self.terminal_mean_mode == TerminalMeanMode::Equality && self.boundary.mu_f.is_none() {
            return Err(invalid("terminal mean equality requires a terminal mean"));
        }
        for (i, spec) in self.chance.iter().enumerate() {
            let c = &spec.constraint;
            let dim = match c.target {
                ConstraintTarget::State => n,
                ConstraintTarget::Input => m,
            };
            if c.alpha.len() != dim {
                return Err(invalid(format!("chance constraint {i}: alpha has wrong length")));
            }
            if c.window.end > horizon {
                return Err(invalid(format!(
                    "chance constraint {i}: window end {} beyond horizon {horizon}",
                    c.window.end
                )));
            }
            if let SurrogateReference::Fixed(s) = &spec.reference {
                if s.ell.len() != dim || s.alpha.len() != dim {
                    return Err(invalid(format!("chance constraint {i}: surrogate has wrong length")));
                }
            }
        }
        for (i, b) in self.cov_bounds.iter().enumerate() {
            let dim = match b.target {
                ConstraintTarget::State => n,
                ConstraintTarget::Input => m,
            };
            if b.selector.nrows() != dim {
                return Err(invalid(format!("covariance bound {i}: selector must have {dim} rows")));
            }
            if b.window.end > horizon {
                return Err(invalid(format!("covariance bound {i}: window beyond horizon")));
            }
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.step > horizon {
                return Err(invalid(format!("waypoint {i}: step {} beyond horizon", w.step)));
            }
            if w.selector.ncols() != n || w.selector.nrows() != w.target.len() {
                return Err(invalid(format!("waypoint {i}: selector/target dimension mismatch")));
            }
            let rank = w.selector.clone().svd(false, false).rank(1e-10);
            if rank != w.selector.nrows() {
                return Err(invalid(format!("waypoint {i}: selector is not full row rank")));
            }
        }
        Ok(())
    }

    pub fn needs_pilot(&self) -> bool {
        self.chance
            .iter()
            .any(|c| matches!(c.reference, SurrogateReference::Pilot))
    }

    /// Copy without chance constraints, used for the pilot solve.
    pub fn without_chance(&self) -> Self {
        Self {
            chance: Vec::new(),
            ..self.clone()
        }
    }

    /// Position selector for waypoint constraints on a 6-state plant.
    pub fn position_waypoint(step: usize, target: [f64; 3]) -> Waypoint {
        let mut selector = DMatrix::zeros(3, 6);
        for i in 0..3 {
            selector[(i, i)] = 1.0;
        }
        Waypoint {
            step,
            selector,
            target: DVector::from_column_slice(&target),
        }
    }
}
