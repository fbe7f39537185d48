//! Batch rollouts and their statistics.
//!
//! Rollout `i` uses seed `seed_base + i`. Rollouts run in parallel chunks whose results are
//! folded into the accumulators in rollout order, so parallel and serial runs give
//! bit-identical reports and memory stays bounded for large `M`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::aero::DragModel;
use crate::chance::ConstraintTarget;
use crate::covsteer::{CovSteerProblem, CovSteerSolution};
use crate::error::{invalid, Error, Result};
use crate::linalg::{max_eigenvalue, symmetrize};
use crate::linsys::{covariance_sqrt, sample_gaussian};
use crate::quadsim::{run_closed_loop, EstimatorKind, SimConfig, TrackingPolicy};
use crate::scenario::ControllerKind;

pub const REPORT_FORMAT: &str = "quadsteer-metrics";
pub const REPORT_VERSION: u32 = 1;

/// Probability mass of a one-dimensional 3-sigma interval.
pub const THREE_SIGMA_MASS: f64 = 0.997_300_203_936_739_8;

/// Largest tolerated fraction of failed rollouts.
pub const MAX_FAILURE_FRACTION: f64 = 1e-3;

/// Rollouts simulated between two reductions.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    /// The planning model `x+ = A x + B u + D w`.
    Linear,
    /// The quadrotor simulator.
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub scenario: String,
    pub controller: ControllerKind,
    pub estimator: EstimatorKind,
    pub plant: PlantKind,
    pub rollouts: usize,
    pub seed_base: u64,
    /// Containment ellipsoid scale.
    pub inflation: f64,
    /// Steps at which full state moments are reported (the terminal step always is).
    #[serde(default)]
    pub moment_steps: Vec<usize>,
}

impl ExperimentPlan {
    pub fn new(scenario: &str, controller: ControllerKind, estimator: EstimatorKind, rollouts: usize) -> Self {
        Self {
            scenario: scenario.to_string(),
            controller,
            estimator,
            plant: PlantKind::Nonlinear,
            rollouts,
            seed_base: 0,
            inflation: 1.0,
            moment_steps: Vec::new(),
        }
    }
}

/// Everything a rollout needs besides its seed. Shared read-only between workers.
pub struct ExperimentSetup<'a> {
    pub problem: &'a CovSteerProblem,
    /// Planned solution: the OCS policy and the source of the ellipsoids.
    pub solution: &'a CovSteerSolution,
    /// Policy flown when the plan asks for LQR.
    pub lqr: Option<&'a dyn TrackingPolicy>,
    pub sim: &'a SimConfig,
    pub model: Arc<DragModel>,
}

impl ExperimentSetup<'_> {
    fn policy(&self, controller: ControllerKind) -> Result<&dyn TrackingPolicy> {
        match controller {
            ControllerKind::Ocs => Ok(self.solution),
            ControllerKind::Lqr => self
                .lqr
                .ok_or_else(|| invalid("LQR controller requested but no LQR policy supplied")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceViolation {
    pub index: usize,
    pub target: ConstraintTarget,
    /// Violations over all step samples in the window.
    pub pooled_rate: f64,
    /// Largest per-step violation rate and where it occurs.
    pub worst_step_rate: f64,
    pub worst_step: usize,
    /// `1 - delta`.
    pub allowed: f64,
    /// `3 sqrt(p (1 - p) / M)` with `p = 1 - delta`.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapViolation {
    pub index: usize,
    pub target: ConstraintTarget,
    /// Fraction of samples outside the cap's 3-sigma-equivalent ellipsoid.
    pub sample_rate: f64,
    /// `1 - 0.9973` plus the 3-sigma binomial margin for one step's `M` samples.
    pub allowed: f64,
    /// Largest `lambda_max(L' Sigma_hat L - cap)` over the window.
    pub empirical_excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMoments {
    pub step: usize,
    pub mean: Vec<f64>,
    /// Row-major.
    pub covariance: Vec<f64>,
}

impl StepMoments {
    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        DMatrix::from_row_slice(n, n, &self.covariance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub plan: ExperimentPlan,
    pub completed: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    /// RMS position error against the mean the flown policy regulates to (cm).
    pub rms_tracking_cm: f64,
    /// RMS geodesic rate of the commanded attitude (rad/s); nonlinear plant only.
    pub rms_cmd_rate: Option<f64>,
    /// RMS step-to-step change of the commanded acceleration divided by dt (m/s^3).
    pub rms_input_rate: f64,
    pub empirical_mu_n: Vec<f64>,
    /// Row-major `n x n`; zero when fewer than two rollouts completed.
    pub empirical_sigma_n: Vec<f64>,
    pub moments: Vec<StepMoments>,
    /// Fraction of terminal samples outside the `Sigma_f` 3-sigma-equivalent ellipsoid
    /// centred on the planned terminal mean.
    pub terminal_outside_rate: f64,
    pub terminal_allowed: f64,
    pub chance: Vec<ChanceViolation>,
    pub caps: Vec<CapViolation>,
    /// Per step: fraction of rollouts inside the planned position ellipsoid of
    /// 3-sigma-equivalent radius `sqrt(chi2_3(0.9973))`, scaled by the inflation.
    pub containment: Vec<f64>,
    pub containment_overall: f64,
    /// Same with the plain radius 3 (97.1% of a 3D Gaussian), scaled by the inflation.
    pub containment_plain_overall: f64,
    /// Mean of `f_true - f_hat` per axis (N); nonlinear plant only.
    pub residual_force_mean: Option<[f64; 3]>,
    /// Mean of `f_true` per axis (N); nonlinear plant only.
    pub drag_force_mean: Option<[f64; 3]>,
}

impl MetricsReport {
    pub fn empirical_sigma_n_matrix(&self) -> DMatrix<f64> {
        let n = self.empirical_mu_n.len();
        DMatrix::from_row_slice(n, n, &self.empirical_sigma_n)
    }

    pub fn moments_at(&self, step: usize) -> Option<&StepMoments> {
        self.moments.iter().find(|m| m.step == step)
    }
}

/// One rollout's trajectory and loop diagnostics.
#[derive(Clone, Debug)]
struct RolloutSummary {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    cmd_rate_sq: Option<(f64, usize)>,
    residual_sum: Option<([f64; 3], [f64; 3], usize)>,
}

/// Squared radius of the ellipsoid holding `THREE_SIGMA_MASS` of a `dim`-variate Gaussian.
pub fn three_sigma_radius_sq(dim: usize) -> f64 {
    ChiSquared::new(dim as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(THREE_SIGMA_MASS)
}

/// Initial state of rollout `seed`, drawn from `N(mu_i, Sigma_i)` on its own stream.
pub fn initial_state(p: &CovSteerProblem, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let root = covariance_sqrt(&p.boundary.sigma_i);
    sample_gaussian(&mut rng, &p.boundary.mu_i, &root)
}

fn linear_rollout(
    setup: &ExperimentSetup,
    policy: &dyn TrackingPolicy,
    seed: u64,
) -> Result<RolloutSummary> {
    let p = setup.problem;
    let horizon = policy.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = initial_state(p, seed);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let d_dim = p.sys.noise_dim();
    let zero = DVector::zeros(d_dim);
    let eye = DMatrix::identity(d_dim, d_dim);
    for k in 0..horizon {
        let u = policy.gain(k) * (&x - policy.mean(k)) + policy.feedforward(k);
        let w = sample_gaussian(&mut rng, &zero, &eye);
        let next = p.sys.a(k) * &x + p.sys.b(k) * &u + p.sys.d(k) * w;
        states.push(std::mem::replace(&mut x, next));
        inputs.push(u);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::IntegrationFailure {
            time: horizon as f64 * p.sys.dt(),
            detail: "non-finite linear rollout".into(),
        });
    }
    states.push(x);
    Ok(RolloutSummary {
        states,
        inputs,
        cmd_rate_sq: None,
        residual_sum: None,
    })
}

fn nonlinear_rollout(
    setup: &ExperimentSetup,
    policy: &dyn TrackingPolicy,
    estimator: EstimatorKind,
    seed: u64,
) -> Result<RolloutSummary> {
    let x0 = initial_state(setup.problem, seed);
    let trace = run_closed_loop(setup.sim, policy, setup.model.clone(), estimator, &x0, seed)?;
    let inputs = trace
        .records
        .iter()
        .map(|r| DVector::from_column_slice(r.u.as_slice()))
        .collect();
    let rates: Vec<f64> = trace.records.iter().skip(1).map(|r| r.cmd_rate).collect();
    let mut resid = [0.0; 3];
    let mut drag = [0.0; 3];
    for r in &trace.records {
        for i in 0..3 {
            resid[i] += r.f_true[i] - r.f_hat[i];
            drag[i] += r.f_true[i];
        }
    }
    Ok(RolloutSummary {
        states: trace.states,
        inputs,
        cmd_rate_sq: Some((rates.iter().map(|r| r * r).sum(), rates.len())),
        residual_sum: Some((resid, drag, trace.records.len())),
    })
}

/// Unbiased sample mean and covariance.
pub fn empirical_moments(samples: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(invalid("empirical covariance needs at least two samples"));
    }
    let n = samples[0].len();
    let m = samples.len() as f64;
    let mut mean = DVector::zeros(n);
    for s in samples {
        mean += s;
    }
    mean /= m;
    let mut cov = DMatrix::zeros(n, n);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov /= m - 1.0;
    Ok((mean, symmetrize(&cov)))
}

/// Empirical moments at step `k` across simulator traces.
pub fn trace_moments(
    traces: &[crate::quadsim::SimTrace],
    k: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let samples: Vec<_> = traces
        .iter()
        .map(|t| t.states.get(k).cloned().ok_or_else(|| invalid(format!("step {k} beyond trace"))))
        .collect::<Result<_>>()?;
    empirical_moments(&samples)
}

fn binomial_margin(p: f64, m: usize) -> f64 {
    3.0 * (p * (1.0 - p) / m as f64).sqrt()
}

/// Streaming first and second moments of deviations from a fixed centre.
#[derive(Clone, Debug)]
struct MomentAccumulator {
    center: DVector<f64>,
    n: usize,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl MomentAccumulator {
    fn new(center: DVector<f64>) -> Self {
        let d = center.len();
        Self {
            center,
            n: 0,
            sum: DVector::zeros(d),
            outer: DMatrix::zeros(d, d),
        }
    }

    fn add(&mut self, x: &DVector<f64>) {
        let d = x - &self.center;
        self.outer += &d * d.transpose();
        self.sum += d;
        self.n += 1;
    }

    fn mean(&self) -> DVector<f64> {
        &self.center + &self.sum / self.n.max(1) as f64
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let dbar = &self.sum / n;
        let cov = (&self.outer - &dbar * dbar.transpose() * n) / (n - 1.0);
        Some(symmetrize(&cov))
    }

    fn report(&self, step: usize) -> StepMoments {
        let d = self.center.len();
        let cov = self.covariance().unwrap_or_else(|| DMatrix::zeros(d, d));
        StepMoments {
            step,
            mean: self.mean().iter().copied().collect(),
            covariance: cov.transpose().iter().copied().collect(),
        }
    }
}

/// Inverse of a positive definite matrix, `None` when it is not.
fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

fn quad_form(inv: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    (d.transpose() * inv * d)[(0, 0)]
}

struct CapState {
    steps: Vec<usize>,
    cap_inv: DMatrix<f64>,
    outside: usize,
    total: usize,
    moments: Vec<MomentAccumulator>,
}

struct ChanceState {
    steps: Vec<usize>,
    violations: Vec<usize>,
}

/// Order-dependent fold of rollout summaries into report statistics.
struct Accumulator<'a> {
    setup: &'a ExperimentSetup<'a>,
    policy: &'a dyn TrackingPolicy,
    horizon: usize,
    dt: f64,
    completed: usize,
    track_sq: f64,
    track_n: usize,
    rate_sq: f64,
    rate_n: usize,
    cmd: Option<(f64, usize)>,
    resid: Option<([f64; 3], [f64; 3], usize)>,
    moments: Vec<(usize, MomentAccumulator)>,
    terminal_inv: Option<DMatrix<f64>>,
    terminal_outside: usize,
    chance: Vec<ChanceState>,
    caps: Vec<CapState>,
    ellipsoids: Vec<Option<DMatrix<f64>>>,
    radius_sq: f64,
    plain_radius_sq: f64,
    inside: Vec<usize>,
    inside_plain: usize,
}

impl<'a> Accumulator<'a> {
    fn new(plan: &ExperimentPlan, setup: &'a ExperimentSetup<'a>, policy: &'a dyn TrackingPolicy) -> Self {
        let p = setup.problem;
        let sol = setup.solution;
        let horizon = policy.steps();
        let mut steps: Vec<usize> = plan.moment_steps.iter().copied().filter(|&k| k <= horizon).collect();
        steps.push(horizon);
        steps.sort_unstable();
        steps.dedup();
        let moments = steps
            .into_iter()
            .map(|k| (k, MomentAccumulator::new(sol.mu[k].clone())))
            .collect();
        let chance = p
            .chance
            .iter()
            .map(|spec| {
                let c = &spec.constraint;
                let steps: Vec<usize> = c.window.steps(c.target, horizon).collect();
                let violations = vec![0; steps.len()];
                ChanceState { steps, violations }
            })
            .collect();
        let caps = p
            .cov_bounds
            .iter()
            .map(|b| {
                let steps: Vec<usize> = b.window.steps(b.target, horizon).collect();
                let moments = steps
                    .iter()
                    .map(|&k| {
                        let centre = match b.target {
                            ConstraintTarget::State => b.selector.transpose() * &sol.mu[k],
                            ConstraintTarget::Input => b.selector.transpose() * &sol.feedforward[k],
                        };
                        MomentAccumulator::new(centre)
                    })
                    .collect();
                CapState {
                    steps,
                    cap_inv: spd_inverse(&b.cap).expect("caps are validated positive definite"),
                    outside: 0,
                    total: 0,
                    moments,
                }
            })
            .collect();
        let scale = plan.inflation * plan.inflation;
        Self {
            setup,
            policy,
            horizon,
            dt: p.sys.dt(),
            completed: 0,
            track_sq: 0.0,
            track_n: 0,
            rate_sq: 0.0,
            rate_n: 0,
            cmd: Some((0.0, 0)),
            resid: Some(([0.0; 3], [0.0; 3], 0)),
            moments,
            terminal_inv: spd_inverse(&p.boundary.sigma_f),
            terminal_outside: 0,
            chance,
            caps,
            ellipsoids: (0..=horizon).map(|k| spd_inverse(&sol.position_covariance(k))).collect(),
            radius_sq: three_sigma_radius_sq(3) * scale,
            plain_radius_sq: 9.0 * scale,
            inside: vec![0; horizon + 1],
            inside_plain: 0,
        }
    }

    fn add(&mut self, run: &RolloutSummary) {
        let p = self.setup.problem;
        let sol = self.setup.solution;
        self.completed += 1;
        for (k, x) in run.states.iter().enumerate() {
            self.track_sq += (x.rows(0, 3) - self.policy.mean(k).rows(0, 3)).norm_squared();
            self.track_n += 1;
        }
        for w in run.inputs.windows(2) {
            self.rate_sq += ((&w[1] - &w[0]) / self.dt).norm_squared();
            self.rate_n += 1;
        }
        self.cmd = match (self.cmd, run.cmd_rate_sq) {
            (Some((s, n)), Some((a, b))) => Some((s + a, n + b)),
            _ => None,
        };
        self.resid = match (self.resid, run.residual_sum) {
            (Some((r, d, n)), Some((a, b, c))) => Some((
                std::array::from_fn(|i| r[i] + a[i]),
                std::array::from_fn(|i| d[i] + b[i]),
                n + c,
            )),
            _ => None,
        };
        for (k, acc) in &mut self.moments {
            acc.add(&run.states[*k]);
        }
        if let Some(inv) = &self.terminal_inv {
            let n = run.states[self.horizon].len();
            let d = &run.states[self.horizon] - &sol.mu[self.horizon];
            if quad_form(inv, &d) > three_sigma_radius_sq(n) {
                self.terminal_outside += 1;
            }
        }
        for (state, spec) in self.chance.iter_mut().zip(&p.chance) {
            let c = &spec.constraint;
            for (slot, &k) in state.steps.iter().enumerate() {
                let x = match c.target {
                    ConstraintTarget::State => &run.states[k],
                    ConstraintTarget::Input => &run.inputs[k],
                };
                if c.alpha.dot(x) > c.bound {
                    state.violations[slot] += 1;
                }
            }
        }
        for (state, bound) in self.caps.iter_mut().zip(&p.cov_bounds) {
            let r2 = three_sigma_radius_sq(bound.selector.ncols());
            for (slot, &k) in state.steps.iter().enumerate() {
                let sample = match bound.target {
                    ConstraintTarget::State => bound.selector.transpose() * &run.states[k],
                    ConstraintTarget::Input => bound.selector.transpose() * &run.inputs[k],
                };
                let acc = &mut state.moments[slot];
                if quad_form(&state.cap_inv, &(&sample - &acc.center)) > r2 {
                    state.outside += 1;
                }
                state.total += 1;
                acc.add(&sample);
            }
        }
        for k in 0..=self.horizon {
            if let Some(inv) = &self.ellipsoids[k] {
                let d = run.states[k].rows(0, 3) - sol.mu[k].rows(0, 3);
                let q = quad_form(inv, &d.into_owned());
                if q <= self.radius_sq {
                    self.inside[k] += 1;
                }
                if q <= self.plain_radius_sq {
                    self.inside_plain += 1;
                }
            }
        }
    }

    fn finish(self, plan: &ExperimentPlan, failures: Vec<String>) -> MetricsReport {
        let p = self.setup.problem;
        let m = self.completed;
        let mf = m.max(1) as f64;
        let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
        let terminal = &self.moments.iter().find(|(k, _)| *k == self.horizon).expect("terminal step").1;
        let terminal_report = terminal.report(self.horizon);

        let chance = self
            .chance
            .iter()
            .zip(&p.chance)
            .enumerate()
            .map(|(index, (state, spec))| {
                let c = &spec.constraint;
                let total: usize = state.violations.iter().sum();
                let samples = state.steps.len() * m;
                let (worst_slot, worst) = state
                    .violations
                    .iter()
                    .enumerate()
                    .fold((0, 0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                let allowed = 1.0 - c.delta;
                ChanceViolation {
                    index,
                    target: c.target,
                    pooled_rate: if samples == 0 { 0.0 } else { total as f64 / samples as f64 },
                    worst_step_rate: worst as f64 / mf,
                    worst_step: state.steps.get(worst_slot).copied().unwrap_or(c.window.start),
                    allowed,
                    margin: binomial_margin(allowed, m.max(1)),
                }
            })
            .collect();

        let design = 1.0 - THREE_SIGMA_MASS;
        let caps = self
            .caps
            .iter()
            .zip(&p.cov_bounds)
            .enumerate()
            .map(|(index, (state, bound))| {
                let excess = state
                    .moments
                    .iter()
                    .filter_map(|acc| acc.covariance())
                    .map(|cov| max_eigenvalue(&(cov - &bound.cap)))
                    .fold(f64::NEG_INFINITY, f64::max);
                CapViolation {
                    index,
                    target: bound.target,
                    sample_rate: if state.total == 0 { 0.0 } else { state.outside as f64 / state.total as f64 },
                    allowed: design + binomial_margin(design, m.max(1)),
                    empirical_excess: excess,
                }
            })
            .collect();

        let containment: Vec<f64> = self.inside.iter().map(|&c| c as f64 / mf).collect();
        let samples = (m * (self.horizon + 1)).max(1) as f64;
        let containment_overall = self.inside.iter().sum::<usize>() as f64 / samples;

        MetricsReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            plan: plan.clone(),
            completed: m,
            failed: failures.len(),
            failures,
            rms_tracking_cm: 100.0 * rms(self.track_sq, self.track_n),
            rms_cmd_rate: self.cmd.map(|(s, n)| rms(s, n)),
            rms_input_rate: rms(self.rate_sq, self.rate_n),
            empirical_mu_n: terminal_report.mean.clone(),
            empirical_sigma_n: terminal_report.covariance.clone(),
            moments: self.moments.iter().map(|(k, acc)| acc.report(*k)).collect(),
            terminal_outside_rate: self.terminal_outside as f64 / mf,
            terminal_allowed: design + binomial_margin(design, m.max(1)),
            chance,
            caps,
            containment,
            containment_overall,
            containment_plain_overall: self.inside_plain as f64 / samples,
            residual_force_mean: self.resid.map(|(r, _, n)| r.map(|v| v / n.max(1) as f64)),
            drag_force_mean: self.resid.map(|(_, d, n)| d.map(|v| v / n.max(1) as f64)),
        }
    }
}

/// Runs every rollout of `plan` and aggregates the metrics.
pub fn run_experiment(plan: &ExperimentPlan, setup: &ExperimentSetup) -> Result<MetricsReport> {
    if plan.rollouts == 0 {
        return Err(invalid("experiment needs at least one rollout"));
    }
    if !(plan.inflation > 0.0) {
        return Err(invalid("containment inflation must be positive"));
    }
    let policy = setup.policy(plan.controller)?;
    let horizon = policy.steps();
    if horizon != setup.problem.horizon() || setup.solution.horizon() != horizon {
        return Err(invalid(format!(
            "policy horizon {horizon} does not match scenario horizon {}",
            setup.problem.horizon()
        )));
    }
    let mut acc = Accumulator::new(plan, setup, policy);
    let mut failures = Vec::new();
    for start in (0..plan.rollouts).step_by(CHUNK) {
        let end = (start + CHUNK).min(plan.rollouts);
        let results: Vec<Result<RolloutSummary>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let seed = plan.seed_base.wrapping_add(i as u64);
                match plan.plant {
                    PlantKind::Linear => linear_rollout(setup, policy, seed),
                    PlantKind::Nonlinear => nonlinear_rollout(setup, policy, plan.estimator, seed),
                }
            })
            .collect();
        for (offset, r) in results.into_iter().enumerate() {
            match r {
                Ok(s) => acc.add(&s),
                Err(e) => failures.push(format!("rollout {}: {e}", start + offset)),
            }
        }
    }
    let failed = failures.len();
    if acc.completed == 0 || failed as f64 > MAX_FAILURE_FRACTION * plan.rollouts as f64 {
        return Err(Error::IntegrationFailure {
            time: 0.0,
            detail: format!(
                "{failed} of {} rollouts failed; first: {}",
                plan.rollouts,
                failures.first().map(String::as_str).unwrap_or("")
            ),
        });
    }
    Ok(acc.finish(plan, failures))
}

/// Planned 3-sigma position ellipsoid at one step: centre, semi-axes and axis directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseSample {
    pub step: usize,
    pub t: f64,
    pub center: [f64; 3],
    /// `3 sqrt(lambda_i)`, ascending.
    pub semi_axes: [f64; 3],
    /// Unit axis directions, one per semi-axis.
    pub axes: [[f64; 3]; 3],
}

/// Ellipsoids every `stride` steps from `start` to `N`.
pub fn ellipse_series(sol: &CovSteerSolution, dt: f64, start: usize, stride: usize) -> Vec<EllipseSample> {
    let horizon = sol.horizon();
    (start..=horizon)
        .step_by(stride.max(1))
        .map(|k| {
            let eig = sol.position_covariance(k).symmetric_eigen();
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let mut semi_axes = [0.0; 3];
            let mut axes = [[0.0; 3]; 3];
            for (slot, &i) in order.iter().enumerate() {
                semi_axes[slot] = 3.0 * eig.eigenvalues[i].max(0.0).sqrt();
                for j in 0..3 {
                    axes[slot][j] = eig.eigenvectors[(j, i)];
                }
            }
            EllipseSample {
                step: k,
                t: k as f64 * dt,
                center: [sol.mu[k][0], sol.mu[k][1], sol.mu[k][2]],
                semi_axes,
                axes,
            }
        })
        .collect()
}

pub const TABLE_HEADER: [&str; 11] = [
    "scenario",
    "controller",
    "estimator",
    "plant",
    "rollouts",
    "failed",
    "rms_tracking_cm",
    "rms_cmd_rate_rad_s",
    "rms_input_rate_m_s3",
    "containment",
    "max_chance_violation",
];

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Comparison table, one row per report.
pub fn write_table<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER).map_err(csv_error)?;
    for r in reports {
        let worst = r
            .chance
            .iter()
            .map(|c| c.worst_step_rate)
            .fold(0.0, f64::max);
        let plant = match r.plan.plant {
            PlantKind::Linear => "linear",
            PlantKind::Nonlinear => "nonlinear",
        };
        w.write_record([
            r.plan.scenario.clone(),
            r.plan.controller.name().to_string(),
            r.plan.estimator.name().to_string(),
            plant.to_string(),
            r.plan.rollouts.to_string(),
            r.failed.to_string(),
            r.rms_tracking_cm.to_string(),
            r.rms_cmd_rate.map_or(String::new(), |v| v.to_string()),
            r.rms_input_rate.to_string(),
            r.containment_overall.to_string(),
            worst.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ellipses<W: Write>(series: &[EllipseSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "t".into(), "cx".into(), "cy".into(), "cz".into()];
    for i in 0..3 {
        header.push(format!("a{i}"));
        for c in ["x", "y", "z"] {
            header.push(format!("e{i}_{c}"));
        }
    }
    w.write_record(&header).map_err(csv_error)?;
    for e in series {
        let mut row = vec![e.step.to_string(), e.t.to_string()];
        row.extend(e.center.iter().map(|v| v.to_string()));
        for i in 0..3 {
            row.push(e.semi_axes[i].to_string());
            row.extend(e.axes[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `table.csv`, `report.json` and, when given, `ellipses.csv` into `dir`.
pub fn emit_report(reports: &[MetricsReport], ellipses: Option<&[EllipseSample]>, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let table = dir.join("table.csv");
    write_table(reports, std::fs::File::create(&table)?)?;
    written.push(table);
    let json = dir.join("report.json");
    serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(&json)?), reports)?;
    written.push(json);
    if let Some(series) = ellipses {
        let path = dir.join("ellipses.csv");
        write_ellipses(series, std::fs::File::create(&path)?)?;
        written.push(path);
    }
    Ok(written)
}
