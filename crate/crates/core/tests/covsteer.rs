use nalgebra::{DMatrix, DVector};

use quadsteer::chance::{ConstraintTarget, PartialCovarianceBound, StepWindow};
use quadsteer::covsteer::*;
use quadsteer::linsys::{
    build_double_integrator, propagate_moments, CostWeights, GaussianBoundary, LinearGaussianSystem,
};
use quadsteer::scenario::ScenarioConfig;
use quadsteer::Error;

fn backend() -> ClarabelBackend {
    ClarabelBackend::new(SolverTolerances::default())
}

fn frob_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Hover-to-hover translation over `n` steps.
fn small_problem(n: usize, noise: (f64, f64)) -> CovSteerProblem {
    let sys = build_double_integrator(0.05, noise.0, noise.1, n).unwrap();
    let boundary = GaussianBoundary::new(
        DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.01, 0.04, 0.04, 0.04])),
        Some(DVector::from_vec(vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0])),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.02, 0.02, 0.1, 0.1, 0.1])),
    )
    .unwrap();
    let weights = CostWeights::constant(
        DMatrix::identity(6, 6),
        DMatrix::identity(3, 3),
        DMatrix::zeros(6, 6),
        DMatrix::identity(3, 3),
        n,
    )
    .unwrap();
    let mut p = CovSteerProblem::new(sys, boundary, weights);
    p.terminal_mean_mode = TerminalMeanMode::Equality;
    p
}

#[test]
fn figure8_program_has_one_dynamics_equality_and_lmi_per_step() {
    let p = ScenarioConfig::resolve("figure8").unwrap().problem().unwrap();
    let prog = assemble(&p).unwrap().program;
    let stats = prog.stats();
    assert_eq!(stats.constraints_by_label["covariance_dynamics"], 540);
    assert_eq!(stats.constraints_by_label["relaxation"], 540);
    assert!(stats.psd_cones[&9] >= 540);
}

#[test]
fn single_step_with_loose_target_needs_no_feedback() {
    let sys = build_double_integrator(0.1, 0.01, 0.01, 1).unwrap();
    let boundary = GaussianBoundary::new(
        DVector::zeros(6),
        DMatrix::identity(6, 6) * 0.01,
        None,
        DMatrix::identity(6, 6) * 100.0,
    )
    .unwrap();
    let weights = CostWeights::constant(
        DMatrix::zeros(6, 6),
        DMatrix::identity(3, 3),
        DMatrix::zeros(6, 6),
        DMatrix::zeros(3, 3),
        1,
    )
    .unwrap();
    let p = CovSteerProblem::new(sys, boundary, weights);
    let (sol, raw) = solve_problem(&p, &mut backend(), QuadraticCostMode::Epigraph).unwrap();
    assert_eq!(raw.status, SolveStatus::Optimal);
    assert!(sol.objective.abs() < 1e-6, "objective {}", sol.objective);
    assert!(sol.gains[0].amax() < 1e-3, "K_0 = {}", sol.gains[0]);
    assert!(sol.y[0].amax() < 1e-6);
}

#[test]
fn noiseless_stable_plant_with_matching_boundaries_uses_no_feedback() {
    // Without state penalty, any feedback only adds input cost: Y = U = 0 is optimal.
    let n = 10;
    let a = DMatrix::identity(2, 2) * 0.9;
    let b = DMatrix::identity(2, 2);
    let d = DMatrix::zeros(2, 2);
    let sys = LinearGaussianSystem::constant(a, b, d, n, 0.1).unwrap();
    let sigma = DMatrix::identity(2, 2) * 0.5;
    let boundary = GaussianBoundary::new(DVector::zeros(2), sigma.clone(), None, sigma).unwrap();
    let weights = CostWeights::constant(
        DMatrix::zeros(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 2),
        DMatrix::identity(2, 2),
        n,
    )
    .unwrap();
    let p = CovSteerProblem::new(sys, boundary, weights);
    let (sol, _) = solve_problem(&p, &mut backend(), QuadraticCostMode::Epigraph).unwrap();
    for k in 0..n {
        assert!(sol.y[k].amax() < 1e-6, "Y_{k} = {}", sol.y[k]);
        assert!(sol.u[k].amax() < 1e-4, "U_{k} = {}", sol.u[k]);
        assert!(sol.gains[k].amax() < 1e-3, "K_{k} = {}", sol.gains[k]);
    }
}

#[test]
fn unreachable_terminal_covariance_is_infeasible() {
    let mut p = small_problem(10, (0.1, 0.5));
    p.boundary.sigma_f = DMatrix::identity(6, 6) * 1e-9;
    match solve_problem(&p, &mut backend(), QuadraticCostMode::Epigraph) {
        Err(Error::Infeasible(_)) => {}
        other => panic!("expected infeasible, got {:?}", other.map(|(s, _)| s.status)),
    }
}

#[test]
fn zero_cross_covariance_gives_zero_gain() {
    let p = small_problem(4, (0.01, 0.05));
    let assembled = assemble(&p).unwrap();
    let mut x = vec![0.0; assembled.program.n_vars];
    for block in &assembled.layout.sigma {
        for i in 0..6 {
            x[block.index(i, i)] = 0.1 / block.scale;
        }
    }
    let raw = RawSolution {
        x,
        status: SolveStatus::Optimal,
        objective: 0.0,
        primal_residual: 0.0,
        dual_residual: 0.0,
        iterations: 0,
        solve_seconds: 0.0,
        detail: "synthetic".into(),
    };
    let sol = extract_policy(&raw, &assembled.layout, &p).unwrap();
    for k in &sol.gains {
        assert_eq!(k.amax(), 0.0);
    }
}

#[test]
fn extracted_policy_reproduces_planned_moments() {
    let p = small_problem(30, (0.01, 0.05));
    let (sol, _) = solve_problem(&p, &mut backend(), QuadraticCostMode::Epigraph).unwrap();
    let m = propagate_moments(&p.sys, &sol, &p.boundary.mu_i, &p.boundary.sigma_i).unwrap();
    for k in 0..=30 {
        assert!((&m.mu[k] - &sol.mu[k]).amax() < 1e-6, "mean at {k}");
        assert!(frob_rel(&m.sigma[k], &sol.sigma[k]) < 1e-6, "covariance at {k}");
    }
    assert!(sol.max_relaxation_gap() < 1e-4);
    let report = validate(&sol, &p);
    assert!(report.pass, "{:?}", report.failures);
    assert!(report.terminal_excess <= 1e-8);
}

#[test]
fn corrupted_terminal_covariance_is_flagged() {
    let p = small_problem(20, (0.01, 0.05));
    let (mut sol, _) = solve_problem(&p, &mut backend(), QuadraticCostMode::Epigraph).unwrap();
    assert!(validate(&sol, &p).pass);
    sol.sigma[20] *= 10.0;
    let report = validate(&sol, &p);
    assert!(report.terminal_excess > 0.0);
    assert!(!report.pass);
    assert!(!report.failures.is_empty());
}

#[test]
fn adding_constraints_never_lowers_the_objective() {
    let base = small_problem(20, (0.01, 0.05));
    let objective = |p: &CovSteerProblem| {
        solve_problem(p, &mut backend(), QuadraticCostMode::Epigraph)
            .unwrap()
            .0
            .objective
    };
    let mut capped = base.clone();
    capped.cov_bounds.push(
        PartialCovarianceBound::new(
            PartialCovarianceBound::position_selector(),
            DMatrix::identity(3, 3) * 0.015,
            ConstraintTarget::State,
            StepWindow::new(5, 20).unwrap(),
        )
        .unwrap(),
    );
    let mut tighter = capped.clone();
    tighter.waypoints.push(CovSteerProblem::position_waypoint(10, [0.3, 0.0, 0.0]));
    let (j0, j1, j2) = (objective(&base), objective(&capped), objective(&tighter));
    let slack = 1e-6 * j0.abs().max(1.0);
    assert!(j1 >= j0 - slack, "{j0} -> {j1}");
    assert!(j2 >= j1 - slack, "{j1} -> {j2}");
}

#[test]
fn scaling_state_penalty_keeps_feasibility() {
    let p = small_problem(15, (0.01, 0.05));
    for factor in [0.01, 1.0, 100.0] {
        let mut scaled = p.clone();
        scaled.weights = p.weights.scaled_state_penalty(factor);
        let (sol, raw) = solve_problem(&scaled, &mut backend(), QuadraticCostMode::Epigraph).unwrap();
        assert_eq!(raw.status, SolveStatus::Optimal, "factor {factor}");
        assert!(validate(&sol, &scaled).pass, "factor {factor}");
    }
}

#[test]
fn epigraph_and_direct_costs_agree() {
    let p = small_problem(15, (0.01, 0.05));
    let (a, _) = solve_problem(&p, &mut backend(), QuadraticCostMode::Epigraph).unwrap();
    let (b, _) = solve_problem(&p, &mut backend(), QuadraticCostMode::Direct).unwrap();
    assert!((a.objective - b.objective).abs() < 1e-5 * a.objective.abs().max(1.0));
    assert!((&a.mu[7] - &b.mu[7]).amax() < 1e-4);
}

#[test]
fn minimal_scenario_plans_and_validates() {
    let cfg = ScenarioConfig::resolve("minimal").unwrap();
    let p = cfg.problem().unwrap();
    let mut be = ClarabelBackend::new(cfg.tolerances());
    let (sol, solved, _) = plan(&p, &mut be, &cfg.plan_options()).unwrap();
    let report = validate(&sol, &solved);
    assert!(report.pass, "{:?}", report.failures);
    assert!((sol.mu[20][0] - 0.1).abs() < 1e-6);
    for s in &sol.sigma {
        assert!(quadsteer::linalg::min_eigenvalue(s) > 0.0);
    }
}
