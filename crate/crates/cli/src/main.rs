//! `quadsteer` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 infeasible problem,
//! 4 numerical failure, 1 anything else (I/O).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use quadsteer::aero::{train, DragModel, FlightDataset, GroundTruthAero, TrainConfig};
use quadsteer::covsteer::{
    assemble, backend_with_tolerances, plan, validate, CovSteerProblem, CovSteerSolution, PlanLog,
    ValidationReport, BACKEND_ENV,
};
use quadsteer::lqr::LqrTracker;
use quadsteer::montecarlo::{
    ellipse_series, emit_report, run_experiment, ExperimentPlan, ExperimentSetup, PlantKind,
};
use quadsteer::quadsim::{
    generate_synthetic_flights, run_closed_loop, EstimatorKind, FlightLogConfig, TraceSummary, TrackingPolicy,
};
use quadsteer::scenario::{ControllerKind, ScenarioConfig};
use quadsteer::Error;

const SOLUTION_FORMAT: &str = "quadsteer-solution";
const SOLUTION_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "quadsteer-run";

#[derive(Parser, Debug)]
#[command(name = "quadsteer", version, about = "Covariance steering for quadrotors in wind")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a scenario's covariance steering program and validate the result.
    Solve(SolveArgs),
    /// Fit a drag model from still-air flight data.
    Train(TrainArgs),
    /// Monte Carlo rollouts of a planned scenario.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Shipped scenario name (figure8, landing, minimal) or path to a TOML file.
    scenario: String,
    /// Run directory.
    #[arg(long, short, default_value = "runs/solve")]
    out: PathBuf,
    /// Also write the final conic program as program.cbf.
    #[arg(long)]
    export_program: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TruthKind {
    Quadratic,
    Linear,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["synthetic", "data"]))]
struct TrainArgs {
    /// Generate still-air flights from the simulator's ground-truth drag.
    #[arg(long)]
    synthetic: bool,
    /// Flight log CSV (columns documented in docs/formats.md).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ground truth used with --synthetic.
    #[arg(long, value_enum, default_value = "quadratic")]
    truth: TruthKind,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to write.
    #[arg(long, short, default_value = "drag_model.json")]
    out: PathBuf,
    /// Also save the generated dataset (with --synthetic).
    #[arg(long)]
    save_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    scenario: String,
    #[arg(long, value_parser = parse_controller)]
    controller: Option<ControllerKind>,
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<EstimatorKind>,
    /// Number of rollouts.
    #[arg(short = 'M', long = "rollouts", value_parser = clap::value_parser!(u64).range(1..))]
    rollouts: Option<u64>,
    /// Seed of rollout 0; rollout i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "nonlinear")]
    plant: PlantArg,
    /// Run the {ocs, lqr} x {ekf, lp} grid instead of a single combination.
    #[arg(long)]
    grid: bool,
    /// Drag model file for the estimator; defaults to the linear part of the simulator truth.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reuse a solution file from `solve` instead of planning again.
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Containment ellipse scale.
    #[arg(long, default_value_t = 1.0)]
    inflation: f64,
    /// Number of per-rollout trace CSVs to keep (nonlinear plant only).
    #[arg(long, default_value_t = 10)]
    traces: usize,
    #[arg(long, short, default_value = "runs/run")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlantArg {
    Linear,
    Nonlinear,
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    format: String,
    version: u32,
    scenario: String,
    solution: CovSteerSolution,
    validation: ValidationReport,
    log: PlanLog,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'a str,
    tool_version: &'a str,
    command: Vec<String>,
    scenario: Option<String>,
    backend: String,
    created_unix_s: u64,
    elapsed_s: f64,
    files: Vec<String>,
}

fn write_manifest(dir: &Path, scenario: Option<&str>, files: &[PathBuf], started: Instant) -> anyhow::Result<()> {
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        tool_version: env!("CARGO_PKG_VERSION"),
        command: std::env::args().collect(),
        scenario: scenario.map(str::to_string),
        backend: std::env::var(BACKEND_ENV).unwrap_or_else(|_| "clarabel".into()),
        created_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        elapsed_s: started.elapsed().as_secs_f64(),
        files: files
            .iter()
            .map(|p| {
                p.strip_prefix(dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn plan_scenario(cfg: &ScenarioConfig) -> anyhow::Result<(SolutionFile, CovSteerProblem)> {
    let problem = cfg.problem()?;
    let backend_name = std::env::var(BACKEND_ENV).unwrap_or_default();
    let mut backend = backend_with_tolerances(&backend_name, cfg.tolerances())?;
    let (solution, solved, log) = plan(&problem, backend.as_mut(), &cfg.plan_options())?;
    let validation = validate(&solution, &solved);
    let file = SolutionFile {
        format: SOLUTION_FORMAT.into(),
        version: SOLUTION_VERSION,
        scenario: cfg.name.clone(),
        solution,
        validation,
        log,
    };
    Ok((file, solved))
}

fn cmd_solve(args: &SolveArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = ScenarioConfig::resolve(&args.scenario)?;
    let (file, solved) = plan_scenario(&cfg)?;
    let v = &file.validation;
    println!(
        "{}: status {:?}, objective {:.6}, solve {:.2} s",
        cfg.name, file.solution.status, file.solution.objective, file.solution.solve_seconds
    );
    println!(
        "  max relaxation gap {:.3e}, covariance dynamics {:.3e}, terminal excess {:.3e}",
        v.max_relaxation_gap, v.max_covariance_dynamics, v.terminal_excess
    );
    for c in &v.chance {
        println!("  chance {c:?}");
    }

    std::fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    let sol_path = args.out.join("solution.json");
    write_json(&sol_path, &file)?;
    files.push(sol_path);
    let val_path = args.out.join("validation.json");
    write_json(&val_path, v)?;
    files.push(val_path);
    let scen_path = args.out.join("scenario.toml");
    std::fs::write(&scen_path, cfg.to_toml()?)?;
    files.push(scen_path);
    let ell_path = args.out.join("ellipses.csv");
    let series = ellipse_series(&file.solution, cfg.system.dt_s, 0, 20);
    quadsteer::montecarlo::write_ellipses(&series, std::fs::File::create(&ell_path)?)?;
    files.push(ell_path);
    if args.export_program {
        let path = args.out.join("program.cbf");
        assemble(&solved)?
            .program
            .write_cbf(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        files.push(path);
    }
    write_manifest(&args.out, Some(&cfg.name), &files, started)?;

    if !v.pass {
        return Err(Error::Conditioning {
            step: 0,
            detail: format!("solution failed validation: {}", v.failures.join("; ")),
        }
        .into());
    }
    println!("validation passed; wrote {}", args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let dataset = if args.synthetic {
        let truth = match args.truth {
            TruthKind::Quadratic => GroundTruthAero::default(),
            TruthKind::Linear => GroundTruthAero::linear_only(GroundTruthAero::default().linear),
        };
        let data = generate_synthetic_flights(&truth, &FlightLogConfig::default(), args.seed)?;
        if let Some(path) = &args.save_data {
            data.write_csv(path)?;
        }
        data
    } else {
        let path = args.data.as_ref().expect("clap enforces a data source");
        FlightDataset::read_csv(path)?
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        tikhonov_lambda: args.lambda,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let model = train(&dataset, &cfg)?;
    let h = model.history.as_ref().expect("training records history");
    println!(
        "samples: {} train / {} validation",
        h.train_samples, h.validation_samples
    );
    println!("C_d = [{:.4}, {:.4}, {:.4}]", model.c_d.x, model.c_d.y, model.c_d.z);
    println!("{:<8} {:>14} {:>14}", "model", "train MSE", "valid MSE");
    println!(
        "{:<8} {:>14.6e} {:>14.6e}",
        "linear", h.linear_train_mse, h.linear_validation_mse
    );
    println!(
        "{:<8} {:>14.6e} {:>14.6e}",
        "hybrid", h.hybrid_train_mse, h.hybrid_validation_mse
    );
    model.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_solution(path: &Path, cfg: &ScenarioConfig) -> anyhow::Result<SolutionFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SolutionFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if file.format != SOLUTION_FORMAT || file.version != SOLUTION_VERSION {
        return Err(Error::Config(format!(
            "{}: expected {SOLUTION_FORMAT} v{SOLUTION_VERSION}, found {} v{}",
            path.display(),
            file.format,
            file.version
        ))
        .into());
    }
    if file.solution.horizon() != cfg.system.horizon {
        return Err(Error::Config(format!(
            "solution horizon {} does not match scenario horizon {}",
            file.solution.horizon(),
            cfg.system.horizon
        ))
        .into());
    }
    Ok(file)
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = ScenarioConfig::resolve(&args.scenario)?;
    let problem = cfg.problem()?;
    let file = match &args.solution {
        Some(path) => load_solution(path, &cfg)?,
        None => plan_scenario(&cfg)?.0,
    };
    if !file.validation.pass {
        return Err(Error::Conditioning {
            step: 0,
            detail: format!("plan failed validation: {}", file.validation.failures.join("; ")),
        }
        .into());
    }
    let sol = &file.solution;
    let (q, r) = cfg.lqr_weights()?;
    let lqr = LqrTracker::around(sol, problem.sys.a(0), problem.sys.b(0), &q, &r)?;
    let sim = cfg.sim_config()?;
    let model = match &args.model {
        Some(path) => DragModel::load(path)?,
        None => DragModel::linear(sim.truth.linear),
    };
    let model = Arc::new(model);
    let setup = ExperimentSetup {
        problem: &problem,
        solution: sol,
        lqr: Some(&lqr),
        sim: &sim,
        model: model.clone(),
    };

    let rollouts = args.rollouts.map(|m| m as usize).unwrap_or(cfg.experiment.rollouts);
    let seed = args.seed.unwrap_or(cfg.experiment.seed);
    let plant = match args.plant {
        PlantArg::Linear => PlantKind::Linear,
        PlantArg::Nonlinear => PlantKind::Nonlinear,
    };
    let combos: Vec<(ControllerKind, EstimatorKind)> = if args.grid {
        [ControllerKind::Ocs, ControllerKind::Lqr]
            .into_iter()
            .flat_map(|c| [EstimatorKind::Ekf, EstimatorKind::Lp].map(|e| (c, e)))
            .collect()
    } else {
        vec![(
            args.controller.unwrap_or(cfg.experiment.controller),
            args.estimator.unwrap_or(cfg.experiment.estimator),
        )]
    };

    let mut reports = Vec::new();
    for &(controller, estimator) in &combos {
        let plan = ExperimentPlan {
            scenario: cfg.name.clone(),
            controller,
            estimator,
            plant,
            rollouts,
            seed_base: seed,
            inflation: args.inflation,
            moment_steps: Vec::new(),
        };
        let report = run_experiment(&plan, &setup)?;
        println!(
            "{:<4} {:<6} M={:<5} tracking {:>8.3} cm  cmd rate {:>8}  containment {:.4}  failed {}",
            controller.name(),
            estimator.name(),
            report.completed,
            report.rms_tracking_cm,
            report
                .rms_cmd_rate
                .map_or("-".to_string(), |v| format!("{v:.4}")),
            report.containment_overall,
            report.failed
        );
        reports.push(report);
    }

    std::fs::create_dir_all(&args.out)?;
    let series = ellipse_series(sol, cfg.system.dt_s, 100.min(sol.horizon()), 20);
    let mut files = emit_report(&reports, Some(&series), &args.out)?;

    if plant == PlantKind::Nonlinear && args.traces > 0 {
        let dir = args.out.join("traces");
        std::fs::create_dir_all(&dir)?;
        let keep = args.traces.min(rollouts);
        let mut summaries = Vec::new();
        for &(controller, estimator) in &combos {
            let policy: &dyn TrackingPolicy = match controller {
                ControllerKind::Ocs => sol,
                ControllerKind::Lqr => &lqr,
            };
            for i in 0..keep {
                let s = seed.wrapping_add(i as u64);
                let x0 = quadsteer::montecarlo::initial_state(&problem, s);
                let trace = run_closed_loop(&sim, policy, model.clone(), estimator, &x0, s)?;
                let path = dir.join(format!(
                    "{}_{}_{:04}.csv",
                    controller.name(),
                    estimator.name(),
                    i
                ));
                trace.save_csv(&path)?;
                summaries.push(TraceSummaryEntry {
                    file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    controller,
                    estimator,
                    seed: s,
                    summary: trace.summary(policy),
                });
                files.push(path);
            }
        }
        let path = dir.join("summary.json");
        write_json(&path, &summaries)?;
        files.push(path);
    }
    write_manifest(&args.out, Some(&cfg.name), &files, started)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TraceSummaryEntry {
    file: String,
    controller: ControllerKind,
    estimator: EstimatorKind,
    seed: u64,
    #[serde(flatten)]
    summary: TraceSummary,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::ProtocolViolation(_)) => 2,
        Some(Error::Infeasible(_)) => 3,
        Some(
            Error::Conditioning { .. }
            | Error::DegenerateReference(_)
            | Error::FlatnessSingularity(_)
            | Error::IntegrationFailure { .. }
            | Error::Backend(_),
        ) => 4,
        Some(Error::Io(_) | Error::Json(_)) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Train(a) => cmd_train(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
