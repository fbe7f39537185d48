//! Solver backends for [`ConicProgram`].

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::program::{Cone, ConicProgram};
use crate::error::{Error, Result};

/// Environment variable naming the backend used by the CLI.
pub const BACKEND_ENV: &str = "QUADSTEER_BACKEND";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Inaccurate,
}

#[derive(Clone, Debug)]
pub struct RawSolution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: u32,
    pub solve_seconds: f64,
    /// Backend-specific status string.
    pub detail: String,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverTolerances {
    pub feasibility: f64,
    pub gap_rel: f64,
    pub gap_abs: f64,
    pub max_iterations: u32,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-8,
            gap_rel: 1e-8,
            gap_abs: 1e-8,
            max_iterations: 200,
        }
    }
}

/// A conic solver. Instances need not be shareable; create one per concurrent solve.
pub trait SolverBackend {
    fn name(&self) -> &str;
    fn solve(&mut self, program: &ConicProgram) -> Result<RawSolution>;
}

/// Interior-point backend built on Clarabel.
#[derive(Clone, Debug, Default)]
pub struct ClarabelBackend {
    pub tolerances: SolverTolerances,
    pub verbose: bool,
}

impl ClarabelBackend {
    pub fn new(tolerances: SolverTolerances) -> Self {
        Self {
            tolerances,
            verbose: false,
        }
    }
}

/// Selects a backend by name (`clarabel` is the only one shipped).
pub fn backend_from_name(name: &str) -> Result<Box<dyn SolverBackend + Send>> {
    backend_with_tolerances(name, SolverTolerances::default())
}

pub fn backend_with_tolerances(
    name: &str,
    tolerances: SolverTolerances,
) -> Result<Box<dyn SolverBackend + Send>> {
    match name.to_ascii_lowercase().as_str() {
        "" | "clarabel" => Ok(Box::new(ClarabelBackend::new(tolerances))),
        other => Err(Error::Backend(format!("unknown backend '{other}'"))),
    }
}

/// Backend named by [`BACKEND_ENV`], defaulting to Clarabel.
pub fn backend_from_env() -> Result<Box<dyn SolverBackend + Send>> {
    backend_from_name(&std::env::var(BACKEND_ENV).unwrap_or_default())
}

struct Triplets {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    fn into_csc(mut self) -> CscMatrix<f64> {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0usize; self.cols + 1];
        let mut rowval = Vec::with_capacity(self.entries.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *nzval.last_mut().unwrap() += v;
                continue;
            }
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..self.cols {
            colptr[c + 1] += colptr[c];
        }
        CscMatrix::new(self.rows, self.cols, colptr, rowval, nzval)
    }
}

impl SolverBackend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&mut self, program: &ConicProgram) -> Result<RawSolution> {
        program.check()?;
        let n = program.n_vars;

        // Clarabel form: minimize 1/2 x'Px + q'x  s.t.  Ax + s = b, s in K.
        // A row e(x) = g'x + h in K maps to A = -g, b = h; PSD off-diagonals scale by sqrt(2).
        let mut q = vec![0.0; n];
        for &(j, v) in &program.objective.terms {
            q[j] += v;
        }
        let mut p = Triplets {
            rows: n,
            cols: n,
            entries: Vec::new(),
        };
        for &(i, j, w) in &program.quadratic {
            p.entries.push((i, j, 2.0 * w));
        }

        let mut a = Triplets {
            rows: 0,
            cols: n,
            entries: Vec::new(),
        };
        let mut b = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let sqrt2 = std::f64::consts::SQRT_2;
        for c in &program.constraints {
            let scales: Vec<f64> = match c.cone {
                Cone::Psd(dim) => {
                    let mut s = Vec::with_capacity(c.rows.len());
                    for col in 0..dim {
                        for row in 0..=col {
                            s.push(if row == col { 1.0 } else { sqrt2 });
                        }
                    }
                    s
                }
                _ => vec![1.0; c.rows.len()],
            };
            for (expr, scale) in c.rows.iter().zip(scales) {
                let r = b.len();
                for &(j, v) in &expr.terms {
                    a.entries.push((r, j, -v * scale));
                }
                b.push(expr.constant * scale);
            }
            let len = c.rows.len();
            let cone = match c.cone {
                Cone::Zero => SupportedConeT::ZeroConeT(len),
                Cone::Nonnegative => SupportedConeT::NonnegativeConeT(len),
                Cone::SecondOrder => SupportedConeT::SecondOrderConeT(len),
                Cone::Psd(dim) => SupportedConeT::PSDTriangleConeT(dim),
            };
            // Merge adjacent zero / nonnegative cones to keep the cone list short.
            match (cones.last_mut(), &cone) {
                (Some(SupportedConeT::ZeroConeT(k)), SupportedConeT::ZeroConeT(l)) => *k += l,
                (Some(SupportedConeT::NonnegativeConeT(k)), SupportedConeT::NonnegativeConeT(l)) => {
                    *k += l
                }
                _ => cones.push(cone),
            }
        }
        a.rows = b.len();

        let settings = DefaultSettingsBuilder::default()
            .verbose(self.verbose)
            .tol_feas(self.tolerances.feasibility)
            .tol_gap_rel(self.tolerances.gap_rel)
            .tol_gap_abs(self.tolerances.gap_abs)
            .max_iter(self.tolerances.max_iterations)
            .build()
            .map_err(|e| Error::Backend(format!("settings: {e:?}")))?;

        let p_csc = p.into_csc();
        let a_csc = a.into_csc();
        let start = Instant::now();
        let mut solver = DefaultSolver::new(&p_csc, &q, &a_csc, &b, &cones, settings)
            .map_err(|e| Error::Backend(format!("setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible
            | SolverStatus::AlmostPrimalInfeasible
            | SolverStatus::DualInfeasible
            | SolverStatus::AlmostDualInfeasible => SolveStatus::Infeasible,
            _ => SolveStatus::Inaccurate,
        };
        Ok(RawSolution {
            objective: program.objective_value(&sol.x),
            x: sol.x.clone(),
            status,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            iterations: sol.iterations,
            solve_seconds: start.elapsed().as_secs_f64(),
            detail: format!("{:?}", sol.status),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covsteer::program::{AffineExpr, MatExpr, VarKind};
    use nalgebra::DMatrix;

    #[test]
    fn psd_toy_problem_is_optimal() {
        // maximize x12 subject to [[1, x12], [x12, 1]] >= 0  ->  x12 = 1.
        let mut p = ConicProgram::new();
        let s = p.add_block("S", VarKind::Symmetric(2));
        p.add_objective(AffineExpr::var(s.index(0, 1)) * -1.0);
        let mut fix = AffineExpr::var(s.index(0, 0));
        fix.constant = -1.0;
        let mut fix2 = AffineExpr::var(s.index(1, 1));
        fix2.constant = -1.0;
        p.add_constraint("diag", Cone::Zero, vec![fix, fix2]);
        p.add_psd("lmi", &s.expr());
        let raw = ClarabelBackend::default().solve(&p).unwrap();
        assert_eq!(raw.status, SolveStatus::Optimal);
        assert!((raw.x[s.index(0, 1)] - 1.0).abs() < 1e-6);
        assert!(raw.primal_residual < 1e-8 && raw.dual_residual < 1e-8);
    }

    #[test]
    fn epigraph_and_direct_quadratic_agree() {
        // minimize (x - 2)^2 + x with x in R: optimum at x = 1.5, value 1.75 (+ constants).
        let build = |epigraph: bool| {
            let mut p = ConicProgram::new();
            let x = p.add_block("x", VarKind::Vector(1));
            p.add_objective(AffineExpr::var(x.offset));
            let mut shifted = AffineExpr::var(x.offset);
            shifted.constant = -2.0;
            if epigraph {
                let t = p.add_block("t", VarKind::Vector(1));
                p.add_objective(AffineExpr::var(t.offset));
                p.add_squared_norm_epigraph("epi", t.offset, vec![shifted]);
            } else {
                p.add_quadratic(x.offset, x.offset, 1.0);
                p.add_objective(AffineExpr::var(x.offset) * -4.0 + AffineExpr::constant(4.0));
            }
            let raw = ClarabelBackend::default().solve(&p).unwrap();
            (raw.x[x.offset], raw.objective)
        };
        let (xe, oe) = build(true);
        let (xd, od) = build(false);
        assert!((xe - 1.5).abs() < 1e-6 && (xd - 1.5).abs() < 1e-6);
        assert!((oe - 1.75).abs() < 1e-6 && (od - 1.75).abs() < 1e-6);
    }

    #[test]
    fn infeasible_lmi_is_reported() {
        // S <= -I and S >= 0 cannot both hold.
        let mut p = ConicProgram::new();
        let s = p.add_block("S", VarKind::Symmetric(2));
        p.add_psd("nonneg", &s.expr());
        let neg = MatExpr::from_const(&(DMatrix::identity(2, 2) * -1.0)).sub(&s.expr());
        p.add_psd("negative", &neg);
        let raw = ClarabelBackend::default().solve(&p).unwrap();
        assert_eq!(raw.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unknown_backend_name_is_rejected() {
        assert!(backend_from_name("mosek").is_err());
        assert_eq!(backend_from_name("Clarabel").unwrap().name(), "clarabel");
    }
}
