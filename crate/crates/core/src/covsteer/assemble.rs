//! Builds the covariance steering semidefinite program.
//!
//! Decision variables per step: `Sigma_k` (state covariance), `U_k = K_k Sigma_k`,
//! `Y_k >= U_k Sigma_k^{-1} U_k^T` (input covariance bound), the mean `mu_k` and
//! the feedforward `v_k`. The nonconvex `Y_k = K_k Sigma_k K_k^T` is relaxed to the
//! Schur complement `[[Y_k, U_k], [U_k^T, Sigma_k]] >= 0`.

use nalgebra::DMatrix;

use super::program::{AffineExpr, ConicProgram, MatExpr, VarBlock, VarKind};
use super::problem::{CovSteerProblem, TerminalMeanMode};
use crate::chance::ConstraintTarget;
use crate::error::Result;
use crate::linalg::psd_factor_rows;

/// How quadratic mean and feedforward costs enter the program.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuadraticCostMode {
    /// Epigraph variables with rotated second-order cones (linear-conic program).
    #[default]
    Epigraph,
    /// Quadratic objective terms passed to the backend directly.
    Direct,
}

/// Magnitudes used to normalize covariance variables before they reach the solver.
///
/// `Sigma = sigma * S~`, `Y = input * Y~` and `U = sqrt(sigma * input) * U~`, so the
/// relaxation LMI keeps its form under a congruence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariableScaling {
    pub sigma: f64,
    pub input: f64,
}

impl VariableScaling {
    pub fn unit() -> Self {
        Self {
            sigma: 1.0,
            input: 1.0,
        }
    }

    /// Geometric mean of the boundary covariance magnitudes; inputs sized so that
    /// `B Y B^T` is comparable to `Sigma`.
    pub fn auto(p: &CovSteerProblem) -> Self {
        let n = p.sys.state_dim() as f64;
        let si = p.boundary.sigma_i.trace() / n;
        let sf = p.boundary.sigma_f.trace() / n;
        let sigma = (si * sf).sqrt();
        let b = p.sys.b(0);
        let gain = b.singular_values().max().powi(2);
        let input = if gain > 0.0 { sigma / gain } else { sigma };
        if sigma.is_finite() && sigma > 0.0 && input.is_finite() {
            Self { sigma, input }
        } else {
            Self::unit()
        }
    }

    fn gain(&self) -> f64 {
        (self.sigma * self.input).sqrt()
    }
}

/// Variable blocks of an assembled program, indexed by step.
#[derive(Clone, Debug)]
pub struct Layout {
    pub sigma: Vec<VarBlock>,
    pub gain_cov: Vec<VarBlock>,
    pub input_cov: Vec<VarBlock>,
    pub mean: Vec<VarBlock>,
    pub feedforward: Vec<VarBlock>,
}

impl Layout {
    fn declare(
        program: &mut ConicProgram,
        n: usize,
        m: usize,
        horizon: usize,
        scaling: VariableScaling,
    ) -> Self {
        let mut layout = Layout {
            sigma: Vec::with_capacity(horizon + 1),
            gain_cov: Vec::with_capacity(horizon),
            input_cov: Vec::with_capacity(horizon),
            mean: Vec::with_capacity(horizon + 1),
            feedforward: Vec::with_capacity(horizon),
        };
        for k in 0..=horizon {
            layout
                .sigma
                .push(program.add_scaled_block(format!("Sigma[{k}]"), VarKind::Symmetric(n), scaling.sigma));
            layout
                .mean
                .push(program.add_block(format!("mu[{k}]"), VarKind::Vector(n)));
            if k < horizon {
                layout.gain_cov.push(program.add_scaled_block(
                    format!("U[{k}]"),
                    VarKind::Dense { rows: m, cols: n },
                    scaling.gain(),
                ));
                layout.input_cov.push(program.add_scaled_block(
                    format!("Y[{k}]"),
                    VarKind::Symmetric(m),
                    scaling.input,
                ));
                layout
                    .feedforward
                    .push(program.add_block(format!("v[{k}]"), VarKind::Vector(m)));
            }
        }
        layout
    }

    /// Recovers the layout from a program assembled by [`assemble`].
    pub fn from_program(program: &ConicProgram, horizon: usize) -> Option<Self> {
        let find = |name: String| program.block(&name).cloned();
        let mut layout = Layout {
            sigma: Vec::new(),
            gain_cov: Vec::new(),
            input_cov: Vec::new(),
            mean: Vec::new(),
            feedforward: Vec::new(),
        };
        for k in 0..=horizon {
            layout.sigma.push(find(format!("Sigma[{k}]"))?);
            layout.mean.push(find(format!("mu[{k}]"))?);
            if k < horizon {
                layout.gain_cov.push(find(format!("U[{k}]"))?);
                layout.input_cov.push(find(format!("Y[{k}]"))?);
                layout.feedforward.push(find(format!("v[{k}]"))?);
            }
        }
        Some(layout)
    }
}

/// Assembled program plus its variable layout.
#[derive(Clone, Debug)]
pub struct AssembledProgram {
    pub program: ConicProgram,
    pub layout: Layout,
}

fn trace_product(weight: &DMatrix<f64>, block: &VarBlock) -> AffineExpr {
    // tr(W S) = sum_ij W_ij S_ij over a symmetric block.
    let n = weight.nrows();
    let mut e = AffineExpr::default();
    for j in 0..n {
        for i in 0..n {
            e.add_term(block.index(i, j), block.scale * weight[(i, j)]);
        }
    }
    e.compress()
}

fn factor_rows(weight: &DMatrix<f64>, v: &VarBlock) -> Vec<AffineExpr> {
    let f = psd_factor_rows(weight, 1e-14);
    (0..f.nrows())
        .map(|r| {
            let mut e = AffineExpr::default();
            for c in 0..f.ncols() {
                e.add_term(v.index(c, 0), v.scale * f[(r, c)]);
            }
            e.compress()
        })
        .collect()
}

pub fn assemble(p: &CovSteerProblem) -> Result<AssembledProgram> {
    assemble_with(p, QuadraticCostMode::Epigraph)
}

pub fn assemble_with(p: &CovSteerProblem, mode: QuadraticCostMode) -> Result<AssembledProgram> {
    assemble_scaled(p, mode, VariableScaling::auto(p))
}

pub fn assemble_scaled(
    p: &CovSteerProblem,
    mode: QuadraticCostMode,
    scaling: VariableScaling,
) -> Result<AssembledProgram> {
    p.check()?;
    let sys = &p.sys;
    let n = sys.state_dim();
    let m = sys.input_dim();
    let horizon = sys.horizon();
    let mut prog = ConicProgram::new();
    let layout = Layout::declare(&mut prog, n, m, horizon, scaling);
    // Rows of covariance constraints are divided by the magnitude of their variables.
    let inv_sigma = 1.0 / scaling.sigma;
    let inv_input = 1.0 / scaling.input;
    let mut congruence = DMatrix::zeros(m + n, m + n);
    for i in 0..m {
        congruence[(i, i)] = inv_input.sqrt();
    }
    for i in m..m + n {
        congruence[(i, i)] = inv_sigma.sqrt();
    }

    // Boundary conditions.
    prog.add_sym_equality(
        "initial_covariance",
        &layout.sigma[0]
            .expr()
            .sub(&MatExpr::from_const(&p.boundary.sigma_i))
            .scaled(inv_sigma),
    );
    let mu0 = layout.mean[0]
        .expr()
        .sub(&MatExpr::from_const(&DMatrix::from_column_slice(
            n,
            1,
            p.boundary.mu_i.as_slice(),
        )));
    prog.add_constraint(
        "initial_mean",
        super::program::Cone::Zero,
        (0..n).map(|i| mu0.get(i, 0).clone()).collect(),
    );

    for k in 0..horizon {
        let a = sys.a(k);
        let b = sys.b(k);
        let d = sys.d(k);
        let sigma = layout.sigma[k].expr();
        let u = layout.gain_cov[k].expr();
        let y = layout.input_cov[k].expr();

        // A S A' + B U A' + A U' B' + B Y B' + D D' - S_next = 0
        let bua = u.left_mul(b).right_mul(&a.transpose());
        let dyn_expr = sigma
            .left_mul(a)
            .right_mul(&a.transpose())
            .add(&bua)
            .add(&bua.transpose())
            .add(&y.left_mul(b).right_mul(&b.transpose()))
            .add(&MatExpr::from_const(&(d * d.transpose())))
            .sub(&layout.sigma[k + 1].expr());
        prog.add_sym_equality(format!("covariance_dynamics[{k}]"), &dyn_expr.scaled(inv_sigma));

        prog.add_psd(
            format!("relaxation[{k}]"),
            &MatExpr::block2(&y, &u, &u.transpose(), &sigma)
                .left_mul(&congruence)
                .right_mul(&congruence),
        );

        let mean_expr = layout.mean[k]
            .expr()
            .left_mul(a)
            .add(&layout.feedforward[k].expr().left_mul(b))
            .sub(&layout.mean[k + 1].expr());
        prog.add_constraint(
            format!("mean_dynamics[{k}]"),
            super::program::Cone::Zero,
            (0..n).map(|i| mean_expr.get(i, 0).clone()).collect(),
        );
    }

    // Terminal covariance cap.
    prog.add_psd(
        "terminal_covariance",
        &MatExpr::from_const(&p.boundary.sigma_f)
            .sub(&layout.sigma[horizon].expr())
            .scaled(inv_sigma),
    );
    if p.terminal_mean_mode == TerminalMeanMode::Equality {
        if let Some(mu_f) = &p.boundary.mu_f {
            let e = layout.mean[horizon]
                .expr()
                .sub(&MatExpr::from_const(&DMatrix::from_column_slice(n, 1, mu_f.as_slice())));
            prog.add_constraint(
                "terminal_mean",
                super::program::Cone::Zero,
                (0..n).map(|i| e.get(i, 0).clone()).collect(),
            );
        }
    }

    for (w, wp) in p.waypoints.iter().enumerate() {
        let e = layout.mean[wp.step].expr().left_mul(&wp.selector);
        let rows = (0..wp.selector.nrows())
            .map(|i| {
                let mut r = e.get(i, 0).clone();
                r.constant -= wp.target[i];
                r
            })
            .collect();
        prog.add_constraint(format!("waypoint[{w}]"), super::program::Cone::Zero, rows);
    }

    for (c, spec) in p.chance.iter().enumerate() {
        let target = spec.constraint.target;
        for k in spec.constraint.window.steps(target, horizon) {
            let s = spec.surrogate_at(k, horizon)?;
            let (cov, mean) = match target {
                ConstraintTarget::State => (&layout.sigma[k], &layout.mean[k]),
                ConstraintTarget::Input => (&layout.input_cov[k], &layout.feedforward[k]),
            };
            // beta - ell' C ell - alpha' mean >= 0
            let ell_outer = &s.ell * s.ell.transpose();
            let mut row = trace_product(&ell_outer, cov) * -1.0;
            for i in 0..s.alpha.len() {
                row.add_term(mean.index(i, 0), -mean.scale * s.alpha[i]);
            }
            row.constant += s.beta;
            prog.add_constraint(
                format!("chance[{c}][{k}]"),
                super::program::Cone::Nonnegative,
                vec![row],
            );
        }
    }

    for (c, bound) in p.cov_bounds.iter().enumerate() {
        for k in bound.window.steps(bound.target, horizon) {
            let (cov, row_scale) = match bound.target {
                ConstraintTarget::State => (&layout.sigma[k], inv_sigma),
                ConstraintTarget::Input => (&layout.input_cov[k], inv_input),
            };
            let projected = cov
                .expr()
                .left_mul(&bound.selector.transpose())
                .right_mul(&bound.selector);
            prog.add_psd(
                format!("covariance_bound[{c}][{k}]"),
                &MatExpr::from_const(&bound.cap)
                    .sub(&projected)
                    .scaled(row_scale),
            );
        }
    }

    // Objective.
    let w = &p.weights;
    let q_bar_zero = w.q_bar.iter().all(|&v| v == 0.0);
    let r_bar_zero = w.r_bar.iter().all(|&v| v == 0.0);
    for k in 0..horizon {
        prog.add_objective(trace_product(&w.q[k], &layout.sigma[k]));
        prog.add_objective(trace_product(&w.r[k], &layout.input_cov[k]));
        for (weight, block, zero, tag) in [
            (&w.q_bar, &layout.mean[k], q_bar_zero, "mean_cost"),
            (&w.r_bar, &layout.feedforward[k], r_bar_zero, "feedforward_cost"),
        ] {
            if zero {
                continue;
            }
            match mode {
                QuadraticCostMode::Epigraph => {
                    let t = prog.add_block(format!("t_{tag}[{k}]"), VarKind::Vector(1));
                    prog.add_objective(AffineExpr::var(t.offset));
                    prog.add_squared_norm_epigraph(
                        format!("{tag}[{k}]"),
                        t.offset,
                        factor_rows(weight, block),
                    );
                }
                QuadraticCostMode::Direct => {
                    let dim = weight.nrows();
                    for j in 0..dim {
                        for i in 0..=j {
                            if weight[(i, j)] != 0.0 {
                                prog.add_quadratic(
                                    block.index(i, 0),
                                    block.index(j, 0),
                                    block.scale * block.scale * weight[(i, j)],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(AssembledProgram {
        program: prog,
        layout,
    })
}
