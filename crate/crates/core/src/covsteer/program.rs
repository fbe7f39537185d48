//! Backend-neutral linear conic program.
//!
//! Every constraint is a list of affine expressions `e(x)` required to lie in a
//! cone. PSD constraints list the upper triangle of a symmetric matrix
//! expression column by column (`(0,0), (0,1), (1,1), (0,2), ...`) with plain,
//! unscaled entries; backends apply whatever vectorization they need.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(index: usize) -> Self {
        Self {
            terms: vec![(index, 1.0)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, index: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((index, coef));
        }
    }

    /// Sorts terms by variable and merges duplicates.
    pub fn compress(mut self) -> Self {
        if self.terms.len() < 2 {
            self.terms.retain(|t| t.1 != 0.0);
            return self;
        }
        self.terms.sort_unstable_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (i, c) in self.terms {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.terms = merged;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    fn scale_in_place(&mut self, s: f64) {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
    }

    fn accumulate(&mut self, other: &AffineExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.terms.extend(other.terms.iter().map(|&(i, c)| (i, c * s)));
        self.constant += other.constant * s;
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        self.accumulate(&rhs, 1.0);
        self
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(mut self, rhs: AffineExpr) -> AffineExpr {
        self.accumulate(&rhs, -1.0);
        self
    }
}

impl Mul<f64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(mut self, rhs: f64) -> AffineExpr {
        self.scale_in_place(rhs);
        self
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self * -1.0
    }
}

/// Matrix of affine expressions, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatExpr {
    rows: usize,
    cols: usize,
    entries: Vec<AffineExpr>,
}

impl MatExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![AffineExpr::default(); rows * cols],
        }
    }

    pub fn from_const(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                out.entries[j * m.nrows() + i].constant = m[(i, j)];
            }
        }
        out
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> &AffineExpr {
        &self.entries[j * self.rows + i]
    }

    pub fn set(&mut self, i: usize, j: usize, e: AffineExpr) {
        self.entries[j * self.rows + i] = e;
    }

    /// `C * self` for a constant matrix `C`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> MatExpr {
        assert_eq!(c.ncols(), self.rows, "left_mul dimension mismatch");
        let mut out = MatExpr::zeros(c.nrows(), self.cols);
        for j in 0..self.cols {
            for i in 0..c.nrows() {
                let mut acc = AffineExpr::default();
                for l in 0..self.rows {
                    acc.accumulate(self.get(l, j), c[(i, l)]);
                }
                out.set(i, j, acc.compress());
            }
        }
        out
    }

    /// `self * C` for a constant matrix `C`.
    pub fn right_mul(&self, c: &DMatrix<f64>) -> MatExpr {
        assert_eq!(c.nrows(), self.cols, "right_mul dimension mismatch");
        let mut out = MatExpr::zeros(self.rows, c.ncols());
        for j in 0..c.ncols() {
            for i in 0..self.rows {
                let mut acc = AffineExpr::default();
                for l in 0..self.cols {
                    acc.accumulate(self.get(i, l), c[(l, j)]);
                }
                out.set(i, j, acc.compress());
            }
        }
        out
    }

    pub fn transpose(&self) -> MatExpr {
        let mut out = MatExpr::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    pub fn add(&self, other: &MatExpr) -> MatExpr {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &MatExpr) -> MatExpr {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &MatExpr, s: f64) -> MatExpr {
        assert_eq!(self.shape(), other.shape(), "matrix expression shape mismatch");
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                let mut e = a.clone();
                e.accumulate(b, s);
                e.compress()
            })
            .collect();
        MatExpr {
            rows: self.rows,
            cols: self.cols,
            entries,
        }
    }

    pub fn scaled(&self, s: f64) -> MatExpr {
        MatExpr {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e.clone() * s).collect(),
        }
    }

    /// `[[a, b], [c, d]]`.
    pub fn block2(a: &MatExpr, b: &MatExpr, c: &MatExpr, d: &MatExpr) -> MatExpr {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let rows = a.rows + c.rows;
        let cols = a.cols + b.cols;
        let mut out = MatExpr::zeros(rows, cols);
        for (blk, r0, c0) in [(a, 0, 0), (b, 0, a.cols), (c, a.rows, 0), (d, a.rows, a.cols)] {
            for j in 0..blk.cols {
                for i in 0..blk.rows {
                    out.set(r0 + i, c0 + j, blk.get(i, j).clone());
                }
            }
        }
        out
    }

    /// Upper-triangle entries, column by column.
    pub fn upper_triangle(&self) -> Vec<AffineExpr> {
        assert_eq!(self.rows, self.cols, "upper_triangle needs a square expression");
        let mut out = Vec::with_capacity(self.rows * (self.rows + 1) / 2);
        for j in 0..self.cols {
            for i in 0..=j {
                out.push(self.get(i, j).clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    Vector(usize),
    /// Upper triangle, column-major.
    Symmetric(usize),
    /// Column-major.
    Dense { rows: usize, cols: usize },
}

impl VarKind {
    pub fn len(&self) -> usize {
        match *self {
            VarKind::Vector(n) => n,
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Dense { rows, cols } => rows * cols,
        }
    }
}

/// Contiguous block of scalar variables. The modeled quantity is `scale * x`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarBlock {
    pub name: String,
    pub kind: VarKind,
    pub offset: usize,
    pub scale: f64,
}

impl VarBlock {
    pub fn len(&self) -> usize {
        self.kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar variable index of entry `(i, j)` (`j = 0` for vectors).
    pub fn index(&self, i: usize, j: usize) -> usize {
        match self.kind {
            VarKind::Vector(_) => self.offset + i,
            VarKind::Symmetric(_) => {
                let (r, c) = if i <= j { (i, j) } else { (j, i) };
                self.offset + c * (c + 1) / 2 + r
            }
            VarKind::Dense { rows, .. } => self.offset + j * rows + i,
        }
    }

    pub fn expr(&self) -> MatExpr {
        let (rows, cols) = match self.kind {
            VarKind::Vector(n) => (n, 1),
            VarKind::Symmetric(n) => (n, n),
            VarKind::Dense { rows, cols } => (rows, cols),
        };
        let mut out = MatExpr::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                out.set(i, j, AffineExpr::var(self.index(i, j)) * self.scale);
            }
        }
        out
    }

    pub fn read_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        match self.kind {
            VarKind::Vector(n) => DMatrix::from_fn(n, 1, |i, _| self.scale * x[self.index(i, 0)]),
            VarKind::Symmetric(n) => {
                DMatrix::from_fn(n, n, |i, j| self.scale * x[self.index(i, j)])
            }
            VarKind::Dense { rows, cols } => {
                DMatrix::from_fn(rows, cols, |i, j| self.scale * x[self.index(i, j)])
            }
        }
    }

    pub fn read_vector(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&x[self.offset..self.offset + self.len()]) * self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cone {
    Zero,
    Nonnegative,
    /// `e_0 >= ||(e_1, ..., e_k)||`.
    SecondOrder,
    /// Symmetric `n x n` matrix expression, upper triangle rows.
    Psd(usize),
}

#[derive(Clone, Debug)]
pub struct ConeConstraint {
    pub label: String,
    pub cone: Cone,
    pub rows: Vec<AffineExpr>,
}

#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    pub blocks: Vec<VarBlock>,
    pub n_vars: usize,
    pub objective: AffineExpr,
    /// `x^T W x` with `W` symmetric, listed as upper-triangle triplets `(i <= j, w_ij)`.
    pub quadratic: Vec<(usize, usize, f64)>,
    pub constraints: Vec<ConeConstraint>,
}

/// Counts of constraints by cone family.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProgramStats {
    pub variables: usize,
    pub equality_rows: usize,
    pub nonnegative_rows: usize,
    pub soc_cones: usize,
    pub psd_cones: BTreeMap<usize, usize>,
    pub constraints_by_label: BTreeMap<String, usize>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, kind: VarKind) -> VarBlock {
        self.add_scaled_block(name, kind, 1.0)
    }

    /// Block whose modeled value is `scale` times the solver variable.
    pub fn add_scaled_block(&mut self, name: impl Into<String>, kind: VarKind, scale: f64) -> VarBlock {
        assert!(scale > 0.0 && scale.is_finite(), "block scale must be positive");
        let block = VarBlock {
            name: name.into(),
            kind,
            offset: self.n_vars,
            scale,
        };
        self.n_vars += kind.len();
        self.blocks.push(block.clone());
        block
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn add_objective(&mut self, e: AffineExpr) {
        self.objective.accumulate(&e, 1.0);
    }

    pub fn add_quadratic(&mut self, i: usize, j: usize, w: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.quadratic.push((a, b, w));
    }

    pub fn add_constraint(&mut self, label: impl Into<String>, cone: Cone, rows: Vec<AffineExpr>) {
        if let Cone::Psd(n) = cone {
            assert_eq!(rows.len(), n * (n + 1) / 2, "PSD row count mismatch");
        }
        self.constraints.push(ConeConstraint {
            label: label.into(),
            cone,
            rows: rows.into_iter().map(AffineExpr::compress).collect(),
        });
    }

    /// Symmetric matrix expression equal to zero (upper triangle rows).
    pub fn add_sym_equality(&mut self, label: impl Into<String>, m: &MatExpr) {
        self.add_constraint(label, Cone::Zero, m.upper_triangle());
    }

    pub fn add_psd(&mut self, label: impl Into<String>, m: &MatExpr) {
        let n = m.shape().0;
        self.add_constraint(label, Cone::Psd(n), m.upper_triangle());
    }

    /// Epigraph `t >= ||f||^2` written as a second-order cone:
    /// `((t + 1) / 2, (t - 1) / 2, f) in SOC`.
    pub fn add_squared_norm_epigraph(&mut self, label: impl Into<String>, t: usize, f: Vec<AffineExpr>) {
        let mut rows = Vec::with_capacity(f.len() + 2);
        let mut top = AffineExpr::constant(0.5);
        top.add_term(t, 0.5);
        let mut second = AffineExpr::constant(-0.5);
        second.add_term(t, 0.5);
        rows.push(top);
        rows.push(second);
        rows.extend(f);
        self.add_constraint(label, Cone::SecondOrder, rows);
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut v = self.objective.eval(x);
        for &(i, j, w) in &self.quadratic {
            let m = if i == j { 1.0 } else { 2.0 };
            v += m * w * x[i] * x[j];
        }
        v
    }

    pub fn stats(&self) -> ProgramStats {
        let mut s = ProgramStats {
            variables: self.n_vars,
            ..Default::default()
        };
        for c in &self.constraints {
            match c.cone {
                Cone::Zero => s.equality_rows += c.rows.len(),
                Cone::Nonnegative => s.nonnegative_rows += c.rows.len(),
                Cone::SecondOrder => s.soc_cones += 1,
                Cone::Psd(n) => *s.psd_cones.entry(n).or_default() += 1,
            }
            let family = c.label.split('[').next().unwrap_or(&c.label).to_string();
            *s.constraints_by_label.entry(family).or_default() += 1;
        }
        s
    }

    /// Checks that every row references declared variables.
    pub fn check(&self) -> Result<()> {
        for c in &self.constraints {
            for r in &c.rows {
                if let Some(&(i, _)) = r.terms.iter().find(|t| t.0 >= self.n_vars) {
                    return Err(invalid(format!(
                        "constraint {} references undeclared variable {i}",
                        c.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the program in Conic Benchmark Format (CBF, version 3).
    ///
    /// Scalar variables are free; equality, nonnegative and second-order rows go
    /// to `CON` (`L=`, `L+`, `Q`); PSD constraints go to `PSDCON` with lower
    /// triangle `HCOORD`/`DCOORD` entries. Quadratic objective terms are not
    /// representable in CBF and are rejected.
    pub fn write_cbf<W: Write>(&self, mut out: W) -> Result<()> {
        if !self.quadratic.is_empty() {
            return Err(invalid(
                "CBF has no quadratic objective; assemble with epigraph costs",
            ));
        }
        let mut text = String::new();
        let _ = writeln!(text, "# quadsteer conic program");
        let _ = writeln!(text, "VER\n3\n");
        let _ = writeln!(text, "OBJSENSE\nMIN\n");
        let _ = writeln!(text, "VAR\n{} 1\nF {}\n", self.n_vars, self.n_vars);

        let scalar: Vec<&ConeConstraint> = self
            .constraints
            .iter()
            .filter(|c| !matches!(c.cone, Cone::Psd(_)))
            .collect();
        let psd: Vec<&ConeConstraint> = self
            .constraints
            .iter()
            .filter(|c| matches!(c.cone, Cone::Psd(_)))
            .collect();

        // Group consecutive scalar cones of the same family.
        let mut groups: Vec<(&'static str, usize)> = Vec::new();
        for c in &scalar {
            let tag = match c.cone {
                Cone::Zero => "L=",
                Cone::Nonnegative => "L+",
                Cone::SecondOrder => "Q",
                Cone::Psd(_) => unreachable!(),
            };
            match groups.last_mut() {
                Some(last) if last.0 == tag && tag != "Q" => last.1 += c.rows.len(),
                _ => groups.push((tag, c.rows.len())),
            }
        }
        let total_rows: usize = groups.iter().map(|g| g.1).sum();
        if total_rows > 0 {
            let _ = writeln!(text, "CON\n{} {}", total_rows, groups.len());
            for (tag, n) in &groups {
                let _ = writeln!(text, "{tag} {n}");
            }
            let _ = writeln!(text);
        }
        if !psd.is_empty() {
            let _ = writeln!(text, "PSDCON\n{}", psd.len());
            for c in &psd {
                if let Cone::Psd(n) = c.cone {
                    let _ = writeln!(text, "{n}");
                }
            }
            let _ = writeln!(text);
        }

        let obj: Vec<&(usize, f64)> = self.objective.terms.iter().collect();
        if !obj.is_empty() {
            let _ = writeln!(text, "OBJACOORD\n{}", obj.len());
            for (j, v) in obj {
                let _ = writeln!(text, "{j} {v:e}");
            }
            let _ = writeln!(text);
        }
        if self.objective.constant != 0.0 {
            let _ = writeln!(text, "OBJBCOORD\n{:e}\n", self.objective.constant);
        }

        let mut acoord = Vec::new();
        let mut bcoord = Vec::new();
        let mut row = 0usize;
        for c in &scalar {
            for r in &c.rows {
                for &(j, v) in &r.terms {
                    acoord.push((row, j, v));
                }
                if r.constant != 0.0 {
                    bcoord.push((row, r.constant));
                }
                row += 1;
            }
        }
        if !acoord.is_empty() {
            let _ = writeln!(text, "ACOORD\n{}", acoord.len());
            for (i, j, v) in acoord {
                let _ = writeln!(text, "{i} {j} {v:e}");
            }
            let _ = writeln!(text);
        }
        if !bcoord.is_empty() {
            let _ = writeln!(text, "BCOORD\n{}", bcoord.len());
            for (i, v) in bcoord {
                let _ = writeln!(text, "{i} {v:e}");
            }
            let _ = writeln!(text);
        }

        let mut hcoord = Vec::new();
        let mut dcoord = Vec::new();
        for (ci, c) in psd.iter().enumerate() {
            if let Cone::Psd(n) = c.cone {
                let mut idx = 0;
                for col in 0..n {
                    for r in 0..=col {
                        let e = &c.rows[idx];
                        // CBF stores the lower triangle: (k, l) with k >= l.
                        for &(j, v) in &e.terms {
                            hcoord.push((ci, j, col, r, v));
                        }
                        if e.constant != 0.0 {
                            dcoord.push((ci, col, r, e.constant));
                        }
                        idx += 1;
                    }
                }
            }
        }
        if !hcoord.is_empty() {
            let _ = writeln!(text, "HCOORD\n{}", hcoord.len());
            for (i, j, k, l, v) in hcoord {
                let _ = writeln!(text, "{i} {j} {k} {l} {v:e}");
            }
            let _ = writeln!(text);
        }
        if !dcoord.is_empty() {
            let _ = writeln!(text, "DCOORD\n{}", dcoord.len());
            for (i, k, l, v) in dcoord {
                let _ = writeln!(text, "{i} {k} {l} {v:e}");
            }
            let _ = writeln!(text);
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }
}
