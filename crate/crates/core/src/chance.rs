//! Affine chance constraints on the state or input distribution and their
//! deterministic surrogates.
//!
//! A constraint `P(alpha^T x <= b) >= delta` under `x ~ N(mu, Sigma)` is
//! equivalent to `alpha^T mu + phi sqrt(alpha^T Sigma alpha) <= b` with
//! `phi = probit(delta)`. The surrogate linearizes the square root around a
//! reference covariance, giving `ell^T Sigma ell + alpha^T mu - beta <= 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::linalg::min_eigenvalue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintTarget {
    State,
    Input,
}

/// Inclusive step range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl StepWindow {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(invalid(format!("window [{start}, {end}] is empty")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.start..=self.end).contains(&k)
    }

    /// Steps of the window that exist for the given target over horizon `n`.
    pub fn steps(&self, target: ConstraintTarget, horizon: usize) -> impl Iterator<Item = usize> {
        let last = match target {
            ConstraintTarget::State => horizon,
            ConstraintTarget::Input => horizon.saturating_sub(1),
        };
        self.start..=self.end.min(last)
    }
}

#[derive(Clone, Debug)]
pub struct AffineChanceConstraint {
    pub alpha: DVector<f64>,
    pub bound: f64,
    pub delta: f64,
    pub target: ConstraintTarget,
    pub window: StepWindow,
}

impl AffineChanceConstraint {
    pub fn new(
        alpha: DVector<f64>,
        bound: f64,
        delta: f64,
        target: ConstraintTarget,
        window: StepWindow,
    ) -> Result<Self> {
        if !(alpha.norm() > 0.0) {
            return Err(invalid("constraint normal must be nonzero"));
        }
        if !(delta > 0.5 && delta < 1.0) {
            return Err(invalid(format!("probability level {delta} outside (0.5, 1)")));
        }
        if !bound.is_finite() {
            return Err(invalid("constraint bound must be finite"));
        }
        Ok(Self {
            alpha,
            bound,
            delta,
            target,
            window,
        })
    }

    pub fn quantile(&self) -> f64 {
        probit(self.delta)
    }

    /// `alpha^T mu + phi sqrt(alpha^T Sigma alpha) - b`; nonpositive iff the
    /// chance constraint holds exactly.
    pub fn exact_margin(&self, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
        let s = quad_form(&self.alpha, sigma).max(0.0).sqrt();
        self.alpha.dot(mu) + self.quantile() * s - self.bound
    }
}

/// Deterministic surrogate `ell^T Sigma ell + alpha^T mu - beta <= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedSurrogate {
    pub ell: DVector<f64>,
    pub alpha: DVector<f64>,
    pub beta: f64,
    pub target: ConstraintTarget,
}

impl LinearizedSurrogate {
    /// Left-hand side; the surrogate holds when this is `<= 0`.
    pub fn value(&self, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
        quad_form(&self.ell, sigma) + self.alpha.dot(mu) - self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            beta,
            ..self.clone()
        }
    }
}

/// Standard normal quantile.
pub fn probit(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// First-order expansion of the exact constraint around `sigma_ref`.
///
/// `ell = alpha sqrt(phi / (2 s0))`, `beta = b - phi s0 / 2`, `s0 = sqrt(alpha^T sigma_ref alpha)`.
pub fn linearize(
    c: &AffineChanceConstraint,
    sigma_ref: &DMatrix<f64>,
) -> Result<LinearizedSurrogate> {
    if sigma_ref.shape() != (c.alpha.len(), c.alpha.len()) {
        return Err(invalid("reference covariance dimension mismatch"));
    }
    let variance = quad_form(&c.alpha, sigma_ref);
    if !(variance > 0.0) {
        return Err(Error::DegenerateReference(format!(
            "alpha^T Sigma_ref alpha = {variance:e}"
        )));
    }
    let s0 = variance.sqrt();
    let phi = c.quantile();
    Ok(LinearizedSurrogate {
        ell: &c.alpha * (phi / (2.0 * s0)).sqrt(),
        alpha: c.alpha.clone(),
        beta: c.bound - phi * s0 / 2.0,
        target: c.target,
    })
}

/// Exact `P(alpha^T x > b)` for `x ~ N(mu, Sigma)`.
pub fn verify_pointwise(c: &AffineChanceConstraint, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let mean = c.alpha.dot(mu);
    let variance = quad_form(&c.alpha, sigma);
    if variance <= 0.0 {
        return if mean > c.bound { 1.0 } else { 0.0 };
    }
    1.0 - normal_cdf((c.bound - mean) / variance.sqrt())
}

/// Linear matrix inequality `L^T Sigma L <= cap` on a subspace of the state
/// (or `Y_k <= cap` when targeting inputs).
#[derive(Clone, Debug)]
pub struct PartialCovarianceBound {
    pub selector: DMatrix<f64>,
    pub cap: DMatrix<f64>,
    pub target: ConstraintTarget,
    pub window: StepWindow,
}

impl PartialCovarianceBound {
    pub fn new(
        selector: DMatrix<f64>,
        cap: DMatrix<f64>,
        target: ConstraintTarget,
        window: StepWindow,
    ) -> Result<Self> {
        let p = selector.ncols();
        if cap.shape() != (p, p) {
            return Err(invalid(format!(
                "cap must be {p}x{p} to match a selector with {p} columns"
            )));
        }
        if (&cap - cap.transpose()).amax() > 1e-12 * cap.amax().max(1.0) || min_eigenvalue(&cap) <= 0.0
        {
            return Err(invalid("covariance cap must be symmetric positive definite"));
        }
        Ok(Self {
            selector,
            cap,
            target,
            window,
        })
    }

    /// Position block selector `L = [I_3; 0_3]` for a 6-state plant.
    pub fn position_selector() -> DMatrix<f64> {
        let mut l = DMatrix::zeros(6, 3);
        for i in 0..3 {
            l[(i, i)] = 1.0;
        }
        l
    }

    /// `lambda_max(L^T Sigma L - cap)`; nonpositive when the bound holds.
    pub fn violation(&self, sigma: &DMatrix<f64>) -> f64 {
        let projected = self.selector.transpose() * sigma * &self.selector;
        crate::linalg::max_eigenvalue(&(projected - &self.cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window() -> StepWindow {
        StepWindow::new(0, 10).unwrap()
    }

    fn unit(i: usize, n: usize) -> DVector<f64> {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        e
    }

    #[test]
    fn pointwise_symmetric_and_tail() {
        let c = AffineChanceConstraint::new(unit(0, 3), 0.0, 0.9, ConstraintTarget::State, window())
            .unwrap();
        let p = verify_pointwise(&c, &DVector::zeros(3), &DMatrix::identity(3, 3));
        assert!((p - 0.5).abs() < 1e-15);

        let c3 = AffineChanceConstraint { bound: 3.0, ..c };
        let p3 = verify_pointwise(&c3, &DVector::zeros(3), &DMatrix::identity(3, 3));
        assert!((p3 - 0.001_349_898_031_630_095).abs() < 1e-12, "{p3}");
    }

    #[test]
    fn pointwise_degenerate_covariance_is_indicator() {
        let c = AffineChanceConstraint::new(unit(1, 2), 1.0, 0.9, ConstraintTarget::State, window())
            .unwrap();
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(verify_pointwise(&c, &DVector::from_column_slice(&[0.0, 2.0]), &zero), 1.0);
        assert_eq!(verify_pointwise(&c, &DVector::from_column_slice(&[0.0, 0.5]), &zero), 0.0);
    }

    #[test]
    fn rejects_invalid_constraints() {
        let w = window();
        assert!(AffineChanceConstraint::new(DVector::zeros(3), 1.0, 0.9, ConstraintTarget::State, w)
            .is_err());
        assert!(AffineChanceConstraint::new(unit(0, 3), 1.0, 0.5, ConstraintTarget::State, w).is_err());
        assert!(AffineChanceConstraint::new(unit(0, 3), 1.0, 1.0, ConstraintTarget::State, w).is_err());
        assert!(StepWindow::new(5, 4).is_err());
    }

    #[test]
    fn degenerate_reference_is_an_error() {
        let c = AffineChanceConstraint::new(unit(0, 2), 1.0, 0.9, ConstraintTarget::State, window())
            .unwrap();
        let r = linearize(&c, &DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0])));
        assert!(matches!(r, Err(Error::DegenerateReference(_))));
    }

    #[test]
    fn probability_near_half_collapses_to_mean_constraint() {
        let c = AffineChanceConstraint::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            3.0,
            0.5 + 1e-12,
            ConstraintTarget::State,
            window(),
        )
        .unwrap();
        let s = linearize(&c, &DMatrix::identity(2, 2)).unwrap();
        assert!(s.ell.norm() < 1e-5);
        assert!((s.beta - 3.0).abs() < 1e-10);
    }

    /// Face 1 of the landing cone. The published row pairs
    /// `ell = [10.46, 0, 3.10]` with `alpha = [0, 3.33, 1]`; the linearization
    /// always yields `ell` parallel to `alpha`, so the reproducible parts are the
    /// vertical entry `3.10`, `beta = 0.5` and `|ell_horizontal|` within 1.5% of 10.46.
    #[test]
    fn landing_face_constants_are_reproduced() {
        let alpha = DVector::from_column_slice(&[0.0, 3.33, 1.0, 0.0, 0.0, 0.0]);
        let delta = 0.998_650_101_968_369_9; // Phi(3)
        let phi = probit(delta);
        assert!((phi - 3.0).abs() < 1e-9);
        let scale: f64 = 3.10;
        // phi / (2 s0) = scale^2  =>  s0 = phi / (2 scale^2)
        let s0 = phi / (2.0 * scale * scale);
        let a2 = alpha.norm_squared();
        let sigma_ref = DMatrix::identity(6, 6) * (s0 * s0 / a2);
        let bound = 0.5 + phi * s0 / 2.0;
        let c = AffineChanceConstraint::new(alpha.clone(), bound, delta, ConstraintTarget::State, window())
            .unwrap();
        let s = linearize(&c, &sigma_ref).unwrap();
        assert!((s.ell[2] - 3.10).abs() < 1e-9);
        assert!((s.ell[1] - 10.46).abs() / 10.46 < 0.015, "{}", s.ell[1]);
        assert!((s.beta - 0.5).abs() < 1e-12);
        assert_eq!(s.alpha, alpha);
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.05
    }

    #[test]
    fn surrogate_is_exact_at_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = 4;
            let alpha = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let sigma = random_spd(&mut rng, n);
            let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let delta = rng.random_range(0.55..0.999);
            let bound = rng.random_range(-2.0..4.0);
            let c = AffineChanceConstraint::new(alpha, bound, delta, ConstraintTarget::State, window())
                .unwrap();
            let s = linearize(&c, &sigma).unwrap();
            let lhs = s.value(&mu, &sigma);
            let exact = c.exact_margin(&mu, &sigma);
            assert!((lhs - exact).abs() < 1e-10 * (1.0 + exact.abs()));
            assert_eq!(lhs <= 0.0, exact <= 0.0);
            if lhs <= 0.0 {
                assert!(verify_pointwise(&c, &mu, &sigma) <= 1.0 - delta + 1e-9);
            }
        }
    }

    #[test]
    fn second_order_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let alpha = DVector::from_column_slice(&[1.0, -0.5, 2.0]);
        let sigma_ref = random_spd(&mut rng, n);
        let c = AffineChanceConstraint::new(alpha, 1.0, 0.95, ConstraintTarget::State, window())
            .unwrap();
        let s = linearize(&c, &sigma_ref).unwrap();
        let mu = DVector::zeros(n);
        let direction = {
            let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            (&g + g.transpose()) * 0.5
        };
        // Fit C on the smallest perturbation, then check the quadratic bound holds as eps shrinks.
        let gap = |eps: f64| {
            let sigma = &sigma_ref + &direction * eps;
            let d = (s.value(&mu, &sigma) - c.exact_margin(&mu, &sigma)).abs();
            (d, (&direction * eps).norm())
        };
        let (d0, n0) = gap(1e-2);
        let constant = d0 / (n0 * n0);
        for eps in [5e-3, 2e-3, 1e-3, 5e-4] {
            let (d, nrm) = gap(eps);
            assert!(d <= 1.1 * constant * nrm * nrm + 1e-15, "eps {eps}: {d} vs {}", constant * nrm * nrm);
        }
    }

    proptest! {
        #[test]
        fn tighter_probability_lowers_beta(d1 in 0.51f64..0.98, gap in 0.001f64..0.019, var in 0.01f64..4.0) {
            let alpha = DVector::from_column_slice(&[1.0, 1.0]);
            let sigma = DMatrix::identity(2, 2) * var;
            let lo = AffineChanceConstraint::new(alpha.clone(), 1.0, d1, ConstraintTarget::State, window()).unwrap();
            let hi = AffineChanceConstraint { delta: d1 + gap, ..lo.clone() };
            let b_lo = linearize(&lo, &sigma).unwrap().beta;
            let b_hi = linearize(&hi, &sigma).unwrap().beta;
            prop_assert!(b_hi < b_lo);
        }

        #[test]
        fn surrogate_is_conservative_everywhere(
            var_ref in 0.05f64..3.0, var in 0.0f64..5.0, shift in -3.0f64..3.0, delta in 0.55f64..0.999
        ) {
            // The tangent of a concave square root upper-bounds it, so the surrogate
            // implies the exact constraint at any covariance.
            let alpha = DVector::from_column_slice(&[1.0, 0.0]);
            let c = AffineChanceConstraint::new(alpha, 1.0, delta, ConstraintTarget::State, window()).unwrap();
            let s = linearize(&c, &(DMatrix::identity(2, 2) * var_ref)).unwrap();
            let sigma = DMatrix::identity(2, 2) * var;
            let mu = DVector::from_column_slice(&[shift, 0.0]);
            if s.value(&mu, &sigma) <= 0.0 {
                prop_assert!(c.exact_margin(&mu, &sigma) <= 1e-12);
            }
        }
    }
}
