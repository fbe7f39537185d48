//! Infinite-horizon discrete LQR, used as the tracking baseline.

use nalgebra::{DMatrix, DVector};

use crate::covsteer::CovSteerSolution;
use crate::error::{invalid, Error, Result};
use crate::linalg::{max_eigenvalue, symmetrize};
use crate::linsys::FeedbackPolicy;
use crate::quadsim::TrackingPolicy;

/// Solves `P = Q + A'PA - A'PB (R + B'PB)^-1 B'PA` by fixed-point iteration.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(invalid("inconsistent DARE dimensions"));
    }
    let mut p = q.clone();
    for it in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let chol = s.cholesky().ok_or_else(|| Error::Conditioning {
            step: it,
            detail: "R + B'PB is not positive definite".into(),
        })?;
        let k = chol.solve(&(&btp * a));
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).amax();
        p = next;
        if change <= 1e-12 * p.amax().max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::Conditioning {
        step: 0,
        detail: "DARE iteration did not converge".into(),
    })
}

/// `u = -K x` with `K = (R + B'PB)^-1 B'PA`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = solve_dare(a, b, q, r)?;
    let btp = b.transpose() * &p;
    let s = r + &btp * b;
    let chol = s.cholesky().ok_or_else(|| Error::Conditioning {
        step: 0,
        detail: "R + B'PB is not positive definite".into(),
    })?;
    Ok(chol.solve(&(&btp * a)))
}

/// Stationary covariance of `x+ = A x + D w` by doubling; `A` must be Schur stable.
pub fn stationary_covariance(a: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut ak = a.clone();
    let mut s = d * d.transpose();
    for _ in 0..64 {
        let next = &s + &ak * &s * ak.transpose();
        ak = &ak * &ak;
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        let done = ak.amax() < 1e-14;
        s = next;
        if done {
            return Ok(symmetrize(&s));
        }
    }
    Err(Error::Conditioning {
        step: 0,
        detail: "closed loop is not Schur stable".into(),
    })
}

/// Smallest factor `s >= 1` on the selected block of `Q` (`Q + (s - 1) L L' Q L L'`) for which
/// the LQR stationary covariance of `L' x` stays under the cap `C`.
pub fn cap_matched_scale(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    selector: &DMatrix<f64>,
    cap: &DMatrix<f64>,
) -> Result<f64> {
    let excess = |s: f64| -> Result<f64> {
        let k = lqr_gain(a, b, &scale_block(q, selector, s), r)?;
        let sigma = stationary_covariance(&(a - b * k), d)?;
        Ok(max_eigenvalue(&(selector.transpose() * sigma * selector - cap)))
    };
    if excess(1.0)? <= 0.0 {
        return Ok(1.0);
    }
    const SCALE_MAX: f64 = 1e8;
    if excess(SCALE_MAX)? > 0.0 {
        return Err(Error::Infeasible(format!(
            "no LQR state weight up to {SCALE_MAX} meets the covariance cap"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, SCALE_MAX.ln());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if excess(mid.exp())? <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi.exp())
}

/// `Q` with its selected block scaled by `s`, as used by [`cap_matched_scale`].
pub fn scale_block(q: &DMatrix<f64>, selector: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let proj = selector * selector.transpose();
    q + &proj * q * &proj * (s - 1.0)
}

/// Constant-gain tracker around a nominal mean trajectory and feedforward.
#[derive(Clone, Debug)]
pub struct LqrTracker {
    /// Policy gain (`-K`), so `u = gain (x - mu) + v`.
    pub gain: DMatrix<f64>,
    pub mu: Vec<DVector<f64>>,
    pub feedforward: Vec<DVector<f64>>,
}

impl LqrTracker {
    pub fn new(gain: DMatrix<f64>, mu: Vec<DVector<f64>>, feedforward: Vec<DVector<f64>>) -> Self {
        Self {
            gain,
            mu,
            feedforward,
        }
    }

    /// Tracks the planned mean of `plan` with the LQR gain for `(a, b, q, r)`.
    pub fn around(
        plan: &CovSteerSolution,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> Result<Self> {
        let k = lqr_gain(a, b, q, r)?;
        Ok(Self::new(-k, plan.mu.clone(), plan.feedforward.clone()))
    }
}

impl FeedbackPolicy for LqrTracker {
    fn steps(&self) -> usize {
        self.feedforward.len()
    }

    fn gain(&self, _k: usize) -> &DMatrix<f64> {
        &self.gain
    }

    fn feedforward(&self, k: usize) -> &DVector<f64> {
        &self.feedforward[k]
    }
}

impl TrackingPolicy for LqrTracker {
    fn mean(&self, k: usize) -> &DVector<f64> {
        &self.mu[k]
    }
}
