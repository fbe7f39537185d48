//! Time-varying linear-Gaussian plants, boundary distributions and exact
//! closed-loop moment propagation.
//!
//! The plant is `x_{k+1} = A_k x_k + B_k u_k + D_k w_k` with `w_k ~ N(0, I)`.
//! Any non-identity noise covariance must be folded into `D_k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::linalg::{min_eigenvalue, psd_sqrt, symmetrize};

/// Relative symmetry tolerance applied to boundary covariances.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LinearGaussianSystem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    d: Vec<DMatrix<f64>>,
    dt: f64,
}

impl LinearGaussianSystem {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid(format!("dt must be positive, got {dt}")));
        }
        let horizon = a.len();
        if horizon == 0 {
            return Err(invalid("horizon must be at least one step"));
        }
        if b.len() != horizon || d.len() != horizon {
            return Err(invalid(format!(
                "sequence lengths differ: A={}, B={}, D={}",
                horizon,
                b.len(),
                d.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        let nd = d[0].ncols();
        for k in 0..horizon {
            if a[k].shape() != (n, n) || b[k].shape() != (n, m) || d[k].shape() != (n, nd) {
                return Err(invalid(format!("inconsistent dimensions at step {k}")));
            }
        }
        Ok(Self { a, b, d, dt })
    }

    /// Time-invariant plant repeated over `horizon` steps.
    pub fn constant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        horizon: usize,
        dt: f64,
    ) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon], vec![d; horizon], dt)
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.d[0].ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k]
    }

    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        &self.b[k]
    }

    pub fn d(&self, k: usize) -> &DMatrix<f64> {
        &self.d[k]
    }

    /// Returns the same plant with a different horizon (constant plants only use step 0).
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::constant(
            self.a[0].clone(),
            self.b[0].clone(),
            self.d[0].clone(),
            horizon,
            self.dt,
        )
    }
}

/// 3D double integrator with state `[position; velocity]` and acceleration input.
///
/// `A = [[I, dt I], [0, I]]`, `B = [[0], [dt I]]`, `D = blkdiag(sigma_p I, sigma_v I)`.
pub fn build_double_integrator(
    dt: f64,
    process_noise_pos: f64,
    process_noise_vel: f64,
    horizon: usize,
) -> Result<LinearGaussianSystem> {
    if !(dt > 0.0) {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    if horizon == 0 {
        return Err(invalid("horizon must be at least one step"));
    }
    let mut a = DMatrix::identity(6, 6);
    let mut b = DMatrix::zeros(6, 3);
    let mut d = DMatrix::zeros(6, 6);
    for i in 0..3 {
        a[(i, i + 3)] = dt;
        b[(i + 3, i)] = dt;
        d[(i, i)] = process_noise_pos;
        d[(i + 3, i + 3)] = process_noise_vel;
    }
    LinearGaussianSystem::constant(a, b, d, horizon, dt)
}

#[derive(Clone, Debug)]
pub struct GaussianBoundary {
    pub mu_i: DVector<f64>,
    pub sigma_i: DMatrix<f64>,
    pub mu_f: Option<DVector<f64>>,
    pub sigma_f: DMatrix<f64>,
}

impl GaussianBoundary {
    pub fn new(
        mu_i: DVector<f64>,
        sigma_i: DMatrix<f64>,
        mu_f: Option<DVector<f64>>,
        sigma_f: DMatrix<f64>,
    ) -> Result<Self> {
        let n = mu_i.len();
        check_spd("initial covariance", &sigma_i, n)?;
        check_spd("terminal covariance", &sigma_f, n)?;
        if let Some(mf) = &mu_f {
            if mf.len() != n {
                return Err(invalid("terminal mean dimension mismatch"));
            }
        }
        Ok(Self {
            mu_i,
            sigma_i: symmetrize(&sigma_i),
            mu_f,
            sigma_f: symmetrize(&sigma_f),
        })
    }
}

fn check_spd(label: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(invalid(format!("{label} must be {n}x{n}")));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(invalid(format!("{label} is not symmetric")));
    }
    if min_eigenvalue(m) <= 0.0 {
        return Err(invalid(format!("{label} is not positive definite")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CostWeights {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub q_bar: DMatrix<f64>,
    pub r_bar: DMatrix<f64>,
}

impl CostWeights {
    pub fn constant(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_bar: DMatrix<f64>,
        r_bar: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        for (label, m, strict) in [
            ("Q", &q, false),
            ("R", &r, true),
            ("Qbar", &q_bar, false),
            ("Rbar", &r_bar, false),
        ] {
            if (m - m.transpose()).amax() > SYMMETRY_TOL * m.amax().max(1.0) {
                return Err(invalid(format!("{label} is not symmetric")));
            }
            let lo = min_eigenvalue(m);
            if (strict && lo <= 0.0) || lo < -1e-12 {
                return Err(invalid(format!("{label} has eigenvalue {lo:e}")));
            }
        }
        Ok(Self {
            q: vec![q; horizon],
            r: vec![r; horizon],
            q_bar,
            r_bar,
        })
    }

    /// Copy with every covariance penalty `Q_k` multiplied by `factor`.
    pub fn scaled_state_penalty(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for q in &mut out.q {
            *q *= factor;
        }
        out
    }
}

/// Affine state-feedback policy `u_k = K_k (x_k - mu_k) + v_k`.
pub trait FeedbackPolicy {
    fn steps(&self) -> usize;
    fn gain(&self, k: usize) -> &DMatrix<f64>;
    fn feedforward(&self, k: usize) -> &DVector<f64>;
}

#[derive(Clone, Debug)]
pub struct AffinePolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
}

impl FeedbackPolicy for AffinePolicy {
    fn steps(&self) -> usize {
        self.gains.len()
    }

    fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    fn feedforward(&self, k: usize) -> &DVector<f64> {
        &self.feedforward[k]
    }
}

/// Closed-loop means and covariances, `N + 1` entries each.
#[derive(Clone, Debug)]
pub struct Moments {
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
}

/// Exact moment recursion of the plant under an affine policy.
pub fn propagate_moments(
    sys: &LinearGaussianSystem,
    policy: &impl FeedbackPolicy,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
) -> Result<Moments> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let horizon = sys.horizon();
    if policy.steps() != horizon {
        return Err(invalid(format!(
            "policy has {} steps, plant horizon is {horizon}",
            policy.steps()
        )));
    }
    if mu0.len() != n || sigma0.shape() != (n, n) {
        return Err(invalid("initial moments have wrong dimension"));
    }
    let mut mu = Vec::with_capacity(horizon + 1);
    let mut sigma = Vec::with_capacity(horizon + 1);
    mu.push(mu0.clone());
    sigma.push(symmetrize(sigma0));
    for k in 0..horizon {
        let gain = policy.gain(k);
        let ff = policy.feedforward(k);
        if gain.shape() != (m, n) || ff.len() != m {
            return Err(invalid(format!("policy dimension mismatch at step {k}")));
        }
        let closed = sys.a(k) + sys.b(k) * gain;
        let next_mu = sys.a(k) * &mu[k] + sys.b(k) * ff;
        let dk = sys.d(k);
        let next_sigma = &closed * &sigma[k] * closed.transpose() + dk * dk.transpose();
        mu.push(next_mu);
        sigma.push(symmetrize(&next_sigma));
    }
    Ok(Moments { mu, sigma })
}

/// Draws `x ~ N(mean, cov)` using a symmetric square root.
pub fn sample_gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov_sqrt: &DMatrix<f64>,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + cov_sqrt * z
}

/// One sampled trajectory of the linear plant under the policy, starting at `x0`.
///
/// The feedback reference `mu_k` is the nominal mean recursion from `mu0`.
pub fn simulate_linear<R: Rng + ?Sized>(
    sys: &LinearGaussianSystem,
    policy: &impl FeedbackPolicy,
    mu0: &DVector<f64>,
    x0: DVector<f64>,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let horizon = sys.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut x = x0;
    let mut mu = mu0.clone();
    states.push(x.clone());
    for k in 0..horizon {
        let u = policy.gain(k) * (&x - &mu) + policy.feedforward(k);
        let w = DVector::from_fn(sys.noise_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        x = sys.a(k) * &x + sys.b(k) * u + sys.d(k) * w;
        mu = sys.a(k) * &mu + sys.b(k) * policy.feedforward(k);
        states.push(x.clone());
    }
    states
}

/// Square root of a covariance for sampling.
pub fn covariance_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    psd_sqrt(cov)
}
