//! Point-mass quadrotor simulator.
//!
//! Conventions: world frame is north-east-down, so gravity is `(0, 0, +g)`. Thrust acts
//! along the body `-z` axis: `m r'' = m g - R e3 tau + f_d`. With this convention a
//! level vehicle has `R = I` and the desired body `z` axis is `-f_c / |f_c|`.

pub mod closed_loop;
pub mod reference;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aero::GroundTruthAero;
use crate::error::{Error, Result};

pub use closed_loop::{
    run_closed_loop, EkfSettings, EstimatorKind, SimConfig, SimTrace, TraceRecord, TraceSummary,
    TrackingPolicy,
};
pub use reference::{generate_synthetic_flights, FlightLogConfig, Lemniscate};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub mass_kg: f64,
    pub gravity_mps2: f64,
    /// Total thrust with every motor at full speed.
    pub max_thrust_n: f64,
    pub motors: usize,
    pub attitude_tau_s: f64,
    pub thrust_tau_s: f64,
    /// Smallest force the flatness map accepts.
    pub thrust_eps_n: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass_kg: 0.68,
            gravity_mps2: 9.81,
            max_thrust_n: 39.0,
            motors: 4,
            attitude_tau_s: 0.06,
            thrust_tau_s: 0.025,
            thrust_eps_n: 1e-6,
        }
    }
}

impl VehicleParams {
    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity_mps2)
    }

    /// Per-motor thrust at `eta = 1`, so that `tau = c_T sum(eta_i^2)`.
    pub fn thrust_coefficient(&self) -> f64 {
        self.max_thrust_n / self.motors as f64
    }

    pub fn thrust_from_eta(&self, eta: &Vector4<f64>) -> f64 {
        self.thrust_coefficient() * eta.norm_squared()
    }

    /// Equal motor speeds producing `thrust`.
    pub fn eta_for_thrust(&self, thrust: f64) -> Vector4<f64> {
        let per_motor = (thrust / self.max_thrust_n).clamp(0.0, 1.0);
        Vector4::repeat(per_motor.sqrt())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass_kg * self.gravity_mps2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadState {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    /// Normalized motor speeds.
    pub eta: Vector4<f64>,
    /// Thrust currently produced (inner-loop state).
    pub thrust: f64,
    pub t: f64,
}

impl QuadState {
    pub fn hover(params: &VehicleParams, r: Vector3<f64>) -> Self {
        let thrust = params.hover_thrust();
        Self {
            r,
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            eta: params.eta_for_thrust(thrust),
            thrust,
            t: 0.0,
        }
    }

    /// State whose inner loop already matches `cmd`.
    pub fn trimmed(
        params: &VehicleParams,
        r: Vector3<f64>,
        v: Vector3<f64>,
        cmd: &AttitudeThrustCommand,
    ) -> Self {
        let thrust = cmd.tau_d.clamp(0.0, params.max_thrust_n);
        Self {
            r,
            v,
            q: UnitQuaternion::from_rotation_matrix(&cmd.r_d),
            eta: params.eta_for_thrust(thrust),
            thrust,
            t: 0.0,
        }
    }

    /// Body `z` axis in the world frame (`R e3`).
    pub fn body_z(&self) -> Vector3<f64> {
        self.q * Vector3::z()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttitudeThrustCommand {
    pub r_d: Rotation3<f64>,
    pub tau_d: f64,
    pub yaw: f64,
}

/// Desired attitude and thrust producing the force `f_c` (thrust along body `-z`).
pub fn flatness_map(f_c: &Vector3<f64>, yaw: f64, eps: f64) -> Result<AttitudeThrustCommand> {
    let tau = f_c.norm();
    if !(tau > eps) {
        return Err(Error::FlatnessSingularity(format!(
            "commanded force magnitude {tau:e} N is below {eps:e} N"
        )));
    }
    let z_b = -f_c / tau;
    let x_c = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let cross = z_b.cross(&x_c);
    let n = cross.norm();
    if n < 1e-9 {
        return Err(Error::FlatnessSingularity(
            "body z axis is parallel to the heading direction".into(),
        ));
    }
    let y_b = cross / n;
    let x_b = y_b.cross(&z_b);
    let r_d = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x_b, y_b, z_b]));
    Ok(AttitudeThrustCommand { r_d, tau_d: tau, yaw })
}

/// `f_c = -m g - f_hat + m u`; with `f_hat = f_d` the closed loop is `r'' = u`.
pub fn control_force(
    u: &Vector3<f64>,
    f_hat: &Vector3<f64>,
    mass: f64,
    gravity: &Vector3<f64>,
) -> Vector3<f64> {
    -gravity * mass - f_hat + u * mass
}

/// Translational acceleration for the given attitude, thrust and wind.
pub fn acceleration(
    params: &VehicleParams,
    truth: &GroundTruthAero,
    q: &UnitQuaternion<f64>,
    eta: &Vector4<f64>,
    thrust: f64,
    v: &Vector3<f64>,
    wind: &Vector3<f64>,
) -> Vector3<f64> {
    let drag = truth.force(q, eta, v, wind);
    params.gravity() - (q * Vector3::z()) * (thrust / params.mass_kg) + drag / params.mass_kg
}

fn lag_fraction(dt: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        1.0
    } else {
        1.0 - (-dt / tau).exp()
    }
}

/// Advances one simulation step: first-order attitude (geodesic) and thrust lags, then RK4
/// on the translational dynamics with attitude, thrust and wind held over the step.
pub fn step(
    state: &QuadState,
    cmd: &AttitudeThrustCommand,
    wind: &Vector3<f64>,
    truth: &GroundTruthAero,
    params: &VehicleParams,
    dt: f64,
) -> Result<QuadState> {
    if !(dt > 0.0) {
        return Err(crate::error::invalid("simulation step must be positive"));
    }
    let q_d = UnitQuaternion::from_rotation_matrix(&cmd.r_d);
    let a_frac = lag_fraction(dt, params.attitude_tau_s);
    let q = if a_frac >= 1.0 {
        q_d
    } else {
        state.q.try_slerp(&q_d, a_frac, 1e-12).unwrap_or(q_d)
    };
    let q = UnitQuaternion::new_normalize(q.into_inner());
    let target = cmd.tau_d.clamp(0.0, params.max_thrust_n);
    let thrust = state.thrust + lag_fraction(dt, params.thrust_tau_s) * (target - state.thrust);
    let eta = params.eta_for_thrust(thrust);

    let f = |v: &Vector3<f64>| acceleration(params, truth, &q, &eta, thrust, v, wind);
    let (r0, v0) = (state.r, state.v);
    let k1v = f(&v0);
    let k1r = v0;
    let k2v = f(&(v0 + k1v * (dt / 2.0)));
    let k2r = v0 + k1v * (dt / 2.0);
    let k3v = f(&(v0 + k2v * (dt / 2.0)));
    let k3r = v0 + k2v * (dt / 2.0);
    let k4v = f(&(v0 + k3v * dt));
    let k4r = v0 + k3v * dt;
    let v = v0 + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
    let r = r0 + (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (dt / 6.0);
    let t = state.t + dt;
    if !(r.iter().chain(v.iter()).all(|x| x.is_finite()) && thrust.is_finite()) {
        return Err(Error::IntegrationFailure {
            time: t,
            detail: "non-finite state".into(),
        });
    }
    Ok(QuadState {
        r,
        v,
        q,
        eta,
        thrust,
        t,
    })
}

/// Constant mean wind plus per-axis first-order Gauss-Markov turbulence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindField {
    pub mean_mps: Vector3<f64>,
    pub turbulence_std_mps: Vector3<f64>,
    pub corr_time_s: f64,
    pub seed: u64,
}

impl Default for WindField {
    fn default() -> Self {
        Self::calm()
    }
}

impl WindField {
    pub fn calm() -> Self {
        Self {
            mean_mps: Vector3::zeros(),
            turbulence_std_mps: Vector3::zeros(),
            corr_time_s: 1.0,
            seed: 0,
        }
    }

    pub fn constant(mean: Vector3<f64>) -> Self {
        Self {
            mean_mps: mean,
            ..Self::calm()
        }
    }

    pub fn process(&self) -> WindProcess {
        WindProcess::new(self, self.seed)
    }
}

/// Running realization of a [`WindField`].
#[derive(Clone, Debug)]
pub struct WindProcess {
    field: WindField,
    turbulence: Vector3<f64>,
    rng: ChaCha8Rng,
}

impl WindProcess {
    /// Starts from the stationary distribution.
    pub fn new(field: &WindField, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let turbulence = Vector3::from_fn(|i, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            field.turbulence_std_mps[i] * n
        });
        Self {
            field: *field,
            turbulence,
            rng,
        }
    }

    pub fn current(&self) -> Vector3<f64> {
        self.field.mean_mps + self.turbulence
    }

    pub fn advance(&mut self, dt: f64) -> Vector3<f64> {
        if self.field.turbulence_std_mps != Vector3::zeros() {
            let phi = (-dt / self.field.corr_time_s).exp();
            let drive = (1.0 - phi * phi).sqrt();
            for i in 0..3 {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                self.turbulence[i] =
                    phi * self.turbulence[i] + self.field.turbulence_std_mps[i] * drive * n;
            }
        }
        self.current()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorParams {
    /// Accelerometer white noise per axis at the simulation rate.
    pub accel_noise_mps2: f64,
    /// Relative motor-speed readout noise.
    pub rpm_noise_frac: f64,
    /// Position feedback noise per axis.
    pub position_noise_m: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            accel_noise_mps2: 0.2,
            rpm_noise_frac: 0.01,
            position_noise_m: 0.002,
        }
    }
}

impl SensorParams {
    pub fn ideal() -> Self {
        Self {
            accel_noise_mps2: 0.0,
            rpm_noise_frac: 0.0,
            position_noise_m: 0.0,
        }
    }
}
