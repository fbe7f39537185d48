//! Wind estimation from accelerometer and motor-speed data.
//!
//! The EKF state is the wind vector, modeled as a random walk. The measurement is the
//! aerodynamic force recovered from the translational dynamics, predicted by a
//! [`DragModel`] as `(C_d + diag(net)) (w - v)`.

use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::aero::DragModel;
use crate::error::{Error, Result};

/// Aerodynamic force inferred over one control interval, with the state it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct DragMeasurement {
    pub force: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub eta: Vector4<f64>,
    pub v: Vector3<f64>,
}

/// `f_d = m a - m g + R e3 tau` from `m a = m g - R e3 tau + f_d`.
pub fn measure_drag(
    mass: f64,
    gravity: &Vector3<f64>,
    accel: &Vector3<f64>,
    thrust: f64,
    q: &UnitQuaternion<f64>,
) -> Vector3<f64> {
    accel * mass - gravity * mass + (q * Vector3::z()) * thrust
}

/// Noise covariance of [`measure_drag`] for averaged accelerometer and thrust readings.
///
/// `accel_std` is the per-sample accelerometer noise, `thrust_rel_std` the per-sample
/// relative thrust noise, `samples` the number of readings averaged.
pub fn measurement_noise(
    mass: f64,
    accel_std: f64,
    thrust_rel_std: f64,
    samples: usize,
    thrust: f64,
    q: &UnitQuaternion<f64>,
    floor: f64,
) -> Matrix3<f64> {
    let n = samples.max(1) as f64;
    let b = q * Vector3::z();
    let sa = mass * accel_std;
    let st = thrust_rel_std * thrust;
    Matrix3::identity() * (sa * sa / n + floor) + b * b.transpose() * (st * st / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EkfUpdate {
    pub innovation: Vector3<f64>,
    pub innovation_cov: Matrix3<f64>,
    pub gain: Matrix3<f64>,
}

/// One Joseph-form measurement update. Returns the corrected state and covariance.
pub fn ekf_update(
    x: &Vector3<f64>,
    p: &Matrix3<f64>,
    innovation: &Vector3<f64>,
    h: &Matrix3<f64>,
    r: &Matrix3<f64>,
) -> std::result::Result<(Vector3<f64>, Matrix3<f64>, EkfUpdate), String> {
    let s = h * p * h.transpose() + r;
    let s = (s + s.transpose()) * 0.5;
    let chol = s
        .cholesky()
        .ok_or_else(|| "innovation covariance is not positive definite".to_string())?;
    // K = P H^T S^-1, computed as (S^-1 H P)^T.
    let gain = chol.solve(&(h * p)).transpose();
    let x_new = x + gain * innovation;
    let ikh = Matrix3::identity() - gain * h;
    let p_new = ikh * p * ikh.transpose() + gain * r * gain.transpose();
    let p_new = (p_new + p_new.transpose()) * 0.5;
    Ok((
        x_new,
        p_new,
        EkfUpdate {
            innovation: *innovation,
            innovation_cov: s,
            gain,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfSettings {
    /// Random-walk intensity of the wind, (m/s)/sqrt(s).
    pub process_std: f64,
    pub initial_std_mps: f64,
    /// Added to the diagonal of the measurement covariance (N^2).
    pub measurement_floor: f64,
}

impl Default for EkfSettings {
    fn default() -> Self {
        Self {
            process_std: 0.5,
            initial_std_mps: 5.0,
            measurement_floor: 1e-6,
        }
    }
}

/// Wind EKF bound to a drag model.
#[derive(Clone, Debug)]
pub struct WindEkf {
    model: Arc<DragModel>,
    w: Vector3<f64>,
    p: Matrix3<f64>,
    q_proc: Matrix3<f64>,
    steps: usize,
}

impl WindEkf {
    pub fn new(model: Arc<DragModel>, w0: Vector3<f64>, p0: Matrix3<f64>, q_proc: Matrix3<f64>) -> Self {
        Self {
            model,
            w: w0,
            p: p0,
            q_proc,
            steps: 0,
        }
    }

    pub fn from_settings(model: Arc<DragModel>, settings: &EkfSettings, dt: f64) -> Self {
        let p0 = Matrix3::identity() * settings.initial_std_mps.powi(2);
        let q = Matrix3::identity() * (settings.process_std.powi(2) * dt);
        Self::new(model, Vector3::zeros(), p0, q)
    }

    pub fn wind(&self) -> Vector3<f64> {
        self.w
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        self.p
    }

    pub fn model(&self) -> &DragModel {
        &self.model
    }

    /// Drag force predicted with the current wind estimate.
    pub fn force_estimate(
        &self,
        q: &UnitQuaternion<f64>,
        eta: &Vector4<f64>,
        v: &Vector3<f64>,
    ) -> Result<Vector3<f64>> {
        self.model.predict(q.quaternion(), eta, v, &self.w)
    }

    pub fn predict(&mut self) {
        self.p += self.q_proc;
    }

    pub fn update(&mut self, meas: &DragMeasurement, r: &Matrix3<f64>) -> Result<EkfUpdate> {
        let qn = meas.q.quaternion();
        let h = self.model.jacobian_wrt_wind(qn, &meas.eta)?;
        let predicted = self.model.predict(qn, &meas.eta, &meas.v, &self.w)?;
        let innovation = meas.force - predicted;
        let (w, p, info) =
            ekf_update(&self.w, &self.p, &innovation, &h, r).map_err(|detail| Error::Conditioning {
                step: self.steps,
                detail,
            })?;
        self.w = w;
        self.p = p;
        self.steps += 1;
        Ok(info)
    }

    /// Predict followed by update.
    pub fn step(&mut self, meas: &DragMeasurement, r: &Matrix3<f64>) -> Result<EkfUpdate> {
        self.predict();
        self.update(meas, r)
    }
}

/// First-order low-pass filter on the raw drag measurement.
#[derive(Clone, Debug)]
pub struct LowPassBaseline {
    alpha: f64,
    y: Vector3<f64>,
}

impl LowPassBaseline {
    pub fn new(cutoff_hz: f64, dt: f64) -> Self {
        Self {
            alpha: 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz * dt).exp(),
            y: Vector3::zeros(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn output(&self) -> Vector3<f64> {
        self.y
    }

    pub fn step(&mut self, raw: &Vector3<f64>) -> Vector3<f64> {
        self.y = lp_step(&self.y, raw, self.alpha);
        self.y
    }
}

pub fn lp_step(y: &Vector3<f64>, raw: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    y + (raw - y) * alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn level() -> (UnitQuaternion<f64>, Vector4<f64>) {
        (UnitQuaternion::identity(), Vector4::repeat(0.42))
    }

    fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::from_fn(|_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn scalar_riccati_steady_state() {
        let (c, q, r) = (0.3, 0.0025, 0.02);
        let model = Arc::new(DragModel::linear(Vector3::repeat(c)));
        let mut ekf = WindEkf::new(
            model,
            Vector3::zeros(),
            Matrix3::identity() * 25.0,
            Matrix3::identity() * q,
        );
        let (qa, eta) = level();
        let meas = DragMeasurement {
            force: Vector3::zeros(),
            q: qa,
            eta,
            v: Vector3::zeros(),
        };
        let rm = Matrix3::identity() * r;
        let mut info = None;
        for _ in 0..5000 {
            ekf.predict();
            let prior = ekf.covariance()[(0, 0)];
            info = Some((prior, ekf.update(&meas, &rm).unwrap()));
        }
        let (prior, info) = info.unwrap();
        let p_inf = (q + (q * q + 4.0 * q * r / (c * c)).sqrt()) / 2.0;
        let k_inf = p_inf * c / (c * c * p_inf + r);
        assert!((prior - p_inf).abs() < 1e-12 * p_inf.max(1.0), "{prior} vs {p_inf}");
        assert!((info.gain[(0, 0)] - k_inf).abs() < 1e-10);
        assert!(info.gain[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_leaves_state() {
        let model = Arc::new(DragModel::linear(Vector3::new(0.2, 0.3, 0.4)));
        let w0 = Vector3::new(1.0, -2.0, 0.5);
        let mut ekf = WindEkf::new(model.clone(), w0, Matrix3::identity(), Matrix3::identity() * 0.01);
        let (q, eta) = level();
        let v = Vector3::new(3.0, 1.0, 0.0);
        let force = model.predict(q.quaternion(), &eta, &v, &w0).unwrap();
        let p_before = ekf.covariance() + Matrix3::identity() * 0.01;
        let info = ekf
            .step(&DragMeasurement { force, q, eta, v }, &(Matrix3::identity() * 0.1))
            .unwrap();
        assert!(info.innovation.amax() < 1e-15);
        assert!((ekf.wind() - w0).amax() < 1e-15);
        // Covariance still contracts.
        assert!(ekf.covariance()[(0, 0)] < p_before[(0, 0)]);
    }

    #[test]
    fn measurement_reduces_variance_along_every_axis() {
        let model = Arc::new(DragModel::linear(Vector3::new(0.2, 0.25, 0.3)));
        let mut ekf = WindEkf::new(model, Vector3::zeros(), Matrix3::identity() * 4.0, Matrix3::zeros());
        let (q, eta) = level();
        let before = ekf.covariance();
        ekf.update(
            &DragMeasurement {
                force: Vector3::new(0.1, 0.0, -0.2),
                q,
                eta,
                v: Vector3::zeros(),
            },
            &(Matrix3::identity() * 0.05),
        )
        .unwrap();
        let after = ekf.covariance();
        for i in 0..3 {
            assert!(after[(i, i)] < before[(i, i)]);
        }
    }

    #[test]
    fn singular_innovation_covariance_is_reported() {
        let model = Arc::new(DragModel::linear(Vector3::zeros()));
        let mut ekf = WindEkf::new(model, Vector3::zeros(), Matrix3::zeros(), Matrix3::zeros());
        let (q, eta) = level();
        let err = ekf
            .step(
                &DragMeasurement {
                    force: Vector3::zeros(),
                    q,
                    eta,
                    v: Vector3::zeros(),
                },
                &Matrix3::zeros(),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Conditioning { step: 0, .. }));
    }

    #[test]
    fn covariance_stays_psd_over_long_runs() {
        let model = Arc::new(DragModel::linear(Vector3::new(0.22, 0.22, 0.3)));
        let mut ekf = WindEkf::from_settings(model, &EkfSettings::default(), 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eta = Vector4::repeat(0.42);
        for k in 0..100_000 {
            let q = UnitQuaternion::from_euler_angles(0.3 * (k as f64 * 1e-3).sin(), 0.1, 0.0);
            let meas = DragMeasurement {
                force: gauss3(&mut rng) * 0.3,
                q,
                eta,
                v: gauss3(&mut rng),
            };
            let r = measurement_noise(0.68, 0.2, 0.01, 10, 6.7, &q, 1e-6);
            ekf.step(&meas, &r).unwrap();
            if k % 1000 == 0 {
                let p = ekf.covariance();
                assert!((p - p.transpose()).amax() < 1e-14);
                assert!(p.symmetric_eigenvalues().min() > 0.0);
            }
        }
    }

    #[test]
    fn innovations_are_unbiased_on_a_matched_model() {
        let c = Vector3::new(0.3, 0.3, 0.5);
        let model = Arc::new(DragModel::linear(c));
        let dt = 0.01;
        let mut ekf = WindEkf::from_settings(model, &EkfSettings::default(), dt);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, eta) = level();
        let r_std = 0.05;
        let rm = Matrix3::identity() * r_std * r_std;
        let mut w = Vector3::new(2.0, -1.0, 0.5);
        let mut sum = Vector3::zeros();
        let mut nis = 0.0;
        let n = 20_000;
        for k in 0..n + 200 {
            w += gauss3(&mut rng) * (0.5 * dt.sqrt());
            let v = gauss3(&mut rng);
            let force = c.component_mul(&(w - v)) + gauss3(&mut rng) * r_std;
            let info = ekf.step(&DragMeasurement { force, q, eta, v }, &rm).unwrap();
            if k >= 200 {
                sum += info.innovation;
                nis += (info.innovation.transpose()
                    * info.innovation_cov.try_inverse().unwrap()
                    * info.innovation)[(0, 0)];
            }
        }
        let mean = sum / n as f64;
        let nis = nis / n as f64;
        assert!(mean.amax() < 5e-3, "mean innovation {mean}");
        assert!((nis - 3.0).abs() < 0.15, "normalized innovation {nis}");
    }

    #[test]
    fn measured_drag_inverts_the_dynamics() {
        let q = UnitQuaternion::from_euler_angles(0.2, -0.1, 0.4);
        let g = Vector3::new(0.0, 0.0, 9.81);
        let (m, tau) = (0.68, 7.3);
        let f_d = Vector3::new(0.4, -0.2, 0.1);
        let a = g - (q * Vector3::z()) * (tau / m) + f_d / m;
        assert!((measure_drag(m, &g, &a, tau, &q) - f_d).amax() < 1e-12);
    }

    #[test]
    fn low_pass_has_unit_dc_gain() {
        let mut lp = LowPassBaseline::new(5.0, 0.01);
        let raw = Vector3::new(1.0, -2.0, 0.5);
        for _ in 0..1000 {
            lp.step(&raw);
        }
        assert!((lp.output() - raw).amax() < 1e-12);
    }

    #[test]
    fn low_pass_time_constant() {
        // 5 Hz cutoff: 63.2 % of a step after 1 / (2 pi 5) = 31.8 ms.
        let dt = 1e-4;
        let mut lp = LowPassBaseline::new(5.0, dt);
        let steps = (0.031831 / dt).round() as usize;
        for _ in 0..steps {
            lp.step(&Vector3::x());
        }
        assert!((lp.output().x - (1.0 - (-1.0f64).exp())).abs() < 2e-3);
    }

    #[test]
    fn noise_model_is_symmetric_positive() {
        let q = UnitQuaternion::from_euler_angles(0.3, 0.2, 0.0);
        let r = measurement_noise(0.68, 0.2, 0.01, 10, 6.7, &q, 0.0);
        assert!((r - r.transpose()).amax() < 1e-16);
        assert!(r.symmetric_eigenvalues().min() > 0.0);
        let expected = (0.68f64 * 0.2).powi(2) / 10.0;
        assert!((r.symmetric_eigenvalues().min() - expected).abs() < 1e-12);
    }
}
