//! Reference trajectories and synthetic flight logs for drag-model training.

use std::f64::consts::PI;

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{control_force, flatness_map, step, QuadState, VehicleParams};
use crate::aero::train::{FlightDataset, FlightSample};
use crate::aero::GroundTruthAero;
use crate::error::{invalid, Result};

/// Horizontal figure-8 `(a sin th, (a/2) sin 2th, 0)` with `th = th0 + omega t`,
/// shifted so that `t = 0` sits at `origin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemniscate {
    pub amplitude_m: f64,
    pub omega_rad_s: f64,
    pub theta0_rad: f64,
    pub origin: Vector3<f64>,
}

impl Lemniscate {
    /// Figure-8 with the given lap time and peak speed, starting at `theta0`.
    pub fn with_peak_speed(period_s: f64, peak_speed: f64, theta0: f64) -> Result<Self> {
        if !(period_s > 0.0) || !(peak_speed > 0.0) {
            return Err(invalid("lemniscate period and speed must be positive"));
        }
        let omega = 2.0 * PI / period_s;
        Ok(Self {
            amplitude_m: peak_speed / (omega * 2f64.sqrt()),
            omega_rad_s: omega,
            theta0_rad: theta0,
            origin: Vector3::zeros(),
        })
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega_rad_s
    }

    fn raw(&self, th: f64) -> Vector3<f64> {
        let a = self.amplitude_m;
        Vector3::new(a * th.sin(), 0.5 * a * (2.0 * th).sin(), 0.0)
    }

    /// Position at phase `th` (not time).
    pub fn position_at_phase(&self, th: f64) -> Vector3<f64> {
        self.origin + self.raw(th) - self.raw(self.theta0_rad)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.position_at_phase(self.theta0_rad + self.omega_rad_s * t)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let (a, w) = (self.amplitude_m, self.omega_rad_s);
        let th = self.theta0_rad + w * t;
        Vector3::new(a * w * th.cos(), a * w * (2.0 * th).cos(), 0.0)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let (a, w) = (self.amplitude_m, self.omega_rad_s);
        let th = self.theta0_rad + w * t;
        Vector3::new(-a * w * w * th.sin(), -2.0 * a * w * w * (2.0 * th).sin(), 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlightLogConfig {
    pub vehicle: VehicleParams,
    pub trajectories: Vec<Lemniscate>,
    /// Flight time per trajectory.
    pub duration_s: f64,
    /// Sample (adaptation) interval.
    pub sample_dt_s: f64,
    pub substeps: usize,
    /// Std of the additive force noise per axis (N).
    pub noise_std_n: f64,
    pub kp: f64,
    pub kd: f64,
}

impl Default for FlightLogConfig {
    fn default() -> Self {
        let speeds = [3.0, 6.0, 9.0, 12.0];
        Self {
            vehicle: VehicleParams::default(),
            trajectories: speeds
                .iter()
                .map(|&s| Lemniscate::with_peak_speed(5.4, s, -PI / 4.0).expect("valid"))
                .collect(),
            duration_s: 10.8,
            sample_dt_s: 0.01,
            substeps: 10,
            noise_std_n: 0.02,
            kp: 16.0,
            kd: 8.0,
        }
    }
}

/// Flies each trajectory in still air with exact drag compensation and logs
/// `(q, eta, v, w = 0, f_truth + noise)` once per sample interval.
pub fn generate_synthetic_flights(
    truth: &GroundTruthAero,
    cfg: &FlightLogConfig,
    seed: u64,
) -> Result<FlightDataset> {
    if !(cfg.sample_dt_s > 0.0) || cfg.substeps == 0 || !(cfg.duration_s >= 0.0) {
        return Err(invalid("flight log timing must be positive"));
    }
    let p = &cfg.vehicle;
    let g = p.gravity();
    let h = cfg.sample_dt_s / cfg.substeps as f64;
    let steps = (cfg.duration_s / cfg.sample_dt_s).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let still = Vector3::zeros();
    let mut samples = Vec::with_capacity(steps * cfg.trajectories.len());
    for traj in &cfg.trajectories {
        let mut state = QuadState::hover(p, traj.position(0.0));
        state.v = traj.velocity(0.0);
        for k in 0..steps {
            let t = k as f64 * cfg.sample_dt_s;
            let u = traj.acceleration(t)
                + (traj.position(t) - state.r) * cfg.kp
                + (traj.velocity(t) - state.v) * cfg.kd;
            let f_hat = truth.force(&state.q, &state.eta, &state.v, &still);
            let cmd = flatness_map(&control_force(&u, &f_hat, p.mass_kg, &g), 0.0, p.thrust_eps_n)?;
            if k == 0 {
                state = QuadState::trimmed(p, state.r, state.v, &cmd);
            }
            for _ in 0..cfg.substeps {
                state = step(&state, &cmd, &still, truth, p, h)?;
            }
            let f = truth.force(&state.q, &state.eta, &state.v, &still)
                + Vector3::from_fn(|_, _| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    cfg.noise_std_n * n
                });
            let eta: Vector4<f64> = state.eta;
            samples.push(FlightSample::new(state.q.quaternion(), &eta, &state.v, &still, &f));
        }
    }
    Ok(FlightDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aero::DragModel;

    #[test]
    fn lemniscate_peak_speed_and_start() {
        let l = Lemniscate::with_peak_speed(5.4, 12.0, -PI / 4.0).unwrap();
        assert!((l.amplitude_m - 12.0 * 5.4 / (2.0 * PI * 2f64.sqrt())).abs() < 1e-12);
        assert!(l.position(0.0).norm() < 1e-12);
        let peak = (0..5400)
            .map(|i| l.velocity(i as f64 * 1e-3).norm())
            .fold(0.0, f64::max);
        assert!((peak - 12.0).abs() < 1e-4);
        // Derivatives agree with finite differences.
        let t = 0.77;
        let e = 1e-6;
        let fd_v = (l.position(t + e) - l.position(t - e)) / (2.0 * e);
        let fd_a = (l.velocity(t + e) - l.velocity(t - e)) / (2.0 * e);
        assert!((fd_v - l.velocity(t)).amax() < 1e-6);
        assert!((fd_a - l.acceleration(t)).amax() < 1e-6);
    }

    #[test]
    fn noiseless_linear_flights_match_a_linear_model() {
        let c = Vector3::new(0.2, 0.25, 0.3);
        let truth = GroundTruthAero::linear_only(c);
        let cfg = FlightLogConfig {
            noise_std_n: 0.0,
            duration_s: 1.0,
            ..Default::default()
        };
        let ds = generate_synthetic_flights(&truth, &cfg, 0).unwrap();
        assert_eq!(ds.len(), 400);
        let model = DragModel::linear(c);
        for s in &ds.samples {
            let pred = model.predict(&s.q(), &s.eta(), &s.v(), &s.w()).unwrap();
            assert!((pred - s.force()).amax() < 1e-12);
        }
    }

    #[test]
    fn flights_are_seed_deterministic_and_cover_the_speed_range() {
        let truth = GroundTruthAero::default();
        let cfg = FlightLogConfig::default();
        let a = generate_synthetic_flights(&truth, &cfg, 5).unwrap();
        let b = generate_synthetic_flights(&truth, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let fastest = a.samples.iter().map(|s| s.v().norm()).fold(0.0, f64::max);
        assert!(fastest > 11.0 && fastest < 13.0, "peak airspeed {fastest}");
    }
}
