//! Two-stage drag model fit: least-squares `C_d`, then the network on the residual.

use std::path::Path;

use nalgebra::{DMatrix, Quaternion, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Adam, Mlp};
use super::{features, DragModel, DEFAULT_MAX_RPM, DRAG_NET_WIDTHS};
use crate::error::{invalid, Error, Result};

/// One drag observation. Quaternion stored as `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightSample {
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

impl FlightSample {
    pub fn new(
        q: &Quaternion<f64>,
        eta: &Vector4<f64>,
        v: &Vector3<f64>,
        w: &Vector3<f64>,
        f: &Vector3<f64>,
    ) -> Self {
        Self {
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            eta1: eta[0],
            eta2: eta[1],
            eta3: eta[2],
            eta4: eta[3],
            vx: v.x,
            vy: v.y,
            vz: v.z,
            wx: w.x,
            wy: w.y,
            wz: w.z,
            fx: f.x,
            fy: f.y,
            fz: f.z,
        }
    }

    pub fn q(&self) -> Quaternion<f64> {
        Quaternion::new(self.qw, self.qx, self.qy, self.qz)
    }

    pub fn eta(&self) -> Vector4<f64> {
        Vector4::new(self.eta1, self.eta2, self.eta3, self.eta4)
    }

    pub fn v(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn w(&self) -> Vector3<f64> {
        Vector3::new(self.wx, self.wy, self.wz)
    }

    pub fn force(&self) -> Vector3<f64> {
        Vector3::new(self.fx, self.fy, self.fz)
    }

    fn values(&self) -> [f64; 17] {
        [
            self.qw, self.qx, self.qy, self.qz, self.eta1, self.eta2, self.eta3, self.eta4, self.vx,
            self.vy, self.vz, self.wx, self.wy, self.wz, self.fx, self.fy, self.fz,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlightDataset {
    pub samples: Vec<FlightSample>,
}

impl FlightDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Unit quaternions (1e-6) and finite values.
    pub fn check(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.values().iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("sample {i} has non-finite values")));
            }
            let n = s.q().norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("sample {i}: quaternion norm {n}")));
            }
        }
        Ok(())
    }

    /// CSV with a header row naming the [`FlightSample`] fields.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for s in &self.samples {
            w.serialize(s).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
        let samples = r
            .deserialize()
            .collect::<std::result::Result<Vec<FlightSample>, _>>()
            .map_err(csv_error)?;
        Ok(Self { samples })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("dataset CSV: {e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub tikhonov_lambda: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-3,
            tikhonov_lambda: 1e-4,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

/// Loss curves and summary errors (mean squared force error per axis, N^2).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub linear_train_mse: f64,
    pub linear_validation_mse: f64,
    pub hybrid_train_mse: f64,
    pub hybrid_validation_mse: f64,
    pub train_samples: usize,
    pub validation_samples: usize,
}

/// Inputs, relative winds and forces of a split, one column per sample.
struct Split {
    x: DMatrix<f64>,
    u: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl Split {
    fn new(samples: &[&FlightSample]) -> Result<Self> {
        let n = samples.len();
        let mut x = DMatrix::zeros(8, n);
        let mut u = DMatrix::zeros(3, n);
        let mut f = DMatrix::zeros(3, n);
        for (j, s) in samples.iter().enumerate() {
            let feat = features(&s.q(), &s.eta())?;
            x.column_mut(j).copy_from_slice(&feat);
            u.set_column(j, &(s.w() - s.v()));
            f.set_column(j, &s.force());
        }
        Ok(Self { x, u, f })
    }

    fn len(&self) -> usize {
        self.x.ncols()
    }

    /// Residual `(c + out) . u - f` per sample.
    fn residual(&self, c: &Vector3<f64>, out: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(3, self.len());
        for j in 0..self.len() {
            for a in 0..3 {
                r[(a, j)] = (c[a] + out[(a, j)]) * self.u[(a, j)] - self.f[(a, j)];
            }
        }
        r
    }

    fn mse(&self, c: &Vector3<f64>, net: &Mlp) -> f64 {
        if self.len() == 0 {
            return f64::NAN;
        }
        let out = net.forward_batch(&self.x);
        self.residual(c, out.output()).norm_squared() / (3 * self.len()) as f64
    }
}

/// Fits `C_d` by per-axis least squares, then trains the network on the remaining
/// error with full-batch Adam minimizing `MSE + lambda * sum(W^2)`.
pub fn train(dataset: &FlightDataset, cfg: &TrainConfig) -> Result<DragModel> {
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    dataset.check()?;
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.w().norm() > 1e-12 {
            return Err(Error::ProtocolViolation(format!(
                "sample {i} was recorded in wind {:?}; training data must come from still air",
                s.w().as_slice()
            )));
        }
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(invalid("validation fraction must lie in [0, 1)"));
    }
    if !(cfg.learning_rate > 0.0) || cfg.tikhonov_lambda < 0.0 {
        return Err(invalid("learning rate must be positive and lambda nonnegative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &dataset.samples[i]).collect::<Vec<_>>();
    let train_set = Split::new(&pick(train_idx))?;
    let val_set = Split::new(&pick(val_idx))?;

    // Stage 1: f_a = C_a u_a per axis.
    let mut c_d = Vector3::zeros();
    for a in 0..3 {
        let uu: f64 = train_set.u.row(a).iter().map(|v| v * v).sum();
        let uf: f64 = train_set.u.row(a).dot(&train_set.f.row(a));
        c_d[a] = if uu > 0.0 { uf / uu } else { 0.0 };
    }
    let zero_net = Mlp::zeros(&DRAG_NET_WIDTHS);
    let linear_train_mse = train_set.mse(&c_d, &zero_net);
    let linear_validation_mse = val_set.mse(&c_d, &zero_net);

    // Stage 2: network on the residual.
    // Zero output layer: training starts from the linear-only fit.
    let mut net = Mlp::he_uniform(&DRAG_NET_WIDTHS, &mut rng);
    net.weights.last_mut().unwrap().fill(0.0);
    let mut params = net.to_flat();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let scale = 2.0 / (3 * train_set.len()) as f64;
    let mut history = TrainingHistory {
        linear_train_mse,
        linear_validation_mse,
        train_samples: train_set.len(),
        validation_samples: val_set.len(),
        ..Default::default()
    };
    for _ in 0..cfg.epochs {
        let cache = net.forward_batch(&train_set.x);
        let r = train_set.residual(&c_d, cache.output());
        history
            .train_loss
            .push(r.norm_squared() / (3 * train_set.len()) as f64);
        let d_out = r.component_mul(&train_set.u) * scale;
        let mut grads = net.backward_batch(&cache, &d_out);
        for (g, w) in grads.weights.iter_mut().zip(&net.weights) {
            *g += w * (2.0 * cfg.tikhonov_lambda);
        }
        adam.step(&mut params, &grads.to_flat());
        net.set_flat(&params);
        history.validation_loss.push(val_set.mse(&c_d, &net));
    }
    history.hybrid_train_mse = train_set.mse(&c_d, &net);
    history.hybrid_validation_mse = val_set.mse(&c_d, &net);

    Ok(DragModel {
        c_d,
        net,
        max_rpm: DEFAULT_MAX_RPM,
        history: Some(history),
    })
}
