//! Hybrid aerodynamic drag model: diagonal linear drag plus a ReLU network gain.
//!
//! The predicted force is `(C_d + diag(net(q, eta))) (w - v)`. For fixed attitude and
//! rotor speeds the model is linear in the relative wind, so its Jacobian with respect
//! to the wind is simply `C_d + diag(net(q, eta))`.

pub mod mlp;
pub mod train;

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
pub use mlp::{Adam, Mlp};
pub use train::{train, FlightDataset, FlightSample, TrainConfig, TrainingHistory};

/// Layer widths of the drag network: quaternion (4) + motor speeds (4) in, diagonal gain (3) out.
pub const DRAG_NET_WIDTHS: [usize; 4] = [8, 20, 20, 3];

/// Accepted deviation of an attitude quaternion from unit norm.
pub const QUATERNION_NORM_TOL: f64 = 1e-3;

pub const MODEL_FORMAT: &str = "quadsteer-drag-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DragModel {
    /// Diagonal of `C_d` (N s / m).
    pub c_d: Vector3<f64>,
    pub net: Mlp,
    /// Motor speed that maps to `eta = 1` (documentation only; inputs arrive normalized).
    pub max_rpm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainingHistory>,
}

/// Network inputs: `[qw, qx, qy, qz, eta_1..eta_4]`, with the sign of `q` fixed so `qw >= 0`.
pub fn features(q: &Quaternion<f64>, eta: &Vector4<f64>) -> Result<[f64; 8]> {
    let norm = q.norm();
    if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) {
        return Err(invalid(format!("attitude quaternion has norm {norm}")));
    }
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    Ok([
        s * q.w,
        s * q.i,
        s * q.j,
        s * q.k,
        eta[0],
        eta[1],
        eta[2],
        eta[3],
    ])
}

impl DragModel {
    /// Linear-only model (`net` identically zero).
    pub fn linear(c_d: Vector3<f64>) -> Self {
        Self {
            c_d,
            net: Mlp::zeros(&DRAG_NET_WIDTHS),
            max_rpm: DEFAULT_MAX_RPM,
            history: None,
        }
    }

    /// Diagonal of `C_d + diag(net(q, eta))`.
    pub fn gain(&self, q: &Quaternion<f64>, eta: &Vector4<f64>) -> Result<Vector3<f64>> {
        let x = features(q, eta)?;
        let out = self.net.forward(&x);
        Ok(self.c_d + Vector3::new(out[0], out[1], out[2]))
    }

    pub fn predict(
        &self,
        q: &Quaternion<f64>,
        eta: &Vector4<f64>,
        v: &Vector3<f64>,
        w: &Vector3<f64>,
    ) -> Result<Vector3<f64>> {
        Ok(self.gain(q, eta)?.component_mul(&(w - v)))
    }

    /// `d predict / d w`; independent of `w` and `v`.
    pub fn jacobian_wrt_wind(&self, q: &Quaternion<f64>, eta: &Vector4<f64>) -> Result<Matrix3<f64>> {
        Ok(Matrix3::from_diagonal(&self.gain(q, eta)?))
    }

    /// Copy without the network contribution.
    pub fn linear_part(&self) -> Self {
        Self {
            net: Mlp::zeros(&self.net.widths),
            history: None,
            ..self.clone()
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            widths: self.net.widths.clone(),
            c_d: [self.c_d.x, self.c_d.y, self.c_d.z],
            max_rpm: self.max_rpm,
            layers: self
                .net
                .weights
                .iter()
                .zip(&self.net.biases)
                .map(|(w, b)| LayerFile {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: (0..w.nrows())
                        .flat_map(|i| (0..w.ncols()).map(move |j| w[(i, j)]))
                        .collect(),
                    biases: b.iter().copied().collect(),
                })
                .collect(),
            history: self.history.clone(),
        };
        serde_json::to_writer_pretty(out, &file)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(input)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Config(format!("not a drag model file (format '{}')", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Config(format!("unsupported model version {}", file.version)));
        }
        if file.layers.len() + 1 != file.widths.len() {
            return Err(Error::Config("layer count does not match widths".into()));
        }
        let mut net = Mlp::zeros(&file.widths);
        for (l, layer) in file.layers.iter().enumerate() {
            let (rows, cols) = (file.widths[l + 1], file.widths[l]);
            if layer.rows != rows
                || layer.cols != cols
                || layer.weights.len() != rows * cols
                || layer.biases.len() != rows
            {
                return Err(Error::Config(format!("layer {l} has inconsistent shape")));
            }
            net.weights[l] = nalgebra::DMatrix::from_row_slice(rows, cols, &layer.weights);
            net.biases[l] = nalgebra::DVector::from_column_slice(&layer.biases);
        }
        Ok(Self {
            c_d: Vector3::from(file.c_d),
            net,
            max_rpm: file.max_rpm,
            history: file.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_json(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_json(std::io::BufReader::new(f))
    }
}

pub const DEFAULT_MAX_RPM: f64 = 30_000.0;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    widths: Vec<usize>,
    c_d: [f64; 3],
    max_rpm: f64,
    layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    history: Option<TrainingHistory>,
}

/// Simulation stand-in for the true aerodynamics:
/// `f = -(C1 + C2 |u| + g(q, eta)) u` with `u = v - w`,
/// `g = attitude_gain * sin^2(tilt) + rpm_gain * mean(eta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthAero {
    pub linear: Vector3<f64>,
    pub quadratic: Vector3<f64>,
    pub attitude_gain: f64,
    pub rpm_gain: f64,
}

impl Default for GroundTruthAero {
    fn default() -> Self {
        Self {
            linear: Vector3::new(0.22, 0.22, 0.30),
            quadratic: Vector3::new(0.012, 0.012, 0.02),
            attitude_gain: 0.15,
            rpm_gain: 0.12,
        }
    }
}

impl GroundTruthAero {
    pub fn linear_only(c: Vector3<f64>) -> Self {
        Self {
            linear: c,
            quadratic: Vector3::zeros(),
            attitude_gain: 0.0,
            rpm_gain: 0.0,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.quadratic == Vector3::zeros() && self.attitude_gain == 0.0 && self.rpm_gain == 0.0
    }

    pub fn force(
        &self,
        q: &UnitQuaternion<f64>,
        eta: &Vector4<f64>,
        v: &Vector3<f64>,
        w: &Vector3<f64>,
    ) -> Vector3<f64> {
        let u = v - w;
        let body_z = q * Vector3::z();
        let tilt_sq = 1.0 - body_z.z * body_z.z;
        let shared = self.attitude_gain * tilt_sq + self.rpm_gain * eta.mean();
        let gain = self.linear + self.quadratic * u.norm() + Vector3::repeat(shared);
        -gain.component_mul(&u)
    }
}
