//! Geometric and measurement primitives shared by every other module.
//!
//! Everything here is an immutable value type. Dimensions are runtime
//! values (`d` is 2 or 3) so planar and spatial systems share one code path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Floor applied to the surrogate standard deviation when the raw noise
/// level is zero, so weights stay finite on noiseless data.
pub const SIGMA_Q_FLOOR: f64 = 1e-6;

/// Rigid body state: `p = R * nu + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: DMatrix<f64>,
    pub translation: DVector<f64>,
}

impl Pose {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: DMatrix::identity(dim, dim),
            translation: DVector::zeros(dim),
        }
    }

    pub fn new(rotation: DMatrix<f64>, translation: DVector<f64>) -> Result<Self> {
        let d = translation.len();
        if rotation.nrows() != d || rotation.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: rotation.nrows(),
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    /// Largest deviation from `R^T R = I` and `det R = 1`.
    pub fn rotation_defect(&self) -> f64 {
        rotation_defect(&self.rotation)
    }

    /// Relative transform expressed in this pose's body frame: `R^T (t_other - t)`.
    pub fn relative_translation(&self, other: &Pose) -> DVector<f64> {
        self.rotation.transpose() * (&other.translation - &self.translation)
    }
}

pub fn rotation_defect(r: &DMatrix<f64>) -> f64 {
    let d = r.nrows();
    let orth = (r.transpose() * r - DMatrix::<f64>::identity(d, d)).amax();
    let det = (r.determinant() - 1.0).abs();
    orth.max(det)
}

/// Body-frame coordinates of the distance sensors mounted on one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    pub points: Vec<DVector<f64>>,
}

impl SensorLayout {
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("a sensor layout needs at least one sensor"));
        }
        let d = points[0].len();
        if let Some(bad) = points.iter().find(|p| p.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(Self { points })
    }

    /// Two sensors on the body y axis, `+-half_baseline` from the origin.
    pub fn symmetric_pair(dim: usize, half_baseline: f64) -> Self {
        let mut a = DVector::zeros(dim);
        let mut b = DVector::zeros(dim);
        a[1] = half_baseline;
        b[1] = -half_baseline;
        Self { points: vec![a, b] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// True when all sensors lie on one plane (always true in 2D or with at
    /// most three sensors).
    pub fn is_coplanar(&self, tol: f64) -> bool {
        if self.dim() < 3 || self.len() <= 3 {
            return true;
        }
        let origin = &self.points[0];
        let diffs: Vec<DVector<f64>> = self.points[1..].iter().map(|p| p - origin).collect();
        let m = DMatrix::from_columns(&diffs);
        let sv = m.singular_values();
        let scale = sv.max().max(1e-12);
        sv.iter().filter(|s| **s > tol * scale).count() <= 2
    }
}

/// Which components of attitude an agent observes by itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProprioMode {
    DistanceOnly,
    FourAxis,
    SixAxis,
}

/// A proprioceptive attitude reading.
#[derive(Debug, Clone, PartialEq)]
pub enum ProprioReading {
    DistanceOnly,
    /// Measured roll and pitch, radians.
    FourAxis { roll: f64, pitch: f64 },
    /// Full measured attitude.
    SixAxis { rotation: DMatrix<f64> },
}

impl ProprioReading {
    pub fn mode(&self) -> ProprioMode {
        match self {
            ProprioReading::DistanceOnly => ProprioMode::DistanceOnly,
            ProprioReading::FourAxis { .. } => ProprioMode::FourAxis,
            ProprioReading::SixAxis { .. } => ProprioMode::SixAxis,
        }
    }
}

/// One noisy inter-sensor range with its quadratic surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMeasurement {
    pub agent_a: usize,
    pub sensor_a: usize,
    pub agent_b: usize,
    pub sensor_b: usize,
    /// Raw measured distance, meters.
    pub distance: f64,
    /// Surrogate squared distance `d^2 - sigma^2`, square meters.
    pub q: f64,
    /// Standard deviation of the surrogate, square meters.
    pub sigma_q: f64,
    /// Set for measurements taken by an anchor agent on top of the topology.
    pub from_anchor: bool,
}

impl DistanceMeasurement {
    pub fn weight(&self) -> f64 {
        1.0 / (self.sigma_q * self.sigma_q)
    }
}

/// Sensor coordinates in the common frame, one column per sensor, ordered
/// agent-major then sensor index.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub coords: DMatrix<f64>,
}

impl Realization {
    pub fn new(coords: DMatrix<f64>) -> Self {
        Self { coords }
    }

    pub fn zeros(dim: usize, sensors: usize) -> Self {
        Self {
            coords: DMatrix::zeros(dim, sensors),
        }
    }

    /// Places every sensor via `p = R nu + t`.
    pub fn from_poses(poses: &[Pose], layouts: &[SensorLayout]) -> Result<Self> {
        if poses.len() != layouts.len() {
            return Err(Error::DimensionMismatch {
                expected: poses.len(),
                got: layouts.len(),
            });
        }
        let dim = poses.first().map(|p| p.dim()).unwrap_or(3);
        let total: usize = layouts.iter().map(|l| l.len()).sum();
        let mut coords = DMatrix::zeros(dim, total);
        let mut col = 0;
        for (pose, layout) in poses.iter().zip(layouts) {
            for nu in &layout.points {
                let p = transform_point(pose, nu)?;
                coords.set_column(col, &p);
                col += 1;
            }
        }
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.nrows()
    }

    pub fn len(&self) -> usize {
        self.coords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.ncols() == 0
    }

    pub fn point(&self, col: usize) -> DVector<f64> {
        self.coords.column(col).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }
}

/// Column offsets of each agent's sensors inside a realization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorIndex {
    offsets: Vec<usize>,
}

impl SensorIndex {
    pub fn from_counts(counts: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for c in counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c);
        }
        Self { offsets }
    }

    pub fn agents(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn count(&self, agent: usize) -> usize {
        self.offsets[agent + 1] - self.offsets[agent]
    }

    pub fn column(&self, agent: usize, sensor: usize) -> usize {
        debug_assert!(sensor < self.count(agent));
        self.offsets[agent] + sensor
    }

    pub fn columns(&self, agent: usize) -> std::ops::Range<usize> {
        self.offsets[agent]..self.offsets[agent + 1]
    }

    /// Agent owning a column.
    pub fn owner(&self, col: usize) -> usize {
        match self.offsets.binary_search(&col) {
            Ok(mut k) => {
                // Skip agents with zero sensors sharing this offset.
                while self.offsets[k + 1] == col {
                    k += 1;
                }
                k
            }
            Err(k) => k - 1,
        }
    }
}

/// `R nu + t`.
pub fn transform_point(pose: &Pose, body_point: &DVector<f64>) -> Result<DVector<f64>> {
    if body_point.len() != pose.dim() {
        return Err(Error::DimensionMismatch {
            expected: pose.dim(),
            got: body_point.len(),
        });
    }
    Ok(&pose.rotation * body_point + &pose.translation)
}

/// Quadratic surrogate of a range reading: `(d^2 - sigma^2, sqrt((2 sigma d)^2 + 2 sigma^4))`.
pub fn quadratic_surrogate(distance: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("noise level must be positive, got {sigma}")));
    }
    if !(distance >= 0.0) {
        return Err(invalid(format!("distance must be non-negative, got {distance}")));
    }
    let q = distance * distance - sigma * sigma;
    let s2 = sigma * sigma;
    let sigma_q = ((2.0 * sigma * distance).powi(2) + 2.0 * s2 * s2).sqrt();
    Ok((q, sigma_q))
}

/// Surrogate with the zero-noise floor applied instead of failing.
pub fn quadratic_surrogate_floored(distance: f64, sigma: f64) -> (f64, f64) {
    if sigma > 0.0 {
        let (q, s) = quadratic_surrogate(distance.max(0.0), sigma).expect("checked inputs");
        (q, s.max(SIGMA_Q_FLOOR))
    } else {
        (distance * distance, SIGMA_Q_FLOOR)
    }
}

pub fn rot_x(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
}

pub fn rot_y(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
}

pub fn rot_z(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
}

/// Planar rotation by `a`.
pub fn rot_2d(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// `R_z(yaw) R_y(pitch) R_x(roll)`.
pub fn rotation_from_rpy(roll: f64, pitch: f64, yaw: f64) -> DMatrix<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

/// Inverse of [`rotation_from_rpy`] away from gimbal lock; returns `(roll, pitch, yaw)`.
pub fn rpy_from_rotation(r: &DMatrix<f64>) -> (f64, f64, f64) {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

/// Third row of `R_y(pitch) R_x(roll)`, i.e. the gravity-axis row of any
/// attitude with these roll and pitch angles.
pub fn gravity_row(roll: f64, pitch: f64) -> [f64; 3] {
    [
        -pitch.sin(),
        pitch.cos() * roll.sin(),
        pitch.cos() * roll.cos(),
    ]
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}
