//! Temporal smoothing of the per-camera pose estimates between optimization
//! cycles, and correction of the slow scale drift that the scale-free
//! keypoint constraints allow.
//!
//! Each camera carries an independent error-state Kalman filter in the
//! tangent space at its current estimate, with an identity motion model.

use std::collections::BTreeMap;

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{umeyama_align, GeometryError, Pose3, Tangent6};
use crate::sensors::SensorId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefinementError {
    #[error("covariance for sensor {0} is not positive-definite")]
    NonPDCovariance(SensorId),
    #[error("gauge sensor {0} has no pose")]
    MissingGauge(SensorId),
    #[error("gauge sensor {0} cannot be measured")]
    GaugeMeasured(SensorId),
    #[error("unknown sensor {0}")]
    UnknownSensor(SensorId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Per-axis translation random walk per cycle, meters.
    pub process_noise_m: f64,
    /// Per-axis rotation random walk per cycle, degrees.
    pub process_noise_deg: f64,
    /// Rescale to the initial calibration's scale after every update.
    pub rescale: bool,
    pub fusion: Fusion,
}

/// How a cycle's solve result enters the filtered state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// The graph's prior factors already carry the predicted state, so the
    /// solve is the measurement update: its poses and marginals replace the
    /// estimates ([`adopt`]).
    #[default]
    Posterior,
    /// The solve is treated as an independent measurement and fused once
    /// more with [`update`]. This counts the prior twice; the covariance then
    /// shrinks towards the process noise whatever the data say.
    Measurement,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            process_noise_m: 0.002,
            process_noise_deg: 0.1,
            rescale: true,
            fusion: Fusion::Posterior,
        }
    }
}

impl RefinementConfig {
    pub fn process_noise(&self) -> Matrix6<f64> {
        let t = self.process_noise_m.powi(2);
        let r = self.process_noise_deg.to_radians().powi(2);
        Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseEstimate {
    pub sensor_id: SensorId,
    pub pose: Pose3,
    /// Tangent-space covariance in (m, rad)², (ρ, φ) order.
    pub covariance: Matrix6<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub gauge_sensor: SensorId,
    pub estimates: BTreeMap<SensorId, CameraPoseEstimate>,
    /// Gauge-normalized initial calibration; the scale reference.
    pub initial: BTreeMap<SensorId, Pose3>,
    pub cycle_count: u64,
}

fn symmetrize(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

fn is_pd(m: &Matrix6<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && m.cholesky().is_some()
}

impl CalibrationState {
    /// Starts from a rough initial calibration. Poses are re-expressed
    /// relative to the gauge camera, which then sits at the identity with zero
    /// covariance; every other camera gets `prior_covariance`.
    pub fn new(
        initial: &BTreeMap<SensorId, Pose3>,
        gauge_sensor: SensorId,
        prior_covariance: Matrix6<f64>,
    ) -> Result<Self, RefinementError> {
        let g = initial
            .get(&gauge_sensor)
            .ok_or(RefinementError::MissingGauge(gauge_sensor))?
            .inverse();
        if !is_pd(&prior_covariance) {
            return Err(RefinementError::NonPDCovariance(gauge_sensor));
        }
        let initial: BTreeMap<SensorId, Pose3> = initial
            .iter()
            .map(|(&s, p)| {
                let pose = if s == gauge_sensor {
                    Pose3::identity()
                } else {
                    g.compose(p)
                };
                (s, pose)
            })
            .collect();
        let estimates = initial
            .iter()
            .map(|(&s, &pose)| {
                let covariance = if s == gauge_sensor {
                    Matrix6::zeros()
                } else {
                    prior_covariance
                };
                (
                    s,
                    CameraPoseEstimate {
                        sensor_id: s,
                        pose,
                        covariance,
                    },
                )
            })
            .collect();
        Ok(Self {
            gauge_sensor,
            estimates,
            initial,
            cycle_count: 0,
        })
    }

    pub fn poses(&self) -> BTreeMap<SensorId, Pose3> {
        self.estimates.iter().map(|(&s, e)| (s, e.pose)).collect()
    }

    /// Covariances of the non-gauge cameras.
    pub fn covariances(&self) -> BTreeMap<SensorId, Matrix6<f64>> {
        self.estimates
            .iter()
            .filter(|(s, _)| **s != self.gauge_sensor)
            .map(|(&s, e)| (s, e.covariance))
            .collect()
    }
}

/// Inflates every non-gauge covariance by `cycles_elapsed · Q`.
pub fn predict(state: &CalibrationState, cycles_elapsed: u64, q: &Matrix6<f64>) -> CalibrationState {
    let mut out = state.clone();
    if cycles_elapsed == 0 {
        return out;
    }
    let add = q * cycles_elapsed as f64;
    for (s, e) in out.estimates.iter_mut() {
        if *s != state.gauge_sensor {
            e.covariance += add;
        }
    }
    out
}

/// Fuses pose measurements (with covariances) into the filtered state.
/// Cameras without a measurement are left as they are.
pub fn update(
    state: &CalibrationState,
    measurements: &BTreeMap<SensorId, (Pose3, Matrix6<f64>)>,
) -> Result<CalibrationState, RefinementError> {
    let mut out = state.clone();
    for (&s, (meas, r)) in measurements {
        if s == state.gauge_sensor {
            return Err(RefinementError::GaugeMeasured(s));
        }
        let est = out
            .estimates
            .get_mut(&s)
            .ok_or(RefinementError::UnknownSensor(s))?;
        let r = symmetrize(r);
        if !is_pd(&r) || !is_pd(&est.covariance) {
            return Err(RefinementError::NonPDCovariance(s));
        }
        let p = est.covariance;
        let y = est.pose.local(meas)?;
        let s_inv = (p + r)
            .cholesky()
            .ok_or(RefinementError::NonPDCovariance(s))?
            .inverse();
        let k = p * s_inv;
        est.pose = est.pose.retract(&Tangent6(k * y.0));
        let cov = symmetrize(&((Matrix6::identity() - k) * p));
        if !is_pd(&cov) {
            return Err(RefinementError::NonPDCovariance(s));
        }
        est.covariance = cov;
    }
    Ok(out)
}

/// Replaces the measured cameras' estimates by a solve posterior that was
/// computed with the current state as its prior.
pub fn adopt(
    state: &CalibrationState,
    posterior: &BTreeMap<SensorId, (Pose3, Matrix6<f64>)>,
) -> Result<CalibrationState, RefinementError> {
    let mut out = state.clone();
    for (&s, (pose, cov)) in posterior {
        if s == state.gauge_sensor {
            return Err(RefinementError::GaugeMeasured(s));
        }
        let est = out
            .estimates
            .get_mut(&s)
            .ok_or(RefinementError::UnknownSensor(s))?;
        let cov = symmetrize(cov);
        if !is_pd(&cov) {
            return Err(RefinementError::NonPDCovariance(s));
        }
        est.pose = *pose;
        est.covariance = cov;
    }
    Ok(out)
}

/// Scale `s*` of the similarity that best maps the current camera centers
/// onto the initial ones.
pub fn scale_to_initial(state: &CalibrationState) -> Option<f64> {
    let (src, dst): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) = state
        .estimates
        .iter()
        .filter_map(|(s, e)| state.initial.get(s).map(|i| (e.pose.translation, i.translation)))
        .unzip();
    if src.len() < 2 {
        return None;
    }
    let sim = umeyama_align(&src, &dst, true).ok()?;
    (sim.scale.is_finite() && sim.scale > 0.0).then_some(sim.scale)
}

/// Multiplies every camera translation by the Umeyama scale towards the
/// initial calibration. Rotations and covariances are left untouched.
pub fn rescale_to_initial(state: &CalibrationState) -> CalibrationState {
    let mut out = state.clone();
    let Some(scale) = scale_to_initial(state) else {
        return out;
    };
    for (s, e) in out.estimates.iter_mut() {
        if *s != state.gauge_sensor {
            e.pose.translation *= scale;
        }
    }
    out
}
