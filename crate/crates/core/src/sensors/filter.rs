use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Frameset, SensorError, SensorId};
use crate::geometry::{undistort_pixel, CameraIntrinsics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Maximum spread of member timestamps, ns.
    pub max_span_ns: i64,
    /// Maximum standard deviation of member timestamps, ns.
    pub max_std_ns: f64,
    pub min_confidence: f64,
    /// Sensors reporting more persons than this are dropped from the frameset.
    pub max_persons: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_span_ns: 33_000_000,
            max_std_ns: 15_000_000.0,
            min_confidence: 0.6,
            max_persons: 10,
        }
    }
}

/// Reduces a frameset to calibration-grade detections. Returns an empty
/// frameset when the timing checks fail.
pub fn filter_frameset(fs: &Frameset, cfg: &FilterConfig) -> Frameset {
    if fs.timestamp_span() > cfg.max_span_ns || fs.timestamp_std() > cfg.max_std_ns {
        return Frameset {
            reference_time: fs.reference_time,
            entries: BTreeMap::new(),
        };
    }
    let mut entries = BTreeMap::new();
    for (sensor, msg) in &fs.entries {
        if msg.persons.len() > cfg.max_persons {
            continue;
        }
        let mut msg = msg.clone();
        for person in msg.persons.iter_mut() {
            person.joints.retain(|_, d| d.confidence >= cfg.min_confidence);
        }
        msg.persons.retain(|p| p.has_torso());
        if !msg.persons.is_empty() {
            entries.insert(*sensor, msg);
        }
    }
    Frameset {
        reference_time: fs.reference_time,
        entries,
    }
}

/// Replaces every detection by its undistorted pixel and propagates the
/// covariance to first order. Joints that fail to undistort are dropped,
/// together with persons that thereby lose a torso joint.
pub fn undistort_frameset(
    fs: &Frameset,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
) -> Result<Frameset, SensorError> {
    let mut out = fs.clone();
    for (sensor, msg) in out.entries.iter_mut() {
        let intr = intrinsics
            .get(sensor)
            .ok_or(SensorError::MissingIntrinsics(*sensor))?;
        if intr.distortion.is_zero() {
            continue;
        }
        for person in msg.persons.iter_mut() {
            person.joints.retain(|_, det| match undistort_pixel(intr, &det.pixel) {
                Ok(px) => {
                    let j = intr.undistort_jacobian(&px);
                    det.pixel = px;
                    let cov = j * det.cov * j.transpose();
                    det.cov = (cov + cov.transpose()) * 0.5;
                    true
                }
                Err(_) => false,
            });
        }
        msg.persons.retain(|p| p.has_torso());
    }
    out.entries.retain(|_, m| !m.persons.is_empty());
    Ok(out)
}
