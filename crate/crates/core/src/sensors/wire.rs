use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{
    Detection, DetectionMessage, JointId, PersonDetection, SensorError, SensorId, Timestamp,
    NUM_JOINTS,
};

#[derive(Debug, Serialize, Deserialize)]
struct WireMessage {
    sensor_id: SensorId,
    timestamp_ns: Timestamp,
    persons: Vec<WirePerson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePerson {
    person_index: u32,
    joints: Vec<WireJoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireJoint {
    id: u32,
    u: f64,
    v: f64,
    c: f64,
    /// Row-major 2×2.
    cov: [f64; 4],
}

/// Parses and validates one JSON Lines detection record.
pub fn parse_message(bytes: &[u8]) -> Result<DetectionMessage, SensorError> {
    let wire: WireMessage =
        serde_json::from_slice(bytes).map_err(|e| SensorError::Schema(e.to_string()))?;

    let mut persons = Vec::with_capacity(wire.persons.len());
    for wp in wire.persons {
        let mut joints = BTreeMap::new();
        for wj in wp.joints {
            let det = validate_joint(&wj)?;
            if joints.insert(det.joint_id, det).is_some() {
                return Err(SensorError::Value(format!(
                    "duplicate joint id {} in person {}",
                    wj.id, wp.person_index
                )));
            }
        }
        persons.push(PersonDetection {
            sensor_id: wire.sensor_id,
            person_index: wp.person_index,
            joints,
        });
    }
    Ok(DetectionMessage {
        sensor_id: wire.sensor_id,
        timestamp_ns: wire.timestamp_ns,
        persons,
    })
}

fn validate_joint(wj: &WireJoint) -> Result<Detection, SensorError> {
    if wj.id as usize >= NUM_JOINTS {
        return Err(SensorError::Value(format!("joint id {} out of range", wj.id)));
    }
    if !(wj.u.is_finite() && wj.v.is_finite()) {
        return Err(SensorError::Value("non-finite pixel coordinates".into()));
    }
    if !(0.0..=1.0).contains(&wj.c) {
        return Err(SensorError::Value(format!(
            "confidence {} outside [0, 1]",
            wj.c
        )));
    }
    let raw = Matrix2::new(wj.cov[0], wj.cov[1], wj.cov[2], wj.cov[3]);
    let cov = (raw + raw.transpose()) * 0.5;
    if !cov.iter().all(|c| c.is_finite()) || cov.cholesky().is_none() {
        return Err(SensorError::Value(format!(
            "covariance of joint {} is not positive-definite",
            wj.id
        )));
    }
    Ok(Detection {
        joint_id: wj.id as JointId,
        pixel: Vector2::new(wj.u, wj.v),
        confidence: wj.c,
        cov,
    })
}

/// Serializes a message as one JSON line, without the trailing newline.
pub fn to_json_line(msg: &DetectionMessage) -> String {
    let wire = WireMessage {
        sensor_id: msg.sensor_id,
        timestamp_ns: msg.timestamp_ns,
        persons: msg
            .persons
            .iter()
            .map(|p| WirePerson {
                person_index: p.person_index,
                joints: p
                    .joints
                    .values()
                    .map(|d| WireJoint {
                        id: d.joint_id as u32,
                        u: d.pixel.x,
                        v: d.pixel.y,
                        c: d.confidence,
                        cov: [d.cov[(0, 0)], d.cov[(0, 1)], d.cov[(1, 0)], d.cov[(1, 1)]],
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("detection messages always serialize")
}
