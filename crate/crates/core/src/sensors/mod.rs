//! Detection ingestion: message types, the JSON Lines wire format, frameset
//! synchronization, and calibration-grade filtering.

mod filter;
mod sync;
pub mod transport;
mod wire;

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

pub use filter::{filter_frameset, undistort_frameset, FilterConfig};
pub use sync::{synchronize, SyncConfig, SyncOutput, Synchronizer};
pub use wire::{parse_message, to_json_line};

pub type SensorId = u32;
pub type JointId = u8;
/// Nanoseconds since the Unix epoch.
pub type Timestamp = i64;

/// Number of keypoints in the COCO-17 skeleton.
pub const NUM_JOINTS: usize = 17;
pub const LEFT_SHOULDER: JointId = 5;
pub const RIGHT_SHOULDER: JointId = 6;
pub const LEFT_HIP: JointId = 11;
pub const RIGHT_HIP: JointId = 12;
/// Both shoulders and both hips.
pub const TORSO_JOINTS: [JointId; 4] = [LEFT_SHOULDER, RIGHT_SHOULDER, LEFT_HIP, RIGHT_HIP];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Anatomical joint groups used when reporting per-joint statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JointGroup {
    Head,
    Hips,
    Knees,
    Ankles,
    Shoulders,
    Elbows,
    Wrists,
}

impl JointGroup {
    /// Reporting order.
    pub const ALL: [JointGroup; 7] = [
        JointGroup::Head,
        JointGroup::Hips,
        JointGroup::Knees,
        JointGroup::Ankles,
        JointGroup::Shoulders,
        JointGroup::Elbows,
        JointGroup::Wrists,
    ];

    pub fn of(joint: JointId) -> Option<JointGroup> {
        Some(match joint {
            0..=4 => JointGroup::Head,
            5 | 6 => JointGroup::Shoulders,
            7 | 8 => JointGroup::Elbows,
            9 | 10 => JointGroup::Wrists,
            11 | 12 => JointGroup::Hips,
            13 | 14 => JointGroup::Knees,
            15 | 16 => JointGroup::Ankles,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            JointGroup::Head => "head",
            JointGroup::Hips => "hips",
            JointGroup::Knees => "knees",
            JointGroup::Ankles => "ankles",
            JointGroup::Shoulders => "shoulders",
            JointGroup::Elbows => "elbows",
            JointGroup::Wrists => "wrists",
        }
    }
}

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("no intrinsics for sensor {0}")]
    MissingIntrinsics(SensorId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One 2D keypoint observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub joint_id: JointId,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
    /// Pixel covariance, px².
    pub cov: Matrix2<f64>,
}

impl Detection {
    pub fn new(joint_id: JointId, pixel: Vector2<f64>, confidence: f64, cov: Matrix2<f64>) -> Self {
        Self {
            joint_id,
            pixel,
            confidence,
            cov,
        }
    }
}

/// Keypoints of one person instance as seen by one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonDetection {
    pub sensor_id: SensorId,
    pub person_index: u32,
    pub joints: BTreeMap<JointId, Detection>,
}

impl PersonDetection {
    pub fn has_torso(&self) -> bool {
        TORSO_JOINTS.iter().all(|j| self.joints.contains_key(j))
    }

    pub fn torso_pixels(&self) -> Option<[Vector2<f64>; 4]> {
        let mut out = [Vector2::zeros(); 4];
        for (slot, j) in out.iter_mut().zip(TORSO_JOINTS) {
            *slot = self.joints.get(&j)?.pixel;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMessage {
    pub sensor_id: SensorId,
    pub timestamp_ns: Timestamp,
    pub persons: Vec<PersonDetection>,
}

/// Time-aligned detection messages, at most one per sensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frameset {
    pub reference_time: Timestamp,
    pub entries: BTreeMap<SensorId, DetectionMessage>,
}

impl Frameset {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn timestamp_span(&self) -> i64 {
        let ts = self.entries.values().map(|m| m.timestamp_ns);
        match (ts.clone().min(), ts.max()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0,
        }
    }

    /// Population standard deviation of the member timestamps, ns.
    pub fn timestamp_std(&self) -> f64 {
        let n = self.entries.len();
        if n < 2 {
            return 0.0;
        }
        let base = self.reference_time;
        let offs: Vec<f64> = self
            .entries
            .values()
            .map(|m| (m.timestamp_ns - base) as f64)
            .collect();
        let mean = offs.iter().sum::<f64>() / n as f64;
        (offs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    }

    /// All persons in the frameset, ordered by sensor then person index.
    pub fn persons(&self) -> impl Iterator<Item = &PersonDetection> {
        self.entries.values().flat_map(|m| m.persons.iter())
    }
}
