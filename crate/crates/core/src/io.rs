//! File formats: camera rigs / calibration results (JSON) and detection
//! streams (JSON Lines).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose3};
use crate::refinement::CalibrationState;
use crate::sensors::{parse_message, to_json_line, DetectionMessage, SensorError, SensorId};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Unit quaternion, `[w, x, y, z]`.
    pub rotation_wxyz: [f64; 4],
    /// Camera center in world coordinates, meters.
    pub translation: [f64; 3],
}

impl From<&Pose3> for PoseRecord {
    fn from(p: &Pose3) -> Self {
        Self {
            rotation_wxyz: p.quaternion_wxyz(),
            translation: p.translation.into(),
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Pose3 {
        Pose3::from_wxyz(self.rotation_wxyz, Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub sensor_id: SensorId,
    pub pose: PoseRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    /// Row-major 6×6 tangent covariance, (ρ, φ) order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<[[f64; 6]; 6]>,
}

/// A set of camera poses with optional intrinsics and uncertainties.
///
/// The same layout serves as initial extrinsics, simulator ground truth and
/// calibration output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge_sensor: Option<SensorId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_count: Option<u64>,
    pub cameras: Vec<CameraRecord>,
}

impl RigFile {
    pub fn from_parts(
        poses: &BTreeMap<SensorId, Pose3>,
        intrinsics: Option<&BTreeMap<SensorId, CameraIntrinsics>>,
        covariances: Option<&BTreeMap<SensorId, Matrix6<f64>>>,
    ) -> Self {
        let cameras = poses
            .iter()
            .map(|(s, p)| CameraRecord {
                sensor_id: *s,
                pose: p.into(),
                intrinsics: intrinsics.and_then(|m| m.get(s).copied()),
                covariance: covariances
                    .and_then(|m| m.get(s))
                    .map(|c| std::array::from_fn(|i| std::array::from_fn(|j| c[(i, j)]))),
            })
            .collect();
        Self {
            gauge_sensor: None,
            cycle_count: None,
            cameras,
        }
    }

    /// Calibration result; the gauge camera is written with a zero covariance.
    pub fn from_state(state: &CalibrationState, intrinsics: &BTreeMap<SensorId, CameraIntrinsics>) -> Self {
        let covs = state
            .estimates
            .iter()
            .map(|(&s, e)| (s, e.covariance))
            .collect();
        let mut rig = Self::from_parts(&state.poses(), Some(intrinsics), Some(&covs));
        rig.gauge_sensor = Some(state.gauge_sensor);
        rig.cycle_count = Some(state.cycle_count);
        rig
    }

    pub fn poses(&self) -> BTreeMap<SensorId, Pose3> {
        self.cameras
            .iter()
            .map(|c| (c.sensor_id, c.pose.to_pose()))
            .collect()
    }

    pub fn intrinsics(&self) -> BTreeMap<SensorId, CameraIntrinsics> {
        self.cameras
            .iter()
            .filter_map(|c| Some((c.sensor_id, c.intrinsics?)))
            .collect()
    }

    fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for c in &self.cameras {
            if !seen.insert(c.sensor_id) {
                return Err(format!("duplicate sensor_id {}", c.sensor_id));
            }
            let q = c.pose.rotation_wxyz;
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(format!("sensor {}: rotation is not a unit quaternion", c.sensor_id));
            }
            if !c.pose.translation.iter().all(|v| v.is_finite()) {
                return Err(format!("sensor {}: non-finite translation", c.sensor_id));
            }
            if let Some(i) = &c.intrinsics {
                i.validate().map_err(|e| format!("sensor {}: {e}", c.sensor_id))?;
            }
            if let Some(cov) = &c.covariance {
                if !cov.iter().flatten().all(|v| v.is_finite()) {
                    return Err(format!("sensor {}: non-finite covariance", c.sensor_id));
                }
            }
        }
        if let Some(g) = self.gauge_sensor {
            if !seen.contains(&g) {
                return Err(format!("gauge sensor {g} is not listed"));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let rig: RigFile = serde_json::from_str(&text).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        rig.validate().map_err(|reason| IoError::Invalid {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(rig)
    }

    /// Writes pretty JSON and reads it back to confirm it parses.
    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self).expect("rig files always serialize");
        fs::write(path, text + "\n").map_err(io_err(path))?;
        let back = Self::read(path)?;
        if back.cameras.len() != self.cameras.len() {
            return Err(IoError::Invalid {
                path: path.to_path_buf(),
                reason: "read-back mismatch".into(),
            });
        }
        Ok(())
    }
}

pub fn write_detection_stream(path: &Path, messages: &[DetectionMessage]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for m in messages {
        writeln!(w, "{}", to_json_line(m))?;
    }
    w.flush()
}

/// Lazily parsed JSON Lines detection file. Blank lines are skipped; a line
/// that fails to parse yields an error item and reading continues.
pub struct JsonlStream {
    lines: std::io::Lines<BufReader<fs::File>>,
}

impl JsonlStream {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            lines: BufReader::new(fs::File::open(path)?).lines(),
        })
    }
}

impl Iterator for JsonlStream {
    type Item = Result<DetectionMessage, SensorError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(SensorError::Io(e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_message(line.as_bytes()));
        }
    }
}

/// All `*.jsonl` files of a directory, sorted by name.
pub fn detection_files(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every detection file of a directory into memory. Malformed records
/// are counted, not fatal.
pub fn read_detection_dir(dir: &Path) -> Result<(Vec<DetectionMessage>, u64), IoError> {
    let mut messages = Vec::new();
    let mut errors = 0;
    for path in detection_files(dir)? {
        for item in JsonlStream::open(&path).map_err(io_err(&path))? {
            match item {
                Ok(m) => messages.push(m),
                Err(e) => {
                    log::warn!("{}: skipping record: {e}", path.display());
                    errors += 1;
                }
            }
        }
    }
    Ok((messages, errors))
}
