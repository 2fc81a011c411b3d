//! Synthetic camera networks with walking, articulated people.
//!
//! Everything here is deterministic given the scenario seed. Ground truth is
//! gauge-normalized: camera 0 sits at the identity and all other poses and
//! joint positions are expressed in its frame.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pose3};
use crate::io::{write_detection_stream, RigFile};
use crate::sensors::{
    Detection, DetectionMessage, JointId, PersonDetection, SensorId, Timestamp, NUM_JOINTS,
};

/// Covariance floor for emitted detections, px². Keeps noise-free renders
/// valid on the wire, where covariances must be positive-definite.
const MIN_EMITTED_VARIANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("invalid scenario field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn config_error(field: &'static str, reason: impl Into<String>) -> SimulatorError {
    SimulatorError::Config {
        field,
        reason: reason.into(),
    }
}

/// Cameras evenly spaced on a horizontal circle, all aimed at one point
/// above the room center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRing {
    pub count: usize,
    pub radius_m: f64,
    pub height_m: f64,
    /// Height of the aim point above the room center.
    pub target_height_m: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for CameraRing {
    fn default() -> Self {
        Self {
            count: 8,
            radius_m: 5.0,
            height_m: 2.6,
            target_height_m: 1.0,
            intrinsics: CameraIntrinsics::pinhole(450.0, 450.0, 320.0, 240.0, 640, 480),
        }
    }
}

/// Axis-aligned box in room coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Occluder {
    /// Whether the open segment from `a` to `b` passes through the box.
    fn blocks(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        ray_hits_box(a, b, &self.min, &self.max)
    }
}

/// Slab test for the segment `a → b` against a box, ignoring hits at the
/// very ends so a point on the surface does not occlude itself.
fn ray_hits_box(a: &Vector3<f64>, b: &Vector3<f64>, min: &[f64; 3], max: &[f64; 3]) -> bool {
    let d = b - a;
    let (mut t0, mut t1): (f64, f64) = (1e-9, 1.0 - 1e-9);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if a[k] < min[k] || a[k] > max[k] {
                return false;
            }
            continue;
        }
        let mut lo = (min[k] - a[k]) / d[k];
        let mut hi = (max[k] - a[k]) / d[k];
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub cameras: CameraRing,
    /// Walkable floor area `[x_min, y_min]`–`[x_max, y_max]`, meters.
    pub room_min: [f64; 2],
    pub room_max: [f64; 2],
    pub person_heights_m: Vec<f64>,
    pub walk_speed_mps: f64,
    /// Persons never approach each other closer than this, meters.
    pub min_separation_m: f64,
    pub frame_rate_hz: f64,
    pub pixel_noise_px: f64,
    pub timestamp_jitter_ns: f64,
    pub dropout_prob: f64,
    /// Fraction of visible joints emitted with a confidence below 0.6.
    pub low_confidence_rate: f64,
    pub occluders: Vec<Occluder>,
    pub inter_person_occlusion: bool,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::ring8_2p()
    }
}

impl ScenarioConfig {
    /// Eight cameras on a 5 m ring, two people crossing the room for 180 s.
    pub fn ring8_2p() -> Self {
        Self {
            name: "ring8-2p".into(),
            cameras: CameraRing::default(),
            room_min: [-2.0, -2.0],
            room_max: [2.0, 2.0],
            person_heights_m: vec![1.70, 1.96],
            walk_speed_mps: 0.8,
            min_separation_m: 0.0,
            frame_rate_hz: 10.0,
            pixel_noise_px: 2.0,
            timestamp_jitter_ns: 2e6,
            dropout_prob: 0.02,
            low_confidence_rate: 0.02,
            occluders: Vec::new(),
            inter_person_occlusion: false,
            duration_s: 180.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let c = &self.cameras;
        if c.count < 2 {
            return Err(config_error("cameras.count", format!("need at least 2 cameras, got {}", c.count)));
        }
        if !(c.radius_m > 0.0) {
            return Err(config_error("cameras.radius_m", "must be positive"));
        }
        if !c.height_m.is_finite() || !c.target_height_m.is_finite() {
            return Err(config_error("cameras.height_m", "must be finite"));
        }
        c.intrinsics
            .validate()
            .map_err(|e| config_error("cameras.intrinsics", e.to_string()))?;
        for k in 0..2 {
            if !(self.room_min[k] < self.room_max[k]) {
                return Err(config_error("room_min", "room_min must be below room_max"));
            }
        }
        if self.person_heights_m.iter().any(|h| !(*h > 0.0 && *h < 3.0)) {
            return Err(config_error("person_heights_m", "heights must lie in (0, 3) m"));
        }
        if !(self.walk_speed_mps >= 0.0 && self.walk_speed_mps.is_finite()) {
            return Err(config_error("walk_speed_mps", "must be non-negative"));
        }
        if !(self.min_separation_m >= 0.0) {
            return Err(config_error("min_separation_m", "must be non-negative"));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(config_error("frame_rate_hz", "must be positive"));
        }
        if !(self.pixel_noise_px >= 0.0 && self.pixel_noise_px.is_finite()) {
            return Err(config_error("pixel_noise_px", "must be non-negative"));
        }
        if !(self.timestamp_jitter_ns >= 0.0 && self.timestamp_jitter_ns.is_finite()) {
            return Err(config_error("timestamp_jitter_ns", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(config_error("dropout_prob", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.low_confidence_rate) {
            return Err(config_error("low_confidence_rate", "must lie in [0, 1]"));
        }
        if self
            .occluders
            .iter()
            .any(|o| (0..3).any(|k| !(o.min[k] <= o.max[k])))
        {
            return Err(config_error("occluders", "box min must not exceed max"));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(config_error("duration_s", "must be non-negative"));
        }
        let span = (0..2)
            .map(|k| self.room_max[k] - self.room_min[k])
            .fold(f64::INFINITY, f64::min);
        if self.person_heights_m.len() > 1 && self.min_separation_m >= span {
            return Err(config_error("min_separation_m", "does not fit inside the room"));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.frame_rate_hz).round() as usize
    }

    fn frame_time_ns(&self, frame: usize) -> Timestamp {
        (frame as f64 * 1e9 / self.frame_rate_hz).round() as Timestamp
    }
}

/// Camera poses in the room frame (z up), before gauge normalization.
pub fn ring_poses(ring: &CameraRing) -> BTreeMap<SensorId, Pose3> {
    let target = Vector3::new(0.0, 0.0, ring.target_height_m);
    (0..ring.count)
        .map(|k| {
            let a = TAU * k as f64 / ring.count as f64;
            let eye = Vector3::new(ring.radius_m * a.cos(), ring.radius_m * a.sin(), ring.height_m);
            (k as SensorId, look_at(eye, target))
        })
        .collect()
}

/// Camera at `eye` looking at `target` with the image y axis pointing down
/// (world z up).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose3 {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    Pose3::from_matrix(&nalgebra::Matrix3::from_columns(&[x, y, z]), eye)
}

// (forward, left, up) as fractions of body height; COCO-17 order. The
// shoulder-to-hip drop is 0.30 and the shoulder width 0.18, matching the
// association defaults.
const TEMPLATE: [[f64; 3]; NUM_JOINTS] = [
    [0.07, 0.0, 0.965],
    [0.06, 0.03, 0.99],
    [0.06, -0.03, 0.99],
    [0.0, 0.07, 0.97],
    [0.0, -0.07, 0.97],
    [0.0, 0.09, 0.81],
    [0.0, -0.09, 0.81],
    [0.0, 0.11, 0.63],
    [0.0, -0.11, 0.63],
    [0.02, 0.11, 0.46],
    [0.02, -0.11, 0.46],
    [0.0, 0.055, 0.51],
    [0.0, -0.055, 0.51],
    [0.01, 0.055, 0.28],
    [0.01, -0.055, 0.28],
    [0.0, 0.055, 0.0],
    [0.0, -0.055, 0.0],
];

/// Stride length per full gait cycle, as a fraction of height.
const STRIDE_RATIO: f64 = 0.8;

/// Joint positions of a person with feet centered at `root`, facing `yaw`,
/// at gait phase `phase` (radians; 0 is a standing pose).
pub fn skeleton(root: Vector3<f64>, height: f64, yaw: f64, phase: f64) -> [Vector3<f64>; NUM_JOINTS] {
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let s = phase.sin();
    std::array::from_fn(|j| {
        let mut p = Vector3::from(TEMPLATE[j]);
        // left limbs (odd ids from 5 on) swing opposite to right limbs, and
        // arms opposite to legs
        let side = if j % 2 == 1 { 1.0 } else { -1.0 };
        match j {
            7 | 8 => p.x += 0.04 * side * s,
            9 | 10 => p.x += 0.10 * side * s,
            13 | 14 => p.x -= 0.06 * side * s,
            15 | 16 => {
                p.x -= 0.12 * side * s;
                p.z += 0.03 * (side * s).max(0.0);
            }
            _ => {}
        }
        root + rot * (p * height)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonState {
    /// Feet center in the room frame.
    pub root: Vector3<f64>,
    pub yaw: f64,
    pub phase: f64,
    /// Joint positions in the gauge-normalized world frame.
    pub joints: [Vector3<f64>; NUM_JOINTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    pub time_ns: Timestamp,
    pub persons: Vec<PersonState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Gauge-normalized camera poses; camera 0 is the identity.
    pub poses: BTreeMap<SensorId, Pose3>,
    pub intrinsics: BTreeMap<SensorId, CameraIntrinsics>,
    /// Maps gauge-normalized world coordinates to room coordinates.
    pub room_from_world: Pose3,
    pub heights: Vec<f64>,
    pub frames: Vec<FrameTruth>,
}

impl GroundTruth {
    pub fn rig_file(&self) -> RigFile {
        RigFile::from_parts(&self.poses, Some(&self.intrinsics), None)
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

struct Walker {
    pos: Vector2<f64>,
    heading: f64,
    waypoint: Vector2<f64>,
    travelled: f64,
}

fn random_point(rng: &mut impl Rng, min: &[f64; 2], max: &[f64; 2], margin: f64) -> Vector2<f64> {
    let pick = |rng: &mut dyn rand::RngCore, k: usize| {
        let (lo, hi) = (min[k] + margin, max[k] - margin);
        if lo < hi {
            rng.random_range(lo..hi)
        } else {
            0.5 * (min[k] + max[k])
        }
    };
    Vector2::new(pick(rng, 0), pick(rng, 1))
}

/// Simulates smoothed random-waypoint walks and places the skeletons.
pub fn generate_scene(cfg: &ScenarioConfig) -> Result<GroundTruth, SimulatorError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let room_poses = ring_poses(&cfg.cameras);
    let room_from_world = room_poses[&0];
    let world_from_room = room_from_world.inverse();
    let poses: BTreeMap<SensorId, Pose3> = room_poses
        .iter()
        .map(|(&s, p)| {
            let pose = if s == 0 {
                Pose3::identity()
            } else {
                world_from_room.compose(p)
            };
            (s, pose)
        })
        .collect();
    let intrinsics = poses.keys().map(|&s| (s, cfg.cameras.intrinsics)).collect();

    let margin = 0.3;
    let mut walkers: Vec<Walker> = Vec::with_capacity(cfg.person_heights_m.len());
    for _ in &cfg.person_heights_m {
        // rejection-sample a start that respects the separation constraint
        let mut pos = random_point(&mut rng, &cfg.room_min, &cfg.room_max, margin);
        for _ in 0..1000 {
            if walkers.iter().all(|w| (w.pos - pos).norm() >= cfg.min_separation_m) {
                break;
            }
            pos = random_point(&mut rng, &cfg.room_min, &cfg.room_max, 0.0);
        }
        walkers.push(Walker {
            pos,
            heading: rng.random_range(-PI..PI),
            waypoint: random_point(&mut rng, &cfg.room_min, &cfg.room_max, margin),
            travelled: 0.0,
        });
    }

    let dt = 1.0 / cfg.frame_rate_hz;
    let max_turn = PI / 2.0 * dt;
    let mut frames = Vec::with_capacity(cfg.num_frames());
    for index in 0..cfg.num_frames() {
        if index > 0 {
            for i in 0..walkers.len() {
                let w = &walkers[i];
                let to_wp = w.waypoint - w.pos;
                let mut waypoint = w.waypoint;
                if to_wp.norm() < 0.3 {
                    waypoint = random_point(&mut rng, &cfg.room_min, &cfg.room_max, margin);
                }
                let to_wp = waypoint - w.pos;
                let turn = wrap_angle(to_wp.y.atan2(to_wp.x) - w.heading).clamp(-max_turn, max_turn);
                let heading = wrap_angle(w.heading + turn);
                let step = Vector2::new(heading.cos(), heading.sin()) * cfg.walk_speed_mps * dt;
                let mut next = w.pos + step;
                for k in 0..2 {
                    next[k] = next[k].clamp(cfg.room_min[k], cfg.room_max[k]);
                }
                let blocked = walkers.iter().enumerate().any(|(j, o)| {
                    let (old, new) = ((o.pos - w.pos).norm(), (o.pos - next).norm());
                    j != i && new < cfg.min_separation_m && new <= old
                });
                let w = &mut walkers[i];
                w.heading = heading;
                if blocked {
                    w.waypoint = random_point(&mut rng, &cfg.room_min, &cfg.room_max, margin);
                } else {
                    w.travelled += (next - w.pos).norm();
                    w.pos = next;
                    w.waypoint = waypoint;
                }
            }
        }
        let persons = walkers
            .iter()
            .zip(&cfg.person_heights_m)
            .map(|(w, &h)| {
                let root = Vector3::new(w.pos.x, w.pos.y, 0.0);
                let phase = TAU * w.travelled / (STRIDE_RATIO * h);
                let joints = skeleton(root, h, w.heading, phase).map(|p| world_from_room.transform_point(&p));
                PersonState {
                    root,
                    yaw: w.heading,
                    phase,
                    joints,
                }
            })
            .collect();
        frames.push(FrameTruth {
            index,
            time_ns: cfg.frame_time_ns(index),
            persons,
        });
    }

    Ok(GroundTruth {
        poses,
        intrinsics,
        room_from_world,
        heights: cfg.person_heights_m.clone(),
        frames,
    })
}

/// Rendered detection streams plus the hidden person identities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rendered {
    /// Per sensor, time-ordered.
    pub streams: BTreeMap<SensorId, Vec<DetectionMessage>>,
    /// `(sensor, timestamp, person_index)` → index of the true person.
    pub identities: BTreeMap<(SensorId, Timestamp, u32), usize>,
}

impl Rendered {
    pub fn identity(&self, pd: &PersonDetection, timestamp: Timestamp) -> Option<usize> {
        self.identities
            .get(&(pd.sensor_id, timestamp, pd.person_index))
            .copied()
    }
}

/// Projects every visible joint into every camera and adds the configured
/// noise, dropout and timestamp jitter.
pub fn render_detections(gt: &GroundTruth, cfg: &ScenarioConfig) -> Rendered {
    let sigma = cfg.pixel_noise_px;
    let pixel_noise = Normal::new(0.0, sigma).expect("sigma validated as non-negative");
    let jitter = Normal::new(0.0, cfg.timestamp_jitter_ns).expect("jitter validated as non-negative");
    let variance = (sigma * sigma).max(MIN_EMITTED_VARIANCE);
    let cov = Matrix2::identity() * variance;

    let mut out = Rendered::default();
    for (&sensor, pose) in &gt.poses {
        let intr = &gt.intrinsics[&sensor];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000_u64 + sensor as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let center_room = gt.room_from_world.transform_point(&pose.translation);
        let mut stream = Vec::with_capacity(gt.frames.len());
        let mut last_ts = Timestamp::MIN;
        for frame in &gt.frames {
            let mut persons: Vec<(f64, usize, BTreeMap<JointId, Detection>)> = Vec::new();
            for (pi, person) in frame.persons.iter().enumerate() {
                let mut joints = BTreeMap::new();
                for (j, xw) in person.joints.iter().enumerate() {
                    // draw every random number unconditionally so that
                    // visibility changes never shift the stream
                    let n = Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
                    let drop = rng.random::<f64>() < cfg.dropout_prob;
                    let low = rng.random::<f64>() < cfg.low_confidence_rate;
                    let conf_u: f64 = rng.random();
                    let Ok(px) = project(intr, pose, xw) else {
                        continue;
                    };
                    if !intr.contains(&px, 0.0) || drop {
                        continue;
                    }
                    let xr = gt.room_from_world.transform_point(xw);
                    if cfg.occluders.iter().any(|o| o.blocks(&center_room, &xr)) {
                        continue;
                    }
                    if cfg.inter_person_occlusion
                        && frame.persons.iter().enumerate().any(|(oi, other)| {
                            oi != pi && body_blocks(other, gt.heights[oi], &center_room, &xr)
                        })
                    {
                        continue;
                    }
                    let confidence = if low { 0.6 * conf_u } else { 0.6 + 0.4 * conf_u };
                    let pixel = if sigma > 0.0 { px + n } else { px };
                    joints.insert(j as JointId, Detection::new(j as JointId, pixel, confidence, cov));
                }
                if !joints.is_empty() {
                    let mean_u = joints.values().map(|d| d.pixel.x).sum::<f64>() / joints.len() as f64;
                    persons.push((mean_u, pi, joints));
                }
            }
            // enumerate left to right so the index carries no identity
            persons.sort_by(|a, b| a.0.total_cmp(&b.0));
            let j: f64 = jitter.sample(&mut rng);
            let ts = (frame.time_ns + j.round() as Timestamp).max(last_ts + 1);
            last_ts = ts;
            let persons = persons
                .into_iter()
                .enumerate()
                .map(|(k, (_, pi, joints))| {
                    out.identities.insert((sensor, ts, k as u32), pi);
                    PersonDetection {
                        sensor_id: sensor,
                        person_index: k as u32,
                        joints,
                    }
                })
                .collect();
            stream.push(DetectionMessage {
                sensor_id: sensor,
                timestamp_ns: ts,
                persons,
            });
        }
        out.streams.insert(sensor, stream);
    }
    out
}

/// Approximates a body as an upright box of 0.24·H footprint.
fn body_blocks(person: &PersonState, height: f64, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
    let r = 0.12 * height;
    let min = [person.root.x - r, person.root.y - r, 0.0];
    let max = [person.root.x + r, person.root.y + r, height];
    ray_hits_box(from, to, &min, &max)
}

/// Displaces every non-gauge camera by exactly `pos_err` meters in a random
/// direction and rotates it by exactly `rot_err_deg` about a random axis.
pub fn perturb_calibration(
    poses: &BTreeMap<SensorId, Pose3>,
    gauge: SensorId,
    pos_err: f64,
    rot_err_deg: f64,
    seed: u64,
) -> BTreeMap<SensorId, Pose3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-6 {
            break v.normalize();
        }
    };
    poses
        .iter()
        .map(|(&s, p)| {
            let dir = unit(&mut rng);
            let axis = unit(&mut rng);
            if s == gauge {
                return (s, *p);
            }
            let dq = UnitQuaternion::from_scaled_axis(axis * rot_err_deg.to_radians());
            (s, Pose3::new(dq * p.rotation, p.translation + dir * pos_err))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    frame: usize,
    person: usize,
    joint: usize,
    x: f64,
    y: f64,
    z: f64,
}

/// Writes `sensor_<id>.jsonl` per camera, `ground_truth.json` and
/// `trajectories.csv` (gauge-normalized world coordinates).
pub fn write_outputs(dir: &Path, gt: &GroundTruth, rendered: &Rendered) -> Result<(), SimulatorError> {
    fs::create_dir_all(dir)?;
    for (sensor, stream) in &rendered.streams {
        write_detection_stream(&dir.join(stream_file_name(*sensor)), stream)?;
    }
    gt.rig_file()
        .write(&dir.join("ground_truth.json"))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let file = BufWriter::new(fs::File::create(dir.join("trajectories.csv"))?);
    let mut w = csv::Writer::from_writer(file);
    for frame in &gt.frames {
        for (person, state) in frame.persons.iter().enumerate() {
            for (joint, p) in state.joints.iter().enumerate() {
                w.serialize(TrajectoryRow {
                    frame: frame.index,
                    person,
                    joint,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                })?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?
        .flush()?;
    Ok(())
}

pub fn stream_file_name(sensor: SensorId) -> String {
    format!("sensor_{sensor:02}.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{associate, AssociationConfig, HypothesisIds};
    use crate::geometry::{rotation_angle, triangulate, Observation};
    use crate::sensors::synchronize;

    fn short(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            duration_s: 10.0,
            seed,
            ..ScenarioConfig::ring8_2p()
        }
    }

    fn clean(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            pixel_noise_px: 0.0,
            timestamp_jitter_ns: 0.0,
            dropout_prob: 0.0,
            low_confidence_rate: 0.0,
            ..short(seed)
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = short(3);
        let a = generate_scene(&cfg).unwrap();
        assert_eq!(a, generate_scene(&cfg).unwrap());
        assert_eq!(render_detections(&a, &cfg), render_detections(&a, &cfg));
        let b = generate_scene(&short(4)).unwrap();
        assert_ne!(a.frames, b.frames);
    }

    #[test]
    fn ground_truth_is_gauge_normalized() {
        let gt = generate_scene(&short(1)).unwrap();
        assert_eq!(gt.poses[&0], Pose3::identity());
        assert_eq!(gt.poses.len(), 8);
        // room-frame camera centers lie on the configured ring
        for p in gt.poses.values() {
            let c = gt.room_from_world.transform_point(&p.translation);
            assert!((c.xy().norm() - 5.0).abs() < 1e-9);
            assert!((c.z - 2.6).abs() < 1e-9);
        }
    }

    #[test]
    fn standing_skeleton_matches_height() {
        for h in [1.5, 1.7, 2.0] {
            let s = skeleton(Vector3::zeros(), h, 0.7, 0.0);
            let zs: Vec<f64> = s.iter().map(|p| p.z).collect();
            let extent = zs.iter().cloned().fold(f64::MIN, f64::max) - zs.iter().cloned().fold(f64::MAX, f64::min);
            assert!((extent - h).abs() <= 0.05 * h / 2.0, "{h}: {extent}");
            assert!((s[5].z - s[11].z - 0.30 * h).abs() < 1e-12);
            assert!(((s[5] - s[6]).norm() - 0.18 * h).abs() < 1e-12);
        }
    }

    #[test]
    fn walks_stay_inside_the_room() {
        let cfg = ScenarioConfig {
            duration_s: 120.0,
            walk_speed_mps: 1.5,
            ..short(5)
        };
        let gt = generate_scene(&cfg).unwrap();
        let mut moved = 0.0;
        for w in gt.frames.windows(2) {
            for (a, b) in w[0].persons.iter().zip(&w[1].persons) {
                moved += (b.root - a.root).norm();
            }
        }
        assert!(moved > 50.0, "people barely moved: {moved}");
        for f in &gt.frames {
            for p in &f.persons {
                assert!((0..2).all(|k| p.root[k] >= cfg.room_min[k] && p.root[k] <= cfg.room_max[k]));
            }
        }
    }

    #[test]
    fn separation_is_respected() {
        let cfg = ScenarioConfig {
            min_separation_m: 1.0,
            duration_s: 120.0,
            ..short(6)
        };
        let gt = generate_scene(&cfg).unwrap();
        for f in &gt.frames {
            assert!((f.persons[0].root - f.persons[1].root).norm() >= 1.0);
        }
    }

    #[test]
    fn noise_free_render_matches_projection() {
        let cfg = clean(7);
        let gt = generate_scene(&cfg).unwrap();
        let r = render_detections(&gt, &cfg);
        let mut checked = 0;
        for (s, stream) in &r.streams {
            for (msg, frame) in stream.iter().zip(&gt.frames) {
                assert_eq!(msg.timestamp_ns, frame.time_ns);
                for pd in &msg.persons {
                    let who = r.identity(pd, msg.timestamp_ns).unwrap();
                    for d in pd.joints.values() {
                        let exact = project(&gt.intrinsics[s], &gt.poses[s], &frame.persons[who].joints[d.joint_id as usize]).unwrap();
                        assert!((d.pixel - exact).norm() < 1e-12);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn pixel_noise_has_configured_std() {
        // Monte-Carlo: pooled per-axis std of (detection − exact) over ≥ 10⁴
        // samples, and a 1% chi-square goodness-of-fit on the squared radii
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = ScenarioConfig {
            dropout_prob: 0.0,
            low_confidence_rate: 0.0,
            ..short(8)
        };
        let gt = generate_scene(&cfg).unwrap();
        let r = render_detections(&gt, &cfg);
        let mut residuals = Vec::new();
        for (s, stream) in &r.streams {
            for (msg, frame) in stream.iter().zip(&gt.frames) {
                for pd in &msg.persons {
                    let who = r.identity(pd, msg.timestamp_ns).unwrap();
                    for d in pd.joints.values() {
                        let exact = project(&gt.intrinsics[s], &gt.poses[s], &frame.persons[who].joints[d.joint_id as usize]).unwrap();
                        residuals.push(d.pixel - exact);
                    }
                }
            }
        }
        assert!(residuals.len() >= 10_000);
        let n = (2 * residuals.len()) as f64;
        let std = (residuals.iter().map(|v| v.norm_squared()).sum::<f64>() / n).sqrt();
        assert!((std - 2.0).abs() < 0.1, "{std}");
        // squared radius / σ² ~ χ²(2); compare ten equiprobable bins
        let chi2 = ChiSquared::new(2.0).unwrap();
        let bins = 10;
        let mut counts = vec![0usize; bins];
        for v in &residuals {
            let u = chi2.cdf(v.norm_squared() / 4.0);
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let expected = residuals.len() as f64 / bins as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "{stat} >= {crit}");
    }

    #[test]
    fn occluder_hides_person_from_one_camera() {
        // a tall wall right in front of camera 2 (room frame)
        let mut cfg = clean(9);
        let cam2 = ring_poses(&cfg.cameras)[&2].translation;
        let inward = -cam2.xy().normalize() * 0.4;
        let c = cam2.xy() + inward;
        cfg.occluders = vec![Occluder {
            min: [c.x - 1.5, c.y - 0.05, -1.0],
            max: [c.x + 1.5, c.y + 0.05, 4.0],
        }];
        let gt = generate_scene(&cfg).unwrap();
        let r = render_detections(&gt, &cfg);
        assert!(r.streams[&2].iter().all(|m| m.persons.is_empty()));
        assert!(r.streams[&6].iter().any(|m| !m.persons.is_empty()));
    }

    #[test]
    fn perturbation_has_exact_magnitudes() {
        let gt = generate_scene(&short(10)).unwrap();
        assert_eq!(perturb_calibration(&gt.poses, 0, 0.0, 0.0, 1), gt.poses);
        let p = perturb_calibration(&gt.poses, 0, 0.25, 10.0, 2);
        assert_eq!(p[&0], gt.poses[&0]);
        for s in 1..8 {
            let dt = (p[&s].translation - gt.poses[&s].translation).norm();
            let da = rotation_angle(&p[&s].rotation_matrix(), &gt.poses[&s].rotation_matrix())
                .unwrap()
                .to_degrees();
            assert!((dt - 0.25).abs() < 1e-12);
            assert!((da - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clean_renders_triangulate_to_truth() {
        // forward consistency: association plus triangulation under the true
        // calibration recovers the joints
        let cfg = ScenarioConfig {
            min_separation_m: 1.0,
            ..clean(11)
        };
        let gt = generate_scene(&cfg).unwrap();
        let r = render_detections(&gt, &cfg);
        let out = synchronize(r.streams.values().cloned().collect(), 33_000_000);
        let mut ids = HypothesisIds::new();
        let mut worst: f64 = 0.0;
        for (fs, frame) in out.framesets.iter().zip(&gt.frames) {
            let persons: Vec<_> = fs.persons().cloned().collect();
            let hyps = associate(&persons, &gt.poses, &gt.intrinsics, &AssociationConfig::default(), fs.reference_time, &mut ids);
            for h in &hyps {
                let who: Vec<usize> = h
                    .views
                    .values()
                    .map(|pd| r.identity(pd, fs.entries[&pd.sensor_id].timestamp_ns).unwrap())
                    .collect();
                assert!(who.iter().all(|w| *w == who[0]));
                for j in 0..NUM_JOINTS as JointId {
                    let obs: Vec<_> = h
                        .views
                        .iter()
                        .filter_map(|(s, pd)| {
                            Some(Observation {
                                pose: &gt.poses[s],
                                intrinsics: &gt.intrinsics[s],
                                pixel: pd.joints.get(&j)?.pixel,
                            })
                        })
                        .collect();
                    if obs.len() >= 2 {
                        let x = triangulate(&obs).unwrap();
                        worst = worst.max((x - frame.persons[who[0]].joints[j as usize]).norm());
                    }
                }
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn invalid_config_names_the_field() {
        let mut cfg = ScenarioConfig::ring8_2p();
        cfg.cameras.count = 1;
        match generate_scene(&cfg) {
            Err(SimulatorError::Config { field, .. }) => assert_eq!(field, "cameras.count"),
            other => panic!("{other:?}"),
        }
        let cfg = ScenarioConfig {
            pixel_noise_px: -1.0,
            ..ScenarioConfig::ring8_2p()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("pixel_noise_px"));
    }

    #[test]
    fn occluder_ray_test() {
        let o = Occluder {
            min: [-1.0, -1.0, -1.0],
            max: [1.0, 1.0, 1.0],
        };
        let a = Vector3::new(-3.0, 0.0, 0.0);
        assert!(o.blocks(&a, &Vector3::new(3.0, 0.0, 0.0)));
        assert!(!o.blocks(&a, &Vector3::new(-2.0, 0.0, 0.0)));
        assert!(!o.blocks(&a, &Vector3::new(3.0, 4.0, 0.0)));
        // a point on the surface is not hidden by its own box
        assert!(!o.blocks(&a, &Vector3::new(-1.0, 0.0, 0.0)));
    }
}
