//! Small synthetic rigs and skeletons shared by unit tests.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::association::PersonHypothesis;
use crate::geometry::{project, CameraIntrinsics, Pose3};
use crate::sensors::{Detection, JointId, PersonDetection, SensorId, TORSO_JOINTS};

pub struct Rig {
    pub poses: BTreeMap<SensorId, Pose3>,
    pub intrinsics: BTreeMap<SensorId, CameraIntrinsics>,
}

/// Camera at `eye` looking at `target`; world z is up, image y points down.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose3 {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    Pose3::from_matrix(&Matrix3::from_columns(&[x, y, z]), eye)
}

/// `n` cameras evenly spaced on a circle, aimed at (0, 0, 1). Camera 0 sits
/// on the +x axis.
pub fn ring_rig(n: usize, radius: f64, height: f64) -> Rig {
    let intr = CameraIntrinsics::pinhole(450.0, 450.0, 320.0, 240.0, 640, 480);
    let mut poses = BTreeMap::new();
    let mut intrinsics = BTreeMap::new();
    for k in 0..n {
        let a = 2.0 * PI * k as f64 / n as f64;
        let eye = Vector3::new(radius * a.cos(), radius * a.sin(), height);
        poses.insert(k as SensorId, look_at(eye, Vector3::new(0.0, 0.0, 1.0)));
        intrinsics.insert(k as SensorId, intr);
    }
    Rig { poses, intrinsics }
}

/// Standing COCO-17 skeleton of the given height, feet at `root`.
pub fn skeleton_points(root: Vector3<f64>, height: f64, yaw: f64) -> BTreeMap<JointId, Vector3<f64>> {
    // (forward, left, up) as fractions of body height
    const TEMPLATE: [[f64; 3]; 17] = [
        [0.06, 0.0, 0.94],
        [0.05, 0.03, 0.96],
        [0.05, -0.03, 0.96],
        [0.0, 0.06, 0.95],
        [0.0, -0.06, 0.95],
        [0.0, 0.09, 0.82],
        [0.0, -0.09, 0.82],
        [0.02, 0.10, 0.63],
        [0.02, -0.10, 0.63],
        [0.04, 0.10, 0.46],
        [0.04, -0.10, 0.46],
        [0.0, 0.055, 0.52],
        [0.0, -0.055, 0.52],
        [0.02, 0.055, 0.285],
        [0.02, -0.055, 0.285],
        [0.0, 0.055, 0.04],
        [0.0, -0.055, 0.04],
    ];
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    TEMPLATE
        .iter()
        .enumerate()
        .map(|(j, p)| (j as JointId, root + rot * (Vector3::from(*p) * height)))
        .collect()
}

/// Renders `points` into every camera of `rig` that sees all of them in front
/// and forms a hypothesis with the true torso centroid as center of mass.
pub fn hypothesis_from_points(
    id: u64,
    rig: &Rig,
    points: &BTreeMap<JointId, Vector3<f64>>,
    sigma_px: f64,
    seed: u64,
) -> PersonHypothesis {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9e37_79b9));
    let noise = Normal::new(0.0, sigma_px.max(1e-300)).unwrap();
    let cov = Matrix2::identity() * sigma_px.powi(2);
    let mut views = BTreeMap::new();
    for (&s, pose) in &rig.poses {
        let intr = &rig.intrinsics[&s];
        let mut joints = BTreeMap::new();
        for (&j, p) in points {
            let Ok(px) = project(intr, pose, p) else {
                continue;
            };
            let px = if sigma_px > 0.0 {
                px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                px
            };
            joints.insert(j, Detection::new(j, px, 0.9, cov));
        }
        if joints.len() == points.len() {
            views.insert(
                s,
                PersonDetection {
                    sensor_id: s,
                    person_index: 0,
                    joints,
                },
            );
        }
    }
    let torso: Vec<_> = TORSO_JOINTS.iter().filter_map(|j| points.get(j)).collect();
    let center_of_mass = if torso.is_empty() {
        Vector3::zeros()
    } else {
        torso.iter().copied().sum::<Vector3<f64>>() / torso.len() as f64
    };
    PersonHypothesis {
        id,
        created_at: id as i64,
        views,
        segments: BTreeMap::new(),
        center_of_mass,
    }
}
