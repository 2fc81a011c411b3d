//! Cross-view person association.
//!
//! Every torso-complete detection is lifted to a bundle of 3D line segments:
//! each joint's viewing ray clipped to the depth interval implied by the
//! apparent torso size and the configured person-height range. Detections
//! whose torso segments nearly intersect across views are grouped greedily,
//! nearest persons first.

use std::collections::BTreeMap;

use log::trace;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{segment_distance, CameraIntrinsics, Pose3, Segment3};
use crate::sensors::{JointId, PersonDetection, SensorId, Timestamp, TORSO_JOINTS};

/// Torsos spanning fewer pixels than this carry no usable depth cue.
const MIN_TORSO_PX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssociationError {
    #[error("torso spans only {d_px:.3} px")]
    DegenerateTorso { d_px: f64 },
    #[error("person is missing torso joints")]
    MissingTorso,
    #[error("hypothesis has no torso segments")]
    NoTorsoSegments,
    #[error("invalid association config: {0}")]
    InvalidConfig(String),
}

/// Camera-frame depth range, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthInterval {
    pub z_min: f64,
    pub z_max: f64,
}

impl DepthInterval {
    pub fn mid(&self) -> f64 {
        0.5 * (self.z_min + self.z_max)
    }

    pub fn contains(&self, z: f64) -> bool {
        self.z_min <= z && z <= self.z_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    pub person_height_min: f64,
    pub person_height_max: f64,
    /// Shoulder-to-hip distance as a fraction of body height.
    pub torso_height_ratio: f64,
    /// Shoulder width as a fraction of body height.
    pub torso_width_ratio: f64,
    /// Smallest admitted ratio of apparent to true torso height (tilt bound).
    pub foreshortening_floor: f64,
    /// Maximum mean torso segment distance for a match, meters.
    pub match_threshold: f64,
    /// Standard deviations of detection noise by which the apparent torso
    /// size is widened before bounding the depth.
    pub size_noise_sigmas: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            person_height_min: 1.5,
            person_height_max: 2.0,
            torso_height_ratio: 0.30,
            torso_width_ratio: 0.18,
            foreshortening_floor: 0.5,
            match_threshold: 0.35,
            size_noise_sigmas: 3.0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), AssociationError> {
        let bad = |m: &str| Err(AssociationError::InvalidConfig(m.into()));
        if !(self.person_height_min > 0.0 && self.person_height_min <= self.person_height_max) {
            return bad("need 0 < person_height_min <= person_height_max");
        }
        if !(self.foreshortening_floor > 0.0 && self.foreshortening_floor <= 1.0) {
            return bad("foreshortening_floor must lie in (0, 1]");
        }
        if !(self.torso_height_ratio > 0.0 && self.torso_width_ratio >= 0.0) {
            return bad("torso ratios must be positive");
        }
        if !(self.match_threshold > 0.0) {
            return bad("match_threshold must be positive");
        }
        if !(self.size_noise_sigmas >= 0.0) {
            return bad("size_noise_sigmas must be non-negative");
        }
        Ok(())
    }

    fn torso_extent_min(&self) -> f64 {
        self.torso_height_ratio * self.person_height_min
    }

    fn torso_extent_max(&self) -> f64 {
        let h = self.torso_height_ratio * self.person_height_max;
        let w = self.torso_width_ratio * self.person_height_max;
        h.hypot(w)
    }
}

/// One person at one instant, seen from at least two sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonHypothesis {
    pub id: u64,
    pub created_at: Timestamp,
    pub views: BTreeMap<SensorId, PersonDetection>,
    pub segments: BTreeMap<(SensorId, JointId), Segment3>,
    pub center_of_mass: Vector3<f64>,
}

impl PersonHypothesis {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }
}

/// Bounds the camera-frame depth of a detected person from the apparent
/// torso size, assuming worst-case torso orientation. The size is the largest
/// pairwise torso distance in pixels, widened by the detection noise along
/// that pair.
pub fn estimate_depth_interval(
    pd: &PersonDetection,
    intr: &CameraIntrinsics,
    cfg: &AssociationConfig,
) -> Result<DepthInterval, AssociationError> {
    let dets = TORSO_JOINTS.map(|j| pd.joints.get(&j));
    if dets.iter().any(Option::is_none) {
        return Err(AssociationError::MissingTorso);
    }
    let dets = dets.map(Option::unwrap);
    let mut widest = (0.0, 0.0);
    for i in 0..4 {
        for j in i + 1..4 {
            let diff = dets[i].pixel - dets[j].pixel;
            let d = diff.norm();
            if d > widest.0 {
                let u = diff / d;
                let var = (u.transpose() * (dets[i].cov + dets[j].cov) * u)[(0, 0)];
                widest = (d, var.max(0.0).sqrt());
            }
        }
    }
    let (d_px, sigma) = widest;
    if !(d_px >= MIN_TORSO_PX) {
        return Err(AssociationError::DegenerateTorso { d_px });
    }
    let margin = cfg.size_noise_sigmas * sigma;
    let f = intr.mean_focal();
    Ok(DepthInterval {
        z_min: f * cfg.torso_extent_min() * cfg.foreshortening_floor / (d_px + margin),
        z_max: f * cfg.torso_extent_max() / (d_px - margin).max(MIN_TORSO_PX),
    })
}

/// Viewing rays of every joint, clipped to the camera-frame depth interval.
pub fn person_segments(
    pd: &PersonDetection,
    interval: &DepthInterval,
    cam_pose: &Pose3,
    intr: &CameraIntrinsics,
) -> BTreeMap<JointId, Segment3> {
    pd.joints
        .iter()
        .map(|(&j, det)| {
            let n = intr.normalize(&det.pixel);
            let dir = Vector3::new(n.x, n.y, 1.0);
            let a = cam_pose.transform_point(&(dir * interval.z_min));
            let b = cam_pose.transform_point(&(dir * interval.z_max));
            (j, Segment3::new(a, b))
        })
        .collect()
}

/// Mean of the torso segment midpoints.
pub fn center_of_mass(h: &PersonHypothesis) -> Result<Vector3<f64>, AssociationError> {
    torso_centroid(&h.segments)
}

fn torso_centroid(
    segments: &BTreeMap<(SensorId, JointId), Segment3>,
) -> Result<Vector3<f64>, AssociationError> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for ((_, j), seg) in segments {
        if TORSO_JOINTS.contains(j) {
            sum += seg.midpoint();
            n += 1;
        }
    }
    if n == 0 {
        return Err(AssociationError::NoTorsoSegments);
    }
    Ok(sum / n as f64)
}

/// Issues hypothesis ids; one counter is shared by a whole pipeline run.
#[derive(Debug, Default, Clone)]
pub struct HypothesisIds(u64);

impl HypothesisIds {
    pub fn new() -> Self {
        Self(0)
    }

    fn next(&mut self) -> u64 {
        let id = self.0;
        self.0 += 1;
        id
    }
}

struct Candidate<'a> {
    person: &'a PersonDetection,
    depth: f64,
    torso: [Segment3; 4],
    all: BTreeMap<JointId, Segment3>,
}

struct Group<'a> {
    members: Vec<&'a Candidate<'a>>,
}

/// Mean torso-segment distance between two views, or `None` if any pair is
/// degenerate.
fn view_distance(a: &Candidate<'_>, b: &Candidate<'_>) -> Option<f64> {
    let mut sum = 0.0;
    for (sa, sb) in a.torso.iter().zip(&b.torso) {
        sum += segment_distance(sa, sb).ok()?;
    }
    Some(sum / 4.0)
}

/// Greedy cross-view grouping of torso-complete person detections.
///
/// Persons whose sensor lacks a pose or intrinsics, or whose torso is too
/// small to bound the depth, are skipped. Only hypotheses observed by at
/// least two sensors are returned.
pub fn associate(
    persons: &[PersonDetection],
    poses: &BTreeMap<SensorId, Pose3>,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
    cfg: &AssociationConfig,
    created_at: Timestamp,
    ids: &mut HypothesisIds,
) -> Vec<PersonHypothesis> {
    associate_ordered(persons, poses, intrinsics, cfg, created_at, ids).0
}

fn associate_ordered(
    persons: &[PersonDetection],
    poses: &BTreeMap<SensorId, Pose3>,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
    cfg: &AssociationConfig,
    created_at: Timestamp,
    ids: &mut HypothesisIds,
) -> (Vec<PersonHypothesis>, Vec<f64>) {
    let mut candidates: Vec<Candidate<'_>> = Vec::with_capacity(persons.len());
    for pd in persons {
        let (Some(pose), Some(intr)) = (poses.get(&pd.sensor_id), intrinsics.get(&pd.sensor_id))
        else {
            continue;
        };
        let interval = match estimate_depth_interval(pd, intr, cfg) {
            Ok(iv) => iv,
            Err(e) => {
                trace!("sensor {} person {}: {e}", pd.sensor_id, pd.person_index);
                continue;
            }
        };
        let all = person_segments(pd, &interval, pose, intr);
        let torso = TORSO_JOINTS.map(|j| all[&j]);
        candidates.push(Candidate {
            person: pd,
            depth: interval.mid(),
            torso,
            all,
        });
    }
    candidates.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.person.sensor_id.cmp(&b.person.sensor_id))
            .then(a.person.person_index.cmp(&b.person.person_index))
    });

    let mut groups: Vec<Group<'_>> = Vec::new();
    let mut order = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        order.push(cand.depth);
        let mut best: Option<(usize, f64)> = None;
        for (gi, group) in groups.iter().enumerate() {
            if group
                .members
                .iter()
                .any(|m| m.person.sensor_id == cand.person.sensor_id)
            {
                continue;
            }
            // every member must individually agree, which keeps all
            // pairwise distances within a hypothesis below the threshold
            let mut total = 0.0;
            let mut ok = true;
            for m in &group.members {
                match view_distance(cand, m) {
                    Some(d) if d < cfg.match_threshold => total += d,
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let cost = total / group.members.len() as f64;
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((gi, cost));
            }
        }
        match best {
            Some((gi, _)) => groups[gi].members.push(cand),
            None => groups.push(Group {
                members: vec![cand],
            }),
        }
    }

    let hypotheses = groups
        .into_iter()
        .filter(|g| g.members.len() >= 2)
        .map(|g| {
            let mut views = BTreeMap::new();
            let mut segments = BTreeMap::new();
            for m in g.members {
                let s = m.person.sensor_id;
                views.insert(s, m.person.clone());
                for (&j, seg) in &m.all {
                    segments.insert((s, j), *seg);
                }
            }
            let center_of_mass =
                torso_centroid(&segments).expect("members are torso-complete");
            PersonHypothesis {
                id: ids.next(),
                created_at,
                views,
                segments,
                center_of_mass,
            }
        })
        .collect();
    (hypotheses, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, se3_exp, Tangent6};
    use crate::sensors::{Detection, NUM_JOINTS};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    /// Camera at `eye` looking at `target`, image y pointing down.
    fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose3 {
        let z = (target - eye).normalize();
        let x = z.cross(&Vector3::z()).normalize();
        let y = z.cross(&x);
        Pose3::from_matrix(&Matrix3::from_columns(&[x, y, z]), eye)
    }

    /// Simple upright skeleton: torso corners plus head and ankles, world z up.
    fn skeleton(root: Vector3<f64>, height: f64, yaw: f64) -> BTreeMap<JointId, Vector3<f64>> {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        let local: [(JointId, [f64; 3]); 7] = [
            (0, [0.05, 0.0, 0.97]),
            (5, [0.0, 0.09, 0.82]),
            (6, [0.0, -0.09, 0.82]),
            (11, [0.0, 0.09, 0.52]),
            (12, [0.0, -0.09, 0.52]),
            (15, [0.0, 0.055, 0.0]),
            (16, [0.0, -0.055, 0.0]),
        ];
        local
            .iter()
            .map(|(j, p)| (*j, root + rot * (Vector3::from(*p) * height)))
            .collect()
    }

    fn render(
        sensor: SensorId,
        index: u32,
        pose: &Pose3,
        points: &BTreeMap<JointId, Vector3<f64>>,
    ) -> PersonDetection {
        let joints = points
            .iter()
            .map(|(&j, p)| {
                let px = project(&intr(), pose, p).unwrap();
                (j, Detection::new(j, px, 0.9, Matrix2::identity()))
            })
            .collect();
        PersonDetection {
            sensor_id: sensor,
            person_index: index,
            joints,
        }
    }

    fn torso_only(pixels: [Vector2<f64>; 4]) -> PersonDetection {
        PersonDetection {
            sensor_id: 0,
            person_index: 0,
            joints: TORSO_JOINTS
                .iter()
                .zip(pixels)
                .map(|(&j, p)| (j, Detection::new(j, p, 1.0, Matrix2::identity())))
                .collect(),
        }
    }

    fn ring(n: usize, radius: f64, height: f64) -> BTreeMap<SensorId, Pose3> {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                let eye = Vector3::new(radius * a.cos(), radius * a.sin(), height);
                (k as SensorId, look_at(eye, Vector3::new(0.0, 0.0, 1.0)))
            })
            .collect()
    }

    #[test]
    fn interval_contains_true_depth_for_random_torsos() {
        // forward model: a rigid torso rectangle of a person within the
        // configured height range, tilted at most 55° out of the image plane
        let cfg = AssociationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let h: f64 = rng.random_range(1.5..1.9);
            let z: f64 = rng.random_range(2.0..8.0);
            let corners = [
                Vector3::new(0.09 * h, -0.15 * h, 0.0),
                Vector3::new(-0.09 * h, -0.15 * h, 0.0),
                Vector3::new(0.09 * h, 0.15 * h, 0.0),
                Vector3::new(-0.09 * h, 0.15 * h, 0.0),
            ];
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), rng.random_range(-PI..PI));
            let tilt = UnitQuaternion::from_axis_angle(
                &Vector3::x_axis(),
                rng.random_range(-55f64..55.0).to_radians(),
            );
            let roll = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random_range(-PI..PI));
            let rot = roll * tilt * yaw;
            let off = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 1.0) * z;
            let pixels = corners.map(|c| project(&intr(), &Pose3::identity(), &(off + rot * c)).unwrap());
            let iv = estimate_depth_interval(&torso_only(pixels), &intr(), &cfg).unwrap();
            assert!(iv.contains(off.z), "z = {} not in {:?}", off.z, iv);
        }
    }

    #[test]
    fn fronto_parallel_reference_torso() {
        // 0.51 m tall, 0.306 m wide torso at 4 m
        let f = 500.0;
        let (hh, hw) = (0.255 * f / 4.0, 0.153 * f / 4.0);
        let c = Vector2::new(320.0, 240.0);
        let px = [
            c + Vector2::new(hw, -hh),
            c + Vector2::new(-hw, -hh),
            c + Vector2::new(hw, hh),
            c + Vector2::new(-hw, hh),
        ];
        let iv = estimate_depth_interval(&torso_only(px), &intr(), &AssociationConfig::default())
            .unwrap();
        assert!(iv.contains(4.0));
        assert!(iv.z_min <= iv.z_max);
    }

    #[test]
    fn interval_scales_inversely_with_spread() {
        let cfg = AssociationConfig {
            size_noise_sigmas: 0.0,
            ..AssociationConfig::default()
        };
        let c = Vector2::new(320.0, 240.0);
        let offs = [
            Vector2::new(10.0, -20.0),
            Vector2::new(-10.0, -20.0),
            Vector2::new(8.0, 20.0),
            Vector2::new(-9.0, 21.0),
        ];
        let a = estimate_depth_interval(&torso_only(offs.map(|o| c + o)), &intr(), &cfg).unwrap();
        let b = estimate_depth_interval(&torso_only(offs.map(|o| c + 2.0 * o)), &intr(), &cfg)
            .unwrap();
        assert_relative_eq!(a.z_min, 2.0 * b.z_min, epsilon = 1e-12);
        assert_relative_eq!(a.z_max, 2.0 * b.z_max, epsilon = 1e-12);
    }

    #[test]
    fn noise_margin_keeps_the_true_depth_inside() {
        // tallest admitted person facing the camera at the far end of the
        // bound, torso detected with 2 px noise per axis
        let cfg = AssociationConfig::default();
        let noiseless = AssociationConfig {
            size_noise_sigmas: 0.0,
            ..cfg
        };
        let cam = Pose3::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = rand_distr::Normal::new(0.0, 2.0).unwrap();
        let (mut inside, mut inside_noiseless) = (0, 0);
        let trials = 2000;
        for _ in 0..trials {
            let z = 7.0;
            let h = cfg.person_height_max;
            let corners = [
                Vector3::new(-0.09 * h, -0.15 * h, z),
                Vector3::new(0.09 * h, -0.15 * h, z),
                Vector3::new(-0.09 * h, 0.15 * h, z),
                Vector3::new(0.09 * h, 0.15 * h, z),
            ];
            let mut pd = torso_only(corners.map(|p| {
                project(&intr(), &cam, &p).unwrap()
                    + Vector2::new(rng.sample(noise), rng.sample(noise))
            }));
            for d in pd.joints.values_mut() {
                d.cov = Matrix2::identity() * 4.0;
            }
            inside += estimate_depth_interval(&pd, &intr(), &cfg).unwrap().contains(z) as usize;
            inside_noiseless +=
                estimate_depth_interval(&pd, &intr(), &noiseless).unwrap().contains(z) as usize;
        }
        assert!(inside as f64 >= 0.995 * trials as f64, "{inside}");
        // without the margin the far bound is violated about half the time
        assert!((inside_noiseless as f64) < 0.8 * trials as f64, "{inside_noiseless}");
    }

    #[test]
    fn degenerate_and_incomplete_torsos() {
        let c = Vector2::new(320.0, 240.0);
        let tiny = torso_only([c, c + Vector2::new(1.0, 0.0), c, c + Vector2::new(0.0, 1.0)]);
        assert!(matches!(
            estimate_depth_interval(&tiny, &intr(), &AssociationConfig::default()),
            Err(AssociationError::DegenerateTorso { .. })
        ));
        let mut partial = torso_only([c; 4]);
        partial.joints.remove(&5);
        assert_eq!(
            estimate_depth_interval(&partial, &intr(), &AssociationConfig::default()),
            Err(AssociationError::MissingTorso)
        );
    }

    #[test]
    fn config_validation() {
        assert!(AssociationConfig::default().validate().is_ok());
        let bad = AssociationConfig {
            foreshortening_floor: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AssociationConfig {
            person_height_min: 2.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn principal_point_segment() {
        let mut pd = torso_only([Vector2::new(320.0, 240.0); 4]);
        pd.joints.retain(|j, _| *j == 5);
        let segs = person_segments(
            &pd,
            &DepthInterval {
                z_min: 1.0,
                z_max: 2.0,
            },
            &Pose3::identity(),
            &intr(),
        );
        assert_relative_eq!(segs[&5].a, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        assert_relative_eq!(segs[&5].b, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-15);
    }

    fn random_pose(rng: &mut impl Rng) -> Pose3 {
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        se3_exp(&Tangent6::from_slice(&v))
    }

    #[test]
    fn segment_endpoints_reproject_and_transform_covariantly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let iv = DepthInterval {
            z_min: 1.5,
            z_max: 6.0,
        };
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let world = random_pose(&mut rng);
            let px = std::array::from_fn(|_| {
                Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            });
            let pd = torso_only(px);
            let local = person_segments(&pd, &iv, &pose, &intr());
            let moved = person_segments(&pd, &iv, &world.compose(&pose), &intr());
            for (j, seg) in &local {
                let p = pd.joints[j].pixel;
                for end in [seg.a, seg.b] {
                    let re = project(&intr(), &pose, &end).unwrap();
                    assert!((re - p).norm() < 1e-9);
                }
                assert_relative_eq!(moved[j].a, world.transform_point(&seg.a), epsilon = 1e-9);
                assert_relative_eq!(moved[j].b, world.transform_point(&seg.b), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn center_of_mass_examples() {
        let mut h = PersonHypothesis {
            id: 0,
            created_at: 0,
            views: BTreeMap::new(),
            segments: BTreeMap::new(),
            center_of_mass: Vector3::zeros(),
        };
        assert_eq!(center_of_mass(&h), Err(AssociationError::NoTorsoSegments));
        h.segments.insert(
            (0, 5),
            Segment3::new(Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 3.0)),
        );
        // limb segments do not contribute
        h.segments.insert(
            (0, 9),
            Segment3::new(Vector3::new(9.0, 0.0, 1.0), Vector3::new(9.0, 0.0, 3.0)),
        );
        assert_relative_eq!(center_of_mass(&h).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        h.segments.clear();
        h.segments.insert((0, 5), Segment3::new(Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)));
        h.segments.insert(
            (1, 11),
            Segment3::new(Vector3::new(2.0, 0.0, 0.0), Vector3::new(4.0, 0.0, 0.0)),
        );
        assert_relative_eq!(center_of_mass(&h).unwrap(), Vector3::new(2.0, 0.0, 0.0));
    }

    fn run(
        persons: &[PersonDetection],
        poses: &BTreeMap<SensorId, Pose3>,
    ) -> (Vec<PersonHypothesis>, Vec<f64>) {
        let intrs = poses.keys().map(|&s| (s, intr())).collect();
        associate_ordered(
            persons,
            poses,
            &intrs,
            &AssociationConfig::default(),
            0,
            &mut HypothesisIds::new(),
        )
    }

    #[test]
    fn one_person_two_cameras() {
        let poses = ring(2, 5.0, 1.5);
        let sk = skeleton(Vector3::new(0.3, -0.2, 0.0), 1.7, 0.4);
        let persons: Vec<_> = poses.iter().map(|(&s, p)| render(s, 0, p, &sk)).collect();
        let (hyps, _) = run(&persons, &poses);
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].num_views(), 2);
        assert_eq!(hyps[0].segments.len(), 2 * sk.len());
    }

    #[test]
    fn single_camera_yields_nothing() {
        let poses = ring(1, 5.0, 1.5);
        let sk = skeleton(Vector3::zeros(), 1.7, 0.0);
        let persons = vec![render(0, 0, &poses[&0], &sk)];
        assert!(run(&persons, &poses).0.is_empty());
    }

    #[test]
    fn two_persons_stay_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let poses = ring(4, 5.0, 2.6);
        for _ in 0..50 {
            let a = rng.random_range(-PI..PI);
            let dir = Vector3::new(a.cos(), a.sin(), 0.0);
            let centre = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
            let people = [
                skeleton(centre + 1.5 * dir, 1.70, rng.random_range(-PI..PI)),
                skeleton(centre - 1.5 * dir, 1.96, rng.random_range(-PI..PI)),
            ];
            let mut persons = Vec::new();
            let mut truth = BTreeMap::new();
            for (&s, pose) in &poses {
                for (gt, sk) in people.iter().enumerate() {
                    let idx = persons.iter().filter(|p: &&PersonDetection| p.sensor_id == s).count();
                    persons.push(render(s, idx as u32, pose, sk));
                    truth.insert((s, idx as u32), gt);
                }
            }
            let (hyps, order) = run(&persons, &poses);
            assert!(order.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(hyps.len(), 2);
            for h in &hyps {
                let ids: Vec<_> = h.views.values().map(|p| truth[&(p.sensor_id, p.person_index)]).collect();
                assert!(ids.windows(2).all(|w| w[0] == w[1]), "mixed hypothesis");
                assert_eq!(h.num_views(), 4);
            }
        }
    }

    #[test]
    fn members_pairwise_within_threshold_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let poses = ring(8, 5.0, 2.6);
        let cfg = AssociationConfig::default();
        for _ in 0..20 {
            let people: Vec<_> = (0..3)
                .map(|_| {
                    skeleton(
                        Vector3::new(rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5), 0.0),
                        rng.random_range(1.5..2.0),
                        rng.random_range(-PI..PI),
                    )
                })
                .collect();
            let mut persons = Vec::new();
            for (&s, pose) in &poses {
                for (i, sk) in people.iter().enumerate() {
                    let mut pd = render(s, i as u32, pose, sk);
                    for d in pd.joints.values_mut() {
                        d.pixel += Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                    }
                    persons.push(pd);
                }
            }
            let (a, _) = run(&persons, &poses);
            let (b, _) = run(&persons, &poses);
            assert_eq!(a, b);
            for h in &a {
                assert!(h.num_views() >= 2);
                let sensors: Vec<_> = h.views.keys().copied().collect();
                for (i, &si) in sensors.iter().enumerate() {
                    for &sj in &sensors[i + 1..] {
                        let d: f64 = TORSO_JOINTS
                            .iter()
                            .map(|&j| segment_distance(&h.segments[&(si, j)], &h.segments[&(sj, j)]).unwrap())
                            .sum::<f64>()
                            / 4.0;
                        assert!(d < cfg.match_threshold);
                    }
                }
            }
        }
    }

    fn torso_box_contains(sk: &BTreeMap<JointId, Vector3<f64>>, c: &Vector3<f64>, pad: f64) -> bool {
        let pts: Vec<_> = TORSO_JOINTS.iter().map(|j| sk[j]).collect();
        (0..3).all(|k| {
            let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            c[k] >= lo - pad && c[k] <= hi + pad
        })
    }

    #[test]
    fn center_of_mass_lies_in_torso_volume_for_symmetric_rig() {
        // cameras level with the torso and evenly spread around the person:
        // the near-side bias of each view's depth midpoint cancels out
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let h = rng.random_range(1.5..2.0);
            let root = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
            let sk = skeleton(root, h, rng.random_range(-PI..PI));
            let poses: BTreeMap<SensorId, Pose3> = (0..8)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / 8.0;
                    let target = root + Vector3::new(0.0, 0.0, 0.67 * h);
                    let eye = target + 5.0 * Vector3::new(a.cos(), a.sin(), 0.0);
                    (k as SensorId, look_at(eye, target))
                })
                .collect();
            let persons: Vec<_> = poses.iter().map(|(&s, p)| render(s, 0, p, &sk)).collect();
            let (hyps, _) = run(&persons, &poses);
            assert_eq!(hyps.len(), 1);
            // torso joints span a plane; allow its half-width as thickness
            assert!(torso_box_contains(&sk, &hyps[0].center_of_mass, 0.09 * h));
        }
    }

    #[test]
    fn center_of_mass_bias_under_elevated_ring() {
        // elevated, off-centre viewpoints pull the estimate towards the
        // cameras; the bias stays well below the selection spacing scale
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let poses = ring(8, 5.0, 2.6);
        for _ in 0..100 {
            let h = rng.random_range(1.5..2.0);
            let root = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
            let sk = skeleton(root, h, rng.random_range(-PI..PI));
            let persons: Vec<_> = poses.iter().map(|(&s, p)| render(s, 0, p, &sk)).collect();
            let (hyps, _) = run(&persons, &poses);
            assert_eq!(hyps.len(), 1);
            let c = hyps[0].center_of_mass;
            assert!((c.xy() - root.xy()).norm() < 0.5);
            assert!(c.z > 0.52 * h && c.z < h);
        }
    }

    #[test]
    fn all_joints_have_segments() {
        let poses = ring(3, 5.0, 2.6);
        let sk = skeleton(Vector3::zeros(), 1.8, 0.2);
        let persons: Vec<_> = poses.iter().map(|(&s, p)| render(s, 0, p, &sk)).collect();
        let (hyps, _) = run(&persons, &poses);
        assert_eq!(hyps.len(), 1);
        assert!(hyps[0]
            .segments
            .keys()
            .all(|(_, j)| (*j as usize) < NUM_JOINTS && sk.contains_key(j)));
    }
}
