use std::borrow::Borrow;
use std::collections::BTreeMap;

use crate::association::PersonHypothesis;
use crate::geometry::{project, triangulate, CameraIntrinsics, Observation, Pose3};
use crate::sensors::{JointGroup, SensorId, NUM_JOINTS};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl MeanAccumulator {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Mean pixel reprojection errors, per camera and per joint group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReprojectionErrors {
    pub per_camera: BTreeMap<SensorId, MeanAccumulator>,
    pub per_group: BTreeMap<JointGroup, MeanAccumulator>,
    pub overall: MeanAccumulator,
    /// Joints that could not be triangulated or projected.
    pub skipped: usize,
}

impl ReprojectionErrors {
    pub fn merge(&mut self, other: &ReprojectionErrors) {
        for (s, a) in &other.per_camera {
            self.per_camera.entry(*s).or_default().merge(a);
        }
        for (g, a) in &other.per_group {
            self.per_group.entry(*g).or_default().merge(a);
        }
        self.overall.merge(&other.overall);
        self.skipped += other.skipped;
    }
}

/// Triangulates every hypothesis joint seen by at least two calibrated
/// cameras and measures how far its projections land from the detections.
pub fn reprojection_errors<H: Borrow<PersonHypothesis>>(
    poses: &BTreeMap<SensorId, Pose3>,
    hypotheses: &[H],
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
) -> ReprojectionErrors {
    let mut out = ReprojectionErrors::default();
    for h in hypotheses {
        let h = h.borrow();
        for joint in 0..NUM_JOINTS as u8 {
            let obs: Vec<_> = h
                .views
                .iter()
                .filter_map(|(s, pd)| {
                    let d = pd.joints.get(&joint)?;
                    Some(Observation {
                        pose: poses.get(s)?,
                        intrinsics: intrinsics.get(s)?,
                        pixel: d.pixel,
                    })
                })
                .collect();
            let sensors: Vec<SensorId> = h
                .views
                .iter()
                .filter(|(s, pd)| {
                    pd.joints.contains_key(&joint) && poses.contains_key(s) && intrinsics.contains_key(s)
                })
                .map(|(s, _)| *s)
                .collect();
            if obs.len() < 2 {
                if !obs.is_empty() {
                    out.skipped += 1;
                }
                continue;
            }
            let Ok(x) = triangulate(&obs) else {
                out.skipped += 1;
                continue;
            };
            let errs: Option<Vec<f64>> = obs
                .iter()
                .map(|o| project(o.intrinsics, o.pose, &x).ok().map(|p| (p - o.pixel).norm()))
                .collect();
            let Some(errs) = errs else {
                out.skipped += 1;
                continue;
            };
            let group = JointGroup::of(joint).expect("joint ids are below NUM_JOINTS");
            for (s, e) in sensors.iter().zip(errs) {
                out.per_camera.entry(*s).or_default().add(e);
                out.per_group.entry(group).or_default().add(e);
                out.overall.add(e);
            }
        }
    }
    out
}
