use std::collections::BTreeMap;

use log::debug;
use nalgebra::{Matrix2, Matrix6, Vector3};

use super::{
    default_prior_covariance, CameraNode, FactorGraph, LandmarkNode, OptimizerConfig,
    OptimizerError, PriorFactor, ProjectionFactor,
};
use crate::association::PersonHypothesis;
use crate::geometry::{project, triangulate, CameraIntrinsics, Observation, Pose3};
use crate::sensors::{Detection, SensorId, NUM_JOINTS};

/// Builds this cycle's factor graph from the selected hypotheses.
///
/// Landmarks are re-triangulated under the current poses. Joints seen by
/// fewer than two sensors, joints whose triangulation fails or lands behind
/// an observing camera, and cameras left without any projection factor are
/// omitted. Missing covariances fall back to [`default_prior_covariance`].
pub fn build_graph<H: std::borrow::Borrow<PersonHypothesis>>(
    selection: &[H],
    poses: &BTreeMap<SensorId, Pose3>,
    covariances: &BTreeMap<SensorId, Matrix6<f64>>,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
    cfg: &OptimizerConfig,
) -> Result<FactorGraph, OptimizerError> {
    let mut graph = FactorGraph::default();
    let floor = Matrix2::identity() * cfg.pixel_cov_floor;
    let mut dropped = 0usize;

    for h in selection {
        let h = h.borrow();
        for &s in h.views.keys() {
            if !poses.contains_key(&s) {
                return Err(OptimizerError::MissingPose(s));
            }
            if !intrinsics.contains_key(&s) {
                return Err(OptimizerError::MissingIntrinsics(s));
            }
        }
        for joint in 0..NUM_JOINTS as u8 {
            let obs: Vec<(SensorId, &Detection)> = h
                .views
                .iter()
                .filter_map(|(&s, pd)| pd.joints.get(&joint).map(|d| (s, d)))
                .filter(|(s, d)| intrinsics[s].contains(&d.pixel, cfg.image_margin))
                .collect();
            if obs.len() < 2 {
                continue;
            }
            let Some(position) = triangulate_views(&obs, poses, intrinsics) else {
                dropped += 1;
                continue;
            };
            let key = (h.id, joint);
            graph.landmarks.insert(key, LandmarkNode { key, position });
            for (s, d) in obs {
                graph.projections.push(ProjectionFactor {
                    sensor_id: s,
                    landmark: key,
                    measured: d.pixel,
                    noise: d.cov + floor,
                });
            }
        }
    }
    if dropped > 0 {
        debug!("dropped {dropped} landmarks during graph construction");
    }
    if graph.landmarks.is_empty() {
        return Err(OptimizerError::EmptyGraph);
    }

    for f in &graph.projections {
        let s = f.sensor_id;
        if graph.cameras.contains_key(&s) {
            continue;
        }
        let pose = poses[&s];
        graph.cameras.insert(
            s,
            CameraNode {
                sensor_id: s,
                pose,
                fixed: s == cfg.gauge_sensor,
            },
        );
        graph.priors.push(PriorFactor {
            sensor_id: s,
            prior_pose: pose,
            noise: covariances
                .get(&s)
                .copied()
                .unwrap_or_else(default_prior_covariance),
        });
        graph.intrinsics.insert(s, intrinsics[&s]);
    }
    Ok(graph)
}

/// Triangulates one joint; `None` if that fails or the point lands behind
/// an observing camera.
fn triangulate_views(
    obs: &[(SensorId, &Detection)],
    poses: &BTreeMap<SensorId, Pose3>,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
) -> Option<Vector3<f64>> {
    let tri_obs: Vec<Observation<'_>> = obs
        .iter()
        .map(|(s, d)| Observation {
            pose: &poses[s],
            intrinsics: &intrinsics[s],
            pixel: d.pixel,
        })
        .collect();
    let position = triangulate(&tri_obs).ok()?;
    obs.iter()
        .all(|(s, _)| project(&intrinsics[s], &poses[s], &position).is_ok())
        .then_some(position)
}
