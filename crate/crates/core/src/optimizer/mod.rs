//! Per-cycle factor-graph calibration: hypothesis selection, graph
//! construction, and a Levenberg-Marquardt solver over camera poses and
//! joint landmarks.
//!
//! Camera perturbations are right-multiplicative, `C ← C·exp(ξ)` with
//! `ξ = (ρ, φ)`, so pose covariances are expressed in each camera's local
//! frame.

mod graph;
mod reproj;
mod residual;
mod select;
mod solve;

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose3};
use crate::sensors::{JointId, SensorId};

pub use graph::build_graph;
pub use reproj::{reprojection_errors, MeanAccumulator, ReprojectionErrors};
pub use residual::{prior_residual, projection_residual};
pub use select::select_hypotheses;
pub use solve::solve;

/// A landmark is one joint of one person hypothesis.
pub type LandmarkKey = (u64, JointId);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("no landmark survived graph construction")]
    EmptyGraph,
    #[error("singular system: cameras {cameras:?}, landmarks {landmarks:?}")]
    SingularSystem {
        cameras: Vec<SensorId>,
        landmarks: Vec<LandmarkKey>,
    },
    #[error("no pose for sensor {0}")]
    MissingPose(SensorId),
    #[error("no intrinsics for sensor {0}")]
    MissingIntrinsics(SensorId),
    #[error("noise model of {0} is not positive-definite")]
    NonPositiveDefinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Sensor whose pose defines the world frame; never optimized.
    pub gauge_sensor: SensorId,
    /// Per-rank decay of the selection weight (rank 0 = newest).
    pub recency_gamma: f64,
    /// Minimum center-of-mass distance between selected hypotheses, meters.
    pub spacing: f64,
    pub max_selection: usize,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_lambda: f64,
    /// Added to every detection covariance, px².
    pub pixel_cov_floor: f64,
    /// Measurements further outside the image than this fraction of its size
    /// are not used.
    pub image_margin: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            gauge_sensor: 0,
            recency_gamma: 0.9,
            spacing: 0.2,
            max_selection: 20,
            max_iterations: 50,
            relative_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            initial_lambda: 1e-4,
            pixel_cov_floor: 0.25,
            image_margin: 0.2,
        }
    }
}

/// Prior used for cameras without a filtered covariance yet: 0.25 m and 10°
/// standard deviation per axis.
pub fn default_prior_covariance() -> Matrix6<f64> {
    let t = 0.25f64.powi(2);
    let r = 10f64.to_radians().powi(2);
    Matrix6::from_diagonal(&nalgebra::Vector6::new(t, t, t, r, r, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraNode {
    pub sensor_id: SensorId,
    pub pose: Pose3,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkNode {
    pub key: LandmarkKey,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub sensor_id: SensorId,
    pub prior_pose: Pose3,
    /// Tangent-space covariance, (ρ, φ) order.
    pub noise: Matrix6<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFactor {
    pub sensor_id: SensorId,
    pub landmark: LandmarkKey,
    pub measured: Vector2<f64>,
    /// Pixel covariance, px².
    pub noise: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactorGraph {
    pub cameras: BTreeMap<SensorId, CameraNode>,
    pub landmarks: BTreeMap<LandmarkKey, LandmarkNode>,
    pub priors: Vec<PriorFactor>,
    pub projections: Vec<ProjectionFactor>,
    pub intrinsics: BTreeMap<SensorId, CameraIntrinsics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    /// Number of linear solves performed.
    pub iterations: usize,
    /// Half the sum of squared whitened residuals.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub poses: BTreeMap<SensorId, Pose3>,
    /// Marginal covariances of the optimized (non-gauge) cameras.
    pub pose_covariances: BTreeMap<SensorId, Matrix6<f64>>,
    pub landmarks: BTreeMap<LandmarkKey, Vector3<f64>>,
}
