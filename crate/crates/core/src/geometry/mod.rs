//! Geometric and numeric primitives shared by every stage of the pipeline.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose3`] maps camera-frame points into the world frame, so its
//!   translation is the optical center. The camera looks along its local +z.
//! * Perturbations are right-multiplicative: `C ← C · exp(ξ)` with
//!   `ξ = (ρ, φ)`, translation first.
//! * Projection works on undistorted pixels; distortion only exists at
//!   ingestion time.

mod camera;
mod pose;
mod segment;
mod triangulate;
mod umeyama;

use thiserror::Error;

pub use camera::{MIN_DEPTH, backproject_ray, project, undistort_pixel, CameraIntrinsics, RadialTangential};
pub use pose::{
    se3_exp, se3_left_jacobian, se3_log, se3_right_jacobian, se3_right_jacobian_inv, skew,
    so3_exp, so3_left_jacobian, so3_left_jacobian_inv, so3_log, Pose3, Tangent6,
};
pub use segment::{segment_distance, Ray3, Segment3};
pub use triangulate::{triangulate, Observation};
pub use umeyama::{rotation_angle, umeyama_align, Similarity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth:.3e})")]
    CheiralityViolation { depth: f64 },
    #[error("undistortion did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("degenerate segment: endpoints coincide")]
    DegenerateSegment,
    #[error("need at least 2 observations, got {0}")]
    InsufficientObservations(usize),
    #[error("degenerate triangulation geometry")]
    DegenerateGeometry,
    #[error("need at least {needed} point pairs, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("matrix is not a rotation (orthonormality error {error:.3e})")]
    NotARotation { error: f64 },
    #[error("rotation angle {angle} too close to π for a stable logarithm")]
    LogNearPi { angle: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}
