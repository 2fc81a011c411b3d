//! Online extrinsic calibration of camera networks from streamed 2D person
//! keypoint detections.
//!
//! Detections are synchronized into framesets, associated across views into
//! person hypotheses, and repeatedly fed into a factor-graph bundle
//! adjustment whose results are filtered per camera. A built-in simulator
//! produces ground-truth scenes for end-to-end checks.

pub mod association;
pub mod geometry;
pub mod io;
pub mod optimizer;
pub mod pipeline;
pub mod refinement;
pub mod sensors;
pub mod simulator;

#[cfg(test)]
mod test_support;

pub use association::{AssociationConfig, PersonHypothesis};
pub use geometry::{CameraIntrinsics, Pose3, RadialTangential, Tangent6};
pub use io::RigFile;
pub use optimizer::{FactorGraph, OptimizerConfig, SolveReport};
pub use pipeline::{
    run_online, CycleTrace, DetectionSource, Evaluation, PipelineConfig, PipelineError, RigSetup,
    RunMode, RunOutput,
};
pub use refinement::{CalibrationState, CameraPoseEstimate, Fusion, RefinementConfig};
pub use sensors::{Detection, DetectionMessage, Frameset, JointId, PersonDetection, SensorId, Timestamp};
pub use simulator::{GroundTruth, ScenarioConfig};
