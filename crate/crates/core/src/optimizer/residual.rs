use nalgebra::{Matrix2x3, Matrix2x6, Matrix6, Vector2, Vector3, Vector6};

use crate::geometry::{
    se3_right_jacobian_inv, skew, CameraIntrinsics, GeometryError, Pose3, MIN_DEPTH,
};

/// Residual `measured − project(X)` with its Jacobians with respect to a
/// right perturbation of the camera pose and to the landmark position.
pub fn projection_residual(
    pose: &Pose3,
    intr: &CameraIntrinsics,
    point: &Vector3<f64>,
    measured: &Vector2<f64>,
) -> Result<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>), GeometryError> {
    let rt = pose.rotation_matrix().transpose();
    let pc = rt * (point - pose.translation);
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::CheiralityViolation { depth: pc.z });
    }
    let iz = 1.0 / pc.z;
    let projected = Vector2::new(
        intr.fx * pc.x * iz + intr.cx,
        intr.fy * pc.y * iz + intr.cy,
    );
    let dpi = Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * pc.x * iz * iz,
        0.0,
        intr.fy * iz,
        -intr.fy * pc.y * iz * iz,
    );
    // ∂p_c/∂ρ = −I, ∂p_c/∂φ = [p_c]×, ∂p_c/∂X = Rᵀ; the residual negates
    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&dpi);
    j_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-dpi * skew(&pc)));
    let j_point = -dpi * rt;
    Ok((measured - projected, j_pose, j_point))
}

/// Residual `log(prior⁻¹·pose)` and its Jacobian with respect to a right
/// perturbation of `pose`.
pub fn prior_residual(
    prior: &Pose3,
    pose: &Pose3,
) -> Result<(Vector6<f64>, Matrix6<f64>), GeometryError> {
    let r = prior.local(pose)?;
    let j = se3_right_jacobian_inv(&r);
    Ok((r.0, j))
}
