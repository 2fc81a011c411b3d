use nalgebra::{DMatrix, Vector2, Vector3, Vector4};

use super::{backproject_ray, CameraIntrinsics, GeometryError, Pose3};

/// Two trailing singular values below this fraction of the largest mean the
/// rays carry no depth information.
const RANK_TOL: f64 = 1e-10;
/// Ratio of the two smallest singular values above which the two-view DLT
/// solution is considered poorly conditioned.
const MIDPOINT_FALLBACK_RATIO: f64 = 0.99;

/// One undistorted pixel observation of a point.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub pose: &'a Pose3,
    pub intrinsics: &'a CameraIntrinsics,
    pub pixel: Vector2<f64>,
}

/// Homogeneous DLT triangulation in normalized image coordinates.
pub fn triangulate(observations: &[Observation<'_>]) -> Result<Vector3<f64>, GeometryError> {
    let n = observations.len();
    if n < 2 {
        return Err(GeometryError::InsufficientObservations(n));
    }

    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (k, obs) in observations.iter().enumerate() {
        let xn = obs.intrinsics.normalize(&obs.pixel);
        // world → camera projection rows [Rᵀ | -Rᵀ t]
        let rt = obs.pose.rotation_matrix().transpose();
        let tc = -(rt * obs.pose.translation);
        let row = |i: usize| Vector4::new(rt[(i, 0)], rt[(i, 1)], rt[(i, 2)], tc[i]);
        let (p0, p1, p2) = (row(0), row(1), row(2));
        let r0 = p2 * xn.x - p0;
        let r1 = p2 * xn.y - p1;
        for c in 0..4 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(GeometryError::DegenerateGeometry)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if order.len() < 4 || sv(0) <= 0.0 {
        return Err(GeometryError::DegenerateGeometry);
    }
    if sv(2) <= RANK_TOL * sv(0) {
        return Err(GeometryError::DegenerateGeometry);
    }

    if n == 2 && sv(3) > MIDPOINT_FALLBACK_RATIO * sv(2) {
        return midpoint(&observations[0], &observations[1]);
    }

    let h = v_t.row(order[3]).transpose();
    if h[3].abs() <= 1e-12 * h.norm() {
        return Err(GeometryError::DegenerateGeometry);
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Midpoint of the common perpendicular of two viewing rays.
fn midpoint(o1: &Observation<'_>, o2: &Observation<'_>) -> Result<Vector3<f64>, GeometryError> {
    let r1 = backproject_ray(o1.intrinsics, o1.pose, &o1.pixel);
    let r2 = backproject_ray(o2.intrinsics, o2.pose, &o2.pixel);
    let (d1, d2) = (r1.direction.into_inner(), r2.direction.into_inner());
    let w = r1.origin - r2.origin;
    let b = d1.dot(&d2);
    let denom = 1.0 - b * b;
    if denom < 1e-14 {
        return Err(GeometryError::DegenerateGeometry);
    }
    let (d, e) = (d1.dot(&w), d2.dot(&w));
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    Ok(0.5 * (r1.point_at(s) + r2.point_at(t)))
}
