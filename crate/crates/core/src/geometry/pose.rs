use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Below this rotation angle the closed-form SO(3)/SE(3) coefficients are
/// replaced by their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-4;

/// Rigid transform mapping camera-frame points into the world frame.
///
/// The rotation is held as a unit quaternion; `translation` is the optical
/// center expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from a rotation matrix, projecting it back onto SO(3).
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Quaternion components in `[w, x, y, z]` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_wxyz(wxyz: [f64; 4], translation: Vector3<f64>) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(UnitQuaternion::from_quaternion(q), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.rotation.inverse();
        Pose3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Right-multiplicative retraction `self * exp(xi)`.
    pub fn retract(&self, xi: &Tangent6) -> Pose3 {
        self.compose(&se3_exp(xi))
    }

    /// Local coordinates of `other` relative to `self`: `log(self⁻¹ * other)`.
    pub fn local(&self, other: &Pose3) -> Result<Tangent6, GeometryError> {
        se3_log(&self.inverse().compose(other))
    }
}

/// Local SE(3) perturbation: translation part `rho` (m) followed by the
/// rotation vector `phi` (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tangent6(pub Vector6<f64>);

impl Tangent6 {
    pub fn zeros() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self(Vector6::from_column_slice(v))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn phi(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map.
pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// SO(3) logarithm; the result has norm in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < 1e-12 {
        // sin(θ/2) ≈ θ/2 for tiny angles
        return v * (2.0 / w);
    }
    let angle = 2.0 * n.atan2(w);
    v * (angle / n)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        {
            let sh = (0.5 * theta).sin();
            (2.0 * sh * sh / t2, (theta - theta.sin()) / (t2 * theta))
        }
    };
    Matrix3::identity() + k * a + k2 * b
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - k * 0.5 + k2 * c
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    // The closed forms cancel catastrophically well above SMALL_ANGLE.
    let (c1, c2, c3) = if theta < 0.05 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) for `xi = (rho, phi)`.
pub fn se3_left_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    let phi = xi.phi();
    let j = so3_left_jacobian(&phi);
    let q = se3_q_block(&xi.rho(), &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// Right Jacobian of SE(3), `J_r(xi) = J_l(-xi)`.
pub fn se3_right_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian(&Tangent6(-xi.0))
}

/// Inverse right Jacobian of SE(3), via the block-triangular structure.
pub fn se3_right_jacobian_inv(xi: &Tangent6) -> Matrix6<f64> {
    let neg = Tangent6(-xi.0);
    let phi = neg.phi();
    let j_inv = so3_left_jacobian_inv(&phi);
    let q = se3_q_block(&neg.rho(), &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-j_inv * q * j_inv));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

/// SE(3) exponential with the V-matrix coupling of rotation and translation.
pub fn se3_exp(xi: &Tangent6) -> Pose3 {
    let phi = xi.phi();
    let v = so3_left_jacobian(&phi);
    Pose3::new(so3_exp(&phi), v * xi.rho())
}

/// SE(3) logarithm. Fails for rotations within 1e-6 rad of π, where the
/// rotation axis is ill-defined.
pub fn se3_log(p: &Pose3) -> Result<Tangent6, GeometryError> {
    let phi = so3_log(&p.rotation);
    let theta = phi.norm();
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::LogNearPi { angle: theta });
    }
    let rho = so3_left_jacobian_inv(&phi) * p.translation;
    Ok(Tangent6::new(rho, phi))
}
