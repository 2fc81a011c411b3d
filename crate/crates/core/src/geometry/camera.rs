use nalgebra::{Matrix2, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose3, Ray3};

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-8;

/// Minimum camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;

/// Five-coefficient radial-tangential lens model in OpenCV order
/// `(k1, k2, p1, p2, k3)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RadialTangential {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl RadialTangential {
    pub fn from_array(c: [f64; 5]) -> Self {
        Self {
            k1: c[0],
            k2: c[1],
            p1: c[2],
            p2: c[3],
            k3: c[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.k1, self.k2, self.p1, self.p2, self.k3]
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|c| *c == 0.0)
    }

    /// Distorts a normalized image point, returning the point and the 2×2
    /// Jacobian of the mapping.
    pub fn distort(&self, p: &Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let d_radial_dr2 = self.k1 + r2 * (2.0 * self.k2 + 3.0 * r2 * self.k3);
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;

        let dxd_dx = radial + x * d_radial_dr2 * 2.0 * x + 2.0 * self.p1 * y + 6.0 * self.p2 * x;
        let dxd_dy = x * d_radial_dr2 * 2.0 * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dyd_dx = y * d_radial_dr2 * 2.0 * x + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dyd_dy = radial + y * d_radial_dr2 * 2.0 * y + 6.0 * self.p1 * y + 2.0 * self.p2 * x;
        (
            Vector2::new(xd, yd),
            Matrix2::new(dxd_dx, dxd_dy, dyd_dx, dyd_dy),
        )
    }
}

/// Pinhole intrinsics plus lens distortion for one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: RadialTangential,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Undistorted pinhole camera.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            distortion: RadialTangential::default(),
            width,
            height,
        }
    }

    pub fn with_distortion(mut self, distortion: RadialTangential) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidIntrinsics(msg.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie inside the image");
        }
        if !self.distortion.to_array().iter().all(|c| c.is_finite()) {
            return bad("distortion coefficients must be finite");
        }
        Ok(())
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    /// Applies lens distortion to an undistorted pixel.
    pub fn distort_pixel(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let (d, _) = self.distortion.distort(&self.normalize(pixel));
        self.denormalize(&d)
    }

    /// Jacobian of [`undistort_pixel`] evaluated at the undistorted pixel
    /// `undistorted`, in pixel units.
    pub fn undistort_jacobian(&self, undistorted: &Vector2<f64>) -> Matrix2<f64> {
        let (_, jac) = self.distortion.distort(&self.normalize(undistorted));
        let k = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        let k_inv = Matrix2::new(1.0 / self.fx, 0.0, 0.0, 1.0 / self.fy);
        // pixel-space forward Jacobian is K J K⁻¹; undistortion is its inverse
        let forward = k * jac * k_inv;
        forward.try_inverse().unwrap_or_else(Matrix2::identity)
    }

    /// Whether a pixel lies inside the image enlarged by `margin` (a fraction
    /// of the image size) on every side.
    pub fn contains(&self, pixel: &Vector2<f64>, margin: f64) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        pixel.x >= -margin * w
            && pixel.x <= w * (1.0 + margin)
            && pixel.y >= -margin * h
            && pixel.y <= h * (1.0 + margin)
    }
}

/// Pinhole projection of a world point into an undistorted pixel.
pub fn project(
    intr: &CameraIntrinsics,
    cam_pose: &Pose3,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let pc = cam_pose.inverse_transform_point(point);
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::CheiralityViolation { depth: pc.z });
    }
    Ok(Vector2::new(
        intr.fx * pc.x / pc.z + intr.cx,
        intr.fy * pc.y / pc.z + intr.cy,
    ))
}

/// Inverts the lens model by Newton iteration in normalized coordinates.
pub fn undistort_pixel(
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    if intr.distortion.is_zero() {
        return Ok(*pixel);
    }
    let target = intr.normalize(pixel);
    let mut x = target;
    for _ in 0..UNDISTORT_MAX_ITERS {
        let (d, jac) = intr.distortion.distort(&x);
        let err = d - target;
        let step = match jac.try_inverse() {
            Some(inv) => inv * err,
            None => err,
        };
        x -= step;
        // Newton converges quadratically; stop once the update is negligible
        if step.norm() <= 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    let (d, _) = intr.distortion.distort(&x);
    let residual = (d - target).norm();
    if residual <= UNDISTORT_TOL && x.iter().all(|c| c.is_finite()) {
        Ok(intr.denormalize(&x))
    } else {
        Err(GeometryError::NoConvergence { residual })
    }
}

/// World-frame ray from the optical center through an undistorted pixel.
pub fn backproject_ray(intr: &CameraIntrinsics, cam_pose: &Pose3, pixel: &Vector2<f64>) -> Ray3 {
    let n = intr.normalize(pixel);
    let dir_cam = Vector3::new(n.x, n.y, 1.0);
    Ray3 {
        origin: cam_pose.center(),
        direction: Unit::new_normalize(cam_pose.rotation * dir_cam),
    }
}
