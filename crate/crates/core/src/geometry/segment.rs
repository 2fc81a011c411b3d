use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

const DEGENERATE_LEN2: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray3 {
    pub origin: Vector3<f64>,
    pub direction: Unit<Vector3<f64>>,
}

impl Ray3 {
    pub fn point_at(&self, distance: f64) -> Vector3<f64> {
        self.origin + self.direction.into_inner() * distance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment3 {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Segment3 {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>) -> Self {
        Self { a, b }
    }

    pub fn midpoint(&self) -> Vector3<f64> {
        0.5 * (self.a + self.b)
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn is_degenerate(&self) -> bool {
        (self.b - self.a).norm_squared() <= DEGENERATE_LEN2
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.a + (self.b - self.a) * t
    }

    /// Closest point on `self` to the segment `other`, and its distance to
    /// `other`. This is the directed closest-point distance from `self` to
    /// `other`.
    pub fn directed_distance(&self, other: &Segment3) -> f64 {
        let (s, t) = closest_parameters(self, other);
        (self.point_at(s) - other.point_at(t)).norm()
    }
}

/// Parameters `(s, t)` in `[0, 1]²` of the closest pair of points between two
/// nondegenerate segments.
fn closest_parameters(l1: &Segment3, l2: &Segment3) -> (f64, f64) {
    let d1 = l1.b - l1.a;
    let d2 = l2.b - l2.a;
    let r = l1.a - l2.a;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let c = d1.dot(&r);
    let b = d1.dot(&d2);
    let denom = a * e - b * b;

    // Nonparallel: clamp the unconstrained minimizer on l1; otherwise pick 0.
    let mut s = if denom > 1e-14 * a * e {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

/// Closest-point distance between two segments: the smaller of the two
/// directed closest-point distances. Symmetric and zero exactly when the
/// segments intersect.
pub fn segment_distance(l1: &Segment3, l2: &Segment3) -> Result<f64, GeometryError> {
    if l1.is_degenerate() || l2.is_degenerate() {
        return Err(GeometryError::DegenerateSegment);
    }
    Ok(l1.directed_distance(l2).min(l2.directed_distance(l1)))
}
