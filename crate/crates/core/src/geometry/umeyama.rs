use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

/// Similarity transform `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// False when the source points are (near) collinear or too few, so the
    /// rotation about their common line is arbitrary.
    pub rotation_reliable: bool,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity (or rigid, with `estimate_scale == false`)
/// alignment of `src` onto `dst`.
pub fn umeyama_align(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    estimate_scale: bool,
) -> Result<Similarity, GeometryError> {
    let n = src.len();
    if n == 0 || n != dst.len() {
        return Err(GeometryError::TooFewPoints {
            needed: 1,
            got: n.min(dst.len()),
        });
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        cov += (d - mu_dst) * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov *= inv_n;
    var_src *= inv_n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // sort descending alongside the factors
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v_t = Matrix3::from_rows(&[v_t.row(order[0]), v_t.row(order[1]), v_t.row(order[2])]);
    sv = Vector3::new(sv[order[0]], sv[order[1]], sv[order[2]]);

    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let rotation_reliable = n >= 3 && sv[0] > 0.0 && sv[1] > 1e-12 * sv[0];

    let scale = if !estimate_scale {
        1.0
    } else if var_src > 0.0 {
        (sv[0] * s[(0, 0)] + sv[1] * s[(1, 1)] + sv[2] * s[(2, 2)]) / var_src
    } else {
        1.0
    };
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(Similarity {
        scale,
        rotation,
        translation,
        rotation_reliable,
    })
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let e = (r * r.transpose() - Matrix3::identity()).norm();
    e.max((r.determinant() - 1.0).abs())
}

/// Shortest-arc angle between two rotations, in radians within `[0, π]`.
pub fn rotation_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> Result<f64, GeometryError> {
    for r in [ra, rb] {
        let error = orthonormality_error(r);
        if !(error <= 1e-6) {
            return Err(GeometryError::NotARotation { error });
        }
    }
    let m = ra.transpose() * rb;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // sine from the skew part; atan2 keeps precision near 0 and π
    let sin = 0.5
        * Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        )
        .norm();
    Ok(sin.atan2(cos).clamp(0.0, std::f64::consts::PI))
}
