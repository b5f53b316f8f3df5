//! Rotation parameterizations, rigid-transform algebra and the pose error metrics.
//!
//! Rotations act on column vectors: a transform maps `p` to `R p + t`.
//! Quaternions are `(w, x, y, z)` in the Hamilton convention.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance used to accept externally supplied matrices as rotations.
pub const SO3_INPUT_TOL: f64 = 1e-6;

/// Below this angle the exponential and logarithm switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-7;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Frobenius norm of `RᵀR − I` and the determinant.
pub fn rotation_defect(r: &Matrix3<f64>) -> (f64, f64) {
    ((r.transpose() * r - Matrix3::identity()).norm(), r.determinant())
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let (ortho, det) = rotation_defect(r);
    ortho <= tol && (det - 1.0).abs() <= tol
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let (ortho, det) = rotation_defect(r);
    if ortho <= SO3_INPUT_TOL && (det - 1.0).abs() <= SO3_INPUT_TOL {
        Ok(())
    } else {
        Err(Error::NotRotation { ortho, det })
    }
}

/// Rodrigues' formula. Total; uses a second-order expansion near zero angle.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let half = 0.5 * theta;
        (theta.sin() / theta, 2.0 * half.sin().powi(2) / theta2)
    };
    let k = hat(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`]. At exactly π the axis sign is not unique; any valid
/// axis is returned.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    check_rotation(r)?;
    let skew = vee(&(r - r.transpose())) * 0.5; // sin(θ)·axis
    let sin_theta = skew.norm();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);
    if theta < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return Ok(skew * (1.0 + theta * theta / 6.0));
    }
    if cos_theta > -0.99 {
        return Ok(skew * (theta / sin_theta));
    }
    // Near π: recover the axis from the symmetric part, cosθ·I + (1−cosθ)·aaᵀ.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let col = (0..3)
        .max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)]))
        .unwrap_or(0);
    let mut axis = aat.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Unit quaternion `(w, x, y, z)` to rotation matrix; normalizes internally.
pub fn quat_to_rot(q: &[f64; 4]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::DegenerateQuaternion(norm));
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Nearest rotation (Frobenius) to an arbitrary 3×3 matrix.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let smallest = svd.singular_values.min();
    if !(smallest > 1e-9) {
        return Err(Error::RankDeficient(format!(
            "smallest singular value {smallest:e}"
        )));
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t)
}

/// Nine row-major values to the nearest rotation matrix.
pub fn linear9_to_rot(m: &[f64; 9]) -> Result<Matrix3<f64>> {
    project_to_so3(&Matrix3::from_row_slice(m))
}

/// Geodesic angle between two rotations, in degrees.
pub fn rot_error(r: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let c = (((r.transpose() * r_gt).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Euclidean distance between translations, in meters.
pub fn trans_error(t: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t - t_gt).norm()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates the rotation against [`SO3_INPUT_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&omega),
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major rotation followed by translation: 12 values.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::from_row_slice(&v[..9]),
            translation: Vector3::new(v[9], v[10], v[11]),
        }
    }
}

/// `second ∘ first`: R = R₂R₁, t = R₂t₁ + t₂.
pub fn compose(second: &RigidTransform, first: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: second.rotation * first.rotation,
        translation: second.rotation * first.translation + second.translation,
    }
}

pub fn apply(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.apply(p)
}

/// Cumulative poses from a sequence of pairwise transforms:
/// `out[0] = pairwise[0]`, `out[i] = pairwise[i] ∘ out[i-1]`.
pub fn chain(pairwise: &[RigidTransform]) -> Result<Vec<RigidTransform>> {
    let (first, rest) = pairwise
        .split_first()
        .ok_or_else(|| Error::InvalidInput("cannot chain an empty transform list".into()))?;
    let mut out = Vec::with_capacity(pairwise.len());
    out.push(*first);
    for t in rest {
        let prev = out[out.len() - 1];
        out.push(compose(t, &prev));
    }
    Ok(out)
}
