//! Differentiable 3×3 SVD and rotation parameterizations.

use nalgebra::{Matrix3, Vector3};

use crate::geom3d::{hat, so3_exp};

/// Cross-term denominators `s_j² − s_i²` are clamped to this magnitude when
/// singular values (nearly) coincide; gradients there are approximate.
pub const SVD_GAP_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

/// `A = U diag(s) Vᵀ` with `s` descending. Column signs are canonical: the
/// largest-magnitude entry of every column of `U` is positive.
pub fn svd3(a: &Matrix3<f64>) -> Svd3 {
    let svd = a.svd(true, true);
    let u0 = svd.u.expect("u requested");
    let v0 = svd.v_t.expect("v requested").transpose();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut u = Matrix3::zeros();
    let mut v = Matrix3::zeros();
    let mut s = Vector3::zeros();
    for (k, &src) in order.iter().enumerate() {
        let mut uc = u0.column(src).into_owned();
        let mut vc = v0.column(src).into_owned();
        let lead = (0..3)
            .max_by(|&i, &j| uc[i].abs().total_cmp(&uc[j].abs()))
            .unwrap_or(0);
        if uc[lead] < 0.0 {
            uc = -uc;
            vc = -vc;
        }
        u.set_column(k, &uc);
        v.set_column(k, &vc);
        s[k] = svd.singular_values[src];
    }
    Svd3 { u, s, v }
}

/// Adjoint of `A` given adjoints of `U`, `s` and `V` (any may be zero).
pub fn svd3_backward(
    d: &Svd3,
    du: &Matrix3<f64>,
    ds: &Vector3<f64>,
    dv: &Matrix3<f64>,
) -> Matrix3<f64> {
    let s = d.s;
    let f = Matrix3::from_fn(|i, j| {
        if i == j {
            0.0
        } else {
            let gap = s[j] * s[j] - s[i] * s[i];
            let gap = if gap.abs() < SVD_GAP_FLOOR {
                SVD_GAP_FLOOR.copysign(if gap == 0.0 { 1.0 } else { gap })
            } else {
                gap
            };
            1.0 / gap
        }
    });
    let ut_du = d.u.transpose() * du;
    let vt_dv = d.v.transpose() * dv;
    let j = f.component_mul(&(ut_du - ut_du.transpose()));
    let k = f.component_mul(&(vt_dv - vt_dv.transpose()));
    let sm = Matrix3::from_diagonal(&s);
    let inner = j * sm + Matrix3::from_diagonal(ds) + sm * k;
    d.u * inner * d.v.transpose()
}

/// Coefficients of `R = I + a K + b K²` and their derivatives with respect
/// to `θ²`.
fn exp_coefficients(theta2: f64) -> (f64, f64, f64, f64) {
    if theta2 < 1e-6 {
        let t4 = theta2 * theta2;
        (
            1.0 - theta2 / 6.0 + t4 / 120.0,
            0.5 - theta2 / 24.0 + t4 / 720.0,
            -1.0 / 6.0 + theta2 / 60.0 - t4 / 1680.0,
            -1.0 / 24.0 + theta2 / 360.0 - t4 / 13440.0,
        )
    } else {
        let theta = theta2.sqrt();
        let (sin, cos) = theta.sin_cos();
        let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
        let a = sin / theta;
        let b = one_minus_cos / theta2;
        let da = (theta * cos - sin) / (2.0 * theta2 * theta);
        let db = (theta * sin - 2.0 * one_minus_cos) / (2.0 * theta2 * theta2);
        (a, b, da, db)
    }
}

pub fn so3_exp_forward(omega: &Vector3<f64>) -> Matrix3<f64> {
    so3_exp(omega)
}

/// `∂L/∂ω` given `∂L/∂R`.
pub fn so3_exp_backward(omega: &Vector3<f64>, grad_r: &Matrix3<f64>) -> Vector3<f64> {
    let theta2 = omega.norm_squared();
    let (a, b, da, db) = exp_coefficients(theta2);
    let k = hat(omega);
    let k2 = k * k;
    let radial = k * da + k2 * db;
    Vector3::from_fn(|i, _| {
        let e = hat(&Vector3::ith(i, 1.0));
        let d = radial * (2.0 * omega[i]) + e * a + (e * k + k * e) * b;
        d.component_mul(grad_r).sum()
    })
}

fn quat_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation of the normalized quaternion; `None` for a near-zero input.
pub fn quat_forward(q: &[f64; 4]) -> Option<Matrix3<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n > 1e-12).then(|| quat_matrix(&q.map(|v| v / n)))
}

pub fn quat_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gh = [gw, gx, gy, gz];
    let unit = [w, x, y, z];
    let dot: f64 = gh.iter().zip(&unit).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (gh[i] - unit[i] * dot) / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svd3_reconstructs_and_sorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let d = svd3(&a);
            assert!((d.u * Matrix3::from_diagonal(&d.s) * d.v.transpose() - a).norm() < 1e-12);
            assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2] && d.s[2] >= 0.0);
            assert!((d.u.transpose() * d.u - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn so3_exp_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for scale in [1e-9, 1e-4, 0.5, 2.5] {
            let w = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * scale;
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = so3_exp_backward(&w, &g);
            for i in 0..3 {
                let h = 1e-6;
                let mut wp = w;
                wp[i] += h;
                let mut wm = w;
                wm[i] -= h;
                let num = ((so3_exp(&wp) - so3_exp(&wm)).component_mul(&g).sum()) / (2.0 * h);
                assert!((num - analytic[i]).abs() < 1e-7, "{scale}: {num} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn quat_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = quat_backward(&q, &g);
            for i in 0..4 {
                let h = 1e-6;
                let mut qp = q;
                qp[i] += h;
                let mut qm = q;
                qm[i] -= h;
                let num = (quat_forward(&qp).unwrap() - quat_forward(&qm).unwrap())
                    .component_mul(&g)
                    .sum()
                    / (2.0 * h);
                assert!((num - analytic[i]).abs() < 1e-7);
            }
        }
    }
}
