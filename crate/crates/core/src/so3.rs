//! SO(3) exponential/logarithm and right-Jacobian helpers.
//!
//! All rotations are plain 3x3 matrices; rotation vectors are axis * angle
//! with the canonical angle in [0, pi].

use nalgebra::{Matrix3, Vector3};

/// Below this angle the closed forms divide by ~0; series expansions take over.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Skew-symmetric matrix such that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula: rotation matrix for the rotation vector `n`.
pub fn exp_so3(n: &Vector3<f64>) -> Matrix3<f64> {
    let angle = n.norm();
    let nx = skew(n);
    if angle < SMALL_ANGLE {
        // 2nd-order series in the un-normalized vector
        Matrix3::identity() + nx + nx * nx * 0.5
    } else {
        let axis_x = nx / angle;
        Matrix3::identity() + axis_x * angle.sin() + axis_x * axis_x * (1.0 - angle.cos())
    }
}

fn vee_half(r: &Matrix3<f64>) -> Vector3<f64> {
    // vee((R - R^T)/2) = sin(angle) * axis
    Vector3::new(
        (r[(2, 1)] - r[(1, 2)]) * 0.5,
        (r[(0, 2)] - r[(2, 0)]) * 0.5,
        (r[(1, 0)] - r[(0, 1)]) * 0.5,
    )
}

/// Rotation vector of `r`, magnitude in [0, pi].
///
/// Uses atan2 of (sin, cos) away from pi, a series below `SMALL_ANGLE`, and
/// diagonal-based axis extraction close to pi where the skew part vanishes.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = vee_half(r); // sin(angle) * axis
    let sin_angle = w.norm();
    let cos_angle = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin_angle.atan2(cos_angle);

    if angle < SMALL_ANGLE {
        return w;
    }
    if angle > 3.0 {
        // 1 - cos(angle) is O(1) here; recover the axis from the symmetric part.
        let c = cos_angle;
        let denom = 1.0 - c;
        let mut axis = Vector3::new(
            ((r[(0, 0)] - c) / denom).max(0.0).sqrt(),
            ((r[(1, 1)] - c) / denom).max(0.0).sqrt(),
            ((r[(2, 2)] - c) / denom).max(0.0).sqrt(),
        );
        // Fix relative signs from the symmetric off-diagonal terms,
        // anchored on the largest component.
        let k = axis.imax();
        let (i, j) = match k {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        if r[(k, i)] + r[(i, k)] < 0.0 {
            axis[i] = -axis[i];
        }
        if r[(k, j)] + r[(j, k)] < 0.0 {
            axis[j] = -axis[j];
        }
        // Overall sign from the skew part when it has not fully degenerated.
        if sin_angle > 1e-9 && w.dot(&axis) < 0.0 {
            axis = -axis;
        }
        axis.normalize() * angle
    } else {
        w * (angle / sin_angle)
    }
}

/// Right Jacobian of the exponential: Exp(n + d) ~ Exp(n) Exp(J_r(n) d).
pub fn right_jacobian(n: &Vector3<f64>) -> Matrix3<f64> {
    let angle = n.norm();
    let nx = skew(n);
    if angle < SMALL_ANGLE {
        Matrix3::identity() - nx * 0.5 + nx * nx * (1.0 / 6.0)
    } else {
        let a2 = angle * angle;
        Matrix3::identity() - nx * ((1.0 - angle.cos()) / a2)
            + nx * nx * ((angle - angle.sin()) / (a2 * angle))
    }
}

/// Inverse of [`right_jacobian`]. Defined for `|n| < pi`.
pub fn right_jacobian_inv(n: &Vector3<f64>) -> Matrix3<f64> {
    let angle = n.norm();
    assert!(
        angle < std::f64::consts::PI,
        "right_jacobian_inv: |n| = {angle} is outside the injectivity radius"
    );
    let nx = skew(n);
    if angle < SMALL_ANGLE {
        Matrix3::identity() + nx * 0.5 + nx * nx * (1.0 / 12.0)
    } else {
        let coeff = 1.0 / (angle * angle)
            - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
        Matrix3::identity() + nx * 0.5 + nx * nx * coeff
    }
}

/// Quaternion components (x, y, z, w) of a rotation matrix, for trajectory export.
pub fn to_quaternion_xyzw(r: &Matrix3<f64>) -> [f64; 4] {
    let q = nalgebra::UnitQuaternion::from_matrix(r);
    let v = q.quaternion();
    // Fix the double-cover sign so exports are deterministic.
    if v.w < 0.0 {
        [-v.i, -v.j, -v.k, -v.w]
    } else {
        [v.i, v.j, v.k, v.w]
    }
}

/// True when `r` is orthonormal with determinant +1 within `tol` per entry.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let rtr = r.transpose() * r;
    let max_dev = (rtr - Matrix3::identity()).abs().max();
    max_dev <= tol && (r.determinant() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn exp_zero_is_identity() {
        assert_abs_diff_eq!(exp_so3(&Vector3::zeros()), Matrix3::identity(), epsilon = 0.0);
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let v = r * Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_log_roundtrip() {
        let n = Vector3::new(0.3, -0.2, 0.1);
        assert_abs_diff_eq!(log_so3(&exp_so3(&n)), n, epsilon = 1e-10);
    }

    #[test]
    fn log_identity_is_zero() {
        assert_abs_diff_eq!(log_so3(&Matrix3::identity()), Vector3::zeros(), epsilon = 0.0);
    }

    #[test]
    fn log_tiny_angle() {
        let n = Vector3::new(0.0, 1e-9, 0.0);
        assert_abs_diff_eq!(log_so3(&exp_so3(&n)), n, epsilon = 1e-12);
    }

    #[test]
    fn log_half_turn_about_x() {
        let n = log_so3(&exp_so3(&Vector3::new(PI, 0.0, 0.0)));
        assert_abs_diff_eq!(n.norm(), PI, epsilon = 1e-9);
        let axis = n / n.norm();
        assert!(axis.x.abs() > 1.0 - 1e-9);
    }

    #[test]
    fn skew_cross_identity() {
        let v = Vector3::new(1.0, 0.0, 0.0);
        let w = Vector3::new(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(skew(&v) * w, Vector3::new(0.0, 0.0, 1.0), epsilon = 0.0);
        assert_abs_diff_eq!(skew(&Vector3::zeros()), Matrix3::zeros(), epsilon = 0.0);
        let u = Vector3::new(0.2, 0.5, -1.1);
        assert_abs_diff_eq!(skew(&u).transpose(), -skew(&u), epsilon = 0.0);
    }

    #[test]
    fn right_jacobian_inv_basics() {
        assert_abs_diff_eq!(
            right_jacobian_inv(&Vector3::zeros()),
            Matrix3::identity(),
            epsilon = 0.0
        );
        let n = Vector3::new(0.1, -0.3, 0.2);
        assert_abs_diff_eq!(
            right_jacobian_inv(&n) * right_jacobian(&n),
            Matrix3::identity(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn right_jacobian_inv_matches_finite_differences() {
        // d/d(delta) Log(Exp(n)^T Exp(n) Exp(delta)) at delta = 0 is J_r(n)^-1
        // via Exp(n + J_r eps) ~ Exp(n) Exp(eps); check against central differences
        // of delta -> Log(Exp(n)~composed).
        let n = Vector3::new(0.2, 0.0, 0.0);
        let base = exp_so3(&n);
        let h = 1e-6;
        let jinv = right_jacobian_inv(&n);
        for col in 0..3 {
            let mut dp = Vector3::zeros();
            dp[col] = h;
            let plus = log_so3(&(base * exp_so3(&dp)));
            let minus = log_so3(&(base * exp_so3(&-dp)));
            let fd = (plus - minus) / (2.0 * h);
            assert_abs_diff_eq!(jinv.column(col).into_owned(), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn group_inverse() {
        let n = Vector3::new(0.4, -0.9, 1.3);
        let r = exp_so3(&n);
        assert_abs_diff_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn continuity_across_series_branch() {
        let eps = 1e-16;
        for axis in [Vector3::x(), Vector3::new(0.6, -0.8, 0.0)] {
            let lo = exp_so3(&(axis * (SMALL_ANGLE - eps)));
            let hi = exp_so3(&(axis * (SMALL_ANGLE + eps)));
            assert!((lo - hi).abs().max() < 1e-12);
            let jl = right_jacobian_inv(&(axis * (SMALL_ANGLE - eps)));
            let jh = right_jacobian_inv(&(axis * (SMALL_ANGLE + eps)));
            assert!((jl - jh).abs().max() < 1e-12);
        }
    }

    #[test]
    #[should_panic]
    fn right_jacobian_inv_rejects_pi() {
        right_jacobian_inv(&Vector3::new(PI, 0.0, 0.0));
    }
}
