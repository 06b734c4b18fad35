//! Unit quaternions parameterized by stereographic projection from a 3D
//! hyperplane, and the rotation matrices they induce.
//!
//! Quaternions are ordered (q0, q1, q2, q3) with q0 the scalar part. The
//! chart point psi = (1, 0, 0) maps to q = (1, 0, 0, 0), the identity.

use nalgebra::{Matrix3, Vector4};

use crate::cloud::Vec3;
use crate::error::{Error, Result};

pub type Quaternion = Vector4<f64>;

/// Chart point that maps to the identity rotation.
pub const IDENTITY_CHART: [f64; 3] = [1.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuaternionChart {
    pub psi: Vec3,
}

impl QuaternionChart {
    pub fn new(psi: Vec3) -> Self {
        Self { psi }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::from(IDENTITY_CHART))
    }

    pub fn quaternion(&self) -> Quaternion {
        chart_to_quaternion(&self.psi)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_unchecked(&self.quaternion())
    }

    pub fn jacobian(&self) -> [Matrix3<f64>; 3] {
        rotation_chart_jacobian(&self.psi)
    }
}

pub fn chart_to_quaternion(psi: &Vec3) -> Quaternion {
    let b2 = psi.norm_squared();
    Quaternion::new(2.0 * psi.x, 2.0 * psi.y, 2.0 * psi.z, 1.0 - b2) / (b2 + 1.0)
}

/// Inverse projection. Fails at the pole q3 = -1, which has no chart point.
pub fn quaternion_to_chart(q: &Quaternion) -> Result<Vec3> {
    if 1.0 + q[3] <= 1e-12 {
        return Err(Error::Numerical("quaternion at the chart pole q3 = -1".into()));
    }
    let b2 = (1.0 - q[3]) / (1.0 + q[3]);
    Ok(Vec3::new(q[0], q[1], q[2]) * (b2 + 1.0) / 2.0)
}

pub fn quaternion_to_rotation(q: &Quaternion) -> Result<Matrix3<f64>> {
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("quaternion norm {} is not 1", q.norm())));
    }
    Ok(rotation_unchecked(q))
}

pub(crate) fn rotation_unchecked(q: &Quaternion) -> Matrix3<f64> {
    let (q0, q1, q2, q3) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3,
        2.0 * (q1 * q2 - q0 * q3),
        2.0 * (q1 * q3 + q0 * q2),
        2.0 * (q1 * q2 + q0 * q3),
        q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3,
        2.0 * (q2 * q3 - q0 * q1),
        2.0 * (q1 * q3 - q0 * q2),
        2.0 * (q2 * q3 + q0 * q1),
        q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3,
    )
}

/// Quaternion of a rotation matrix (Shepperd's method), sign chosen q3 >= 0
/// so the result stays away from the chart pole.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> Quaternion {
    let tr = r.trace();
    let candidates = [tr, r[(0, 0)], r[(1, 1)], r[(2, 2)]];
    let k = (0..4).max_by(|&a, &b| candidates[a].total_cmp(&candidates[b])).unwrap();
    let q = match k {
        0 => {
            let s = 2.0 * (1.0 + tr).sqrt();
            Quaternion::new(
                s / 4.0,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        }
        1 => {
            let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
            Quaternion::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                s / 4.0,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        }
        2 => {
            let s = 2.0 * (1.0 - r[(0, 0)] + r[(1, 1)] - r[(2, 2)]).sqrt();
            Quaternion::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                s / 4.0,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        }
        _ => {
            let s = 2.0 * (1.0 - r[(0, 0)] - r[(1, 1)] + r[(2, 2)]).sqrt();
            Quaternion::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                s / 4.0,
            )
        }
    };
    let q = q.normalize();
    if q[3] < 0.0 {
        -q
    } else {
        q
    }
}

/// dR/dq_j for j = 0..3.
pub fn rotation_quaternion_partials(q: &Quaternion) -> [Matrix3<f64>; 4] {
    let (q0, q1, q2, q3) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(q0, -q3, q2, q3, q0, -q1, -q2, q1, q0) * 2.0,
        Matrix3::new(q1, q2, q3, q2, -q1, -q0, q3, q0, -q1) * 2.0,
        Matrix3::new(-q2, q1, q0, q1, q2, q3, -q0, q3, -q2) * 2.0,
        Matrix3::new(-q3, -q0, q1, q0, -q3, q2, q1, q2, q3) * 2.0,
    ]
}

/// dq/dx, dq/dy, dq/dz.
pub fn quaternion_chart_partials(psi: &Vec3) -> [Quaternion; 3] {
    let (x, y, z) = (psi.x, psi.y, psi.z);
    let b = psi.norm_squared() + 1.0;
    let f = 1.0 / (b * b);
    [
        Quaternion::new(2.0 * b - 4.0 * x * x, -4.0 * x * y, -4.0 * x * z, -4.0 * x) * f,
        Quaternion::new(-4.0 * x * y, 2.0 * b - 4.0 * y * y, -4.0 * y * z, -4.0 * y) * f,
        Quaternion::new(-4.0 * x * z, -4.0 * y * z, 2.0 * b - 4.0 * z * z, -4.0 * z) * f,
    ]
}

/// dR/dx, dR/dy, dR/dz through the chain rule.
pub fn rotation_chart_jacobian(psi: &Vec3) -> [Matrix3<f64>; 3] {
    let dr = rotation_quaternion_partials(&chart_to_quaternion(psi));
    let dq = quaternion_chart_partials(psi);
    dq.map(|d| dr[0] * d[0] + dr[1] * d[1] + dr[2] * d[2] + dr[3] * d[3])
}

/// Frobenius distance between a rotation estimate and the truth,
/// |I - R_est R_true^T|_F.
pub fn rotation_error(estimate: &Matrix3<f64>, truth: &Matrix3<f64>) -> f64 {
    (Matrix3::identity() - estimate * truth.transpose()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psi(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn chart_examples() {
        assert_eq!(chart_to_quaternion(&Vec3::zeros()), Quaternion::new(0.0, 0.0, 0.0, 1.0));
        let q = chart_to_quaternion(&Vec3::x());
        assert_eq!(q, Quaternion::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(quaternion_to_rotation(&q).unwrap(), Matrix3::identity());
        assert_eq!(
            quaternion_to_rotation(&Quaternion::new(0.0, 0.0, 0.0, 1.0)).unwrap(),
            Matrix3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))
        );
    }

    #[test]
    fn rotation_matches_nalgebra_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = chart_to_quaternion(&random_psi(&mut rng));
            let ours = rotation_unchecked(&q);
            let theirs = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
                .to_rotation_matrix()
                .into_inner();
            assert!((ours - theirs).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_norm_and_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let q = chart_to_quaternion(&random_psi(&mut rng));
            assert!((q.norm() - 1.0).abs() < 1e-9);
            let r = quaternion_to_rotation(&q).unwrap();
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            assert!((quaternion_to_rotation(&-q).unwrap() - r).norm() < 1e-15);
        }
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(quaternion_to_rotation(&Quaternion::new(1.0, 1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn chart_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let psi = random_psi(&mut rng);
            let back = quaternion_to_chart(&chart_to_quaternion(&psi)).unwrap();
            assert!((back - psi).norm() < 1e-7);
        }
        assert!(quaternion_to_chart(&Quaternion::new(0.0, 0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn matrix_to_quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let r = Rotation3::from_euler_angles(rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0)).into_inner();
            let q = rotation_to_quaternion(&r);
            assert!(q[3] >= 0.0);
            assert!((rotation_unchecked(&q) - r).norm() < 1e-12);
        }
        // Half-turns exercise the non-trace branches.
        for axis in [Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, 1.0, 0.0).normalize()] {
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), std::f64::consts::PI).into_inner();
            assert!((rotation_unchecked(&rotation_to_quaternion(&r)) - r).norm() < 1e-12);
        }
    }

    fn fd_jacobian(psi: &Vec3, h: f64) -> [Matrix3<f64>; 3] {
        let mut out = [Matrix3::zeros(); 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut e = Vec3::zeros();
            e[k] = h;
            let plus = rotation_unchecked(&chart_to_quaternion(&(psi + e)));
            let minus = rotation_unchecked(&chart_to_quaternion(&(psi - e)));
            *slot = (plus - minus) / (2.0 * h);
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let psi = random_psi(&mut rng);
            let analytic = rotation_chart_jacobian(&psi);
            let numeric = fd_jacobian(&psi, 1e-5);
            for k in 0..3 {
                let scale = analytic[k].norm().max(1e-3);
                assert!((analytic[k] - numeric[k]).norm() / scale < 1e-5);
            }
        }
    }

    #[test]
    fn jacobian_is_skew_at_identity() {
        for d in rotation_chart_jacobian(&Vec3::x()) {
            assert!((d.transpose() + d).norm() < 1e-9);
        }
    }

    #[test]
    fn jacobian_varies_smoothly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let psi = random_psi(&mut rng);
            let dir = random_psi(&mut rng).normalize();
            let at = |t: f64| rotation_chart_jacobian(&(psi + dir * t));
            for h in [1e-2, 5e-3] {
                let (a, b, c) = (at(-h), at(0.0), at(h));
                for k in 0..3 {
                    // First differences shrink linearly, second differences quadratically.
                    assert!((c[k] - a[k]).norm() < 50.0 * h);
                    assert!((c[k] - 2.0 * b[k] + a[k]).norm() < 500.0 * h * h);
                }
            }
        }
    }

    #[test]
    fn rotation_error_examples() {
        let r = Rotation3::from_euler_angles(0.1, 0.2, 0.3).into_inner();
        assert!(rotation_error(&r, &r) < 1e-12);
        let half = Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::PI).into_inner();
        assert!((rotation_error(&half, &Matrix3::identity()) - 8f64.sqrt()).abs() < 1e-12);
    }
}
