//! Quaternion and rotation algebra shared by every other module.
//!
//! Convention: Hamilton product, scalar-first storage `(w, x, y, z)`.
//! `R(q)` maps body-frame vectors into the parent frame, i.e.
//! `q ⊗ [0, v] ⊗ q⁻¹ = [0, R(q) v]`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// 3-vector of f64, units carried by context.
pub type Vec3 = Vector3<f64>;
/// 3×3 real matrix.
pub type Mat3 = Matrix3<f64>;
/// 4×4 real matrix.
pub type Mat4 = Matrix4<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {norm} deviates from unit by more than {tol}; normalize first")]
    NotUnitNorm { norm: f64, tol: f64 },
}

/// Unit quaternion in Hamilton convention, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let u = axis / n;
        Self::new(c, s * u.x, s * u.y, s * u.z)
    }

    /// First-order increment `[1, θ/2]`, renormalized. The workhorse of both
    /// the pre-integration recursion and manifold state updates.
    pub fn from_small_angle(theta: Vec3) -> Self {
        Self::new(1.0, 0.5 * theta.x, 0.5 * theta.y, 0.5 * theta.z).normalized()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Inverse; identical to the conjugate for unit quaternions.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    pub fn vector_part(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Rotate a vector by this (unit) quaternion.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        self.rotation_matrix() * v
    }

    /// Rotation matrix of a unit quaternion. The caller maintains unit norm;
    /// use [`quat_to_rotation`] for the checked variant.
    pub fn rotation_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
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

    /// Unit quaternion of a proper rotation matrix. Branches on the largest
    /// diagonal combination (Shepperd), so it stays well conditioned for
    /// rotations near 180°.
    pub fn from_rotation_matrix(r: &Mat3) -> Self {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    /// Manifold update `q ⊗ [1, δθ/2]`, renormalized.
    pub fn boxplus(&self, delta_theta: Vec3) -> Self {
        quat_multiply(self, &Quaternion::from_small_angle(delta_theta))
    }

    /// Inverse of [`Quaternion::boxplus`]: the rotation-vector increment
    /// carrying `base` onto `self`. Exact (not small-angle truncated), so the
    /// round trip recovers the input to floating-point precision.
    pub fn boxminus(&self, base: &Quaternion) -> Vec3 {
        let mut d = quat_multiply(&base.inverse(), self);
        if d.w < 0.0 {
            d = Quaternion::new(-d.w, -d.x, -d.y, -d.z);
        }
        2.0 * d.vector_part() / d.w
    }

    /// Coordinates in vector-part-first order `[x, y, z, w]`, the layout the
    /// Ω matrix acts on.
    pub fn coords_xyzw(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.x, self.y, self.z, self.w)
    }
}

/// Skew-symmetric cross-product matrix: `skew(v) · u = v × u`.
pub fn skew(v: Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Quaternion-derivative operator: top-left `−skew(ω)`, top-right column `ω`,
/// bottom row `[−ωᵀ, 0]`. Acts on `[x, y, z, w]`-ordered coordinates, so
/// `q̇ = ½ Ω(ω) q` reproduces `q̇ = ½ q ⊗ [0, ω]`.
pub fn omega_matrix(omega: Vec3) -> Mat4 {
    let mut m = Mat4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(omega)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&omega);
    m.fixed_view_mut::<1, 3>(3, 0)
        .copy_from(&(-omega.transpose()));
    m
}

/// Hamilton product `a ⊗ b`: composition of rotations (apply `b`, then `a`).
pub fn quat_multiply(a: &Quaternion, b: &Quaternion) -> Quaternion {
    Quaternion::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Checked conversion to a rotation matrix; rejects inputs whose norm deviates
/// from 1 by more than 1e-6.
pub fn quat_to_rotation(q: &Quaternion) -> Result<Mat3, GeometryError> {
    const TOL: f64 = 1e-6;
    let norm = q.norm();
    if (norm - 1.0).abs() > TOL {
        return Err(GeometryError::NotUnitNorm { norm, tol: TOL });
    }
    Ok(q.rotation_matrix())
}

/// Left-multiplication matrix: `L(q) · p_coords = (q ⊗ p)` in `[x,y,z,w]`
/// coordinates. Used for residual Jacobians on the quaternion manifold.
pub fn quat_left_matrix(q: &Quaternion) -> Mat4 {
    let (w, v) = (q.w, q.vector_part());
    let mut m = Mat4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Mat3::identity() * w + skew(v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m[(3, 3)] = w;
    m
}

/// Right-multiplication matrix: `R(q) · p_coords = (p ⊗ q)` in `[x,y,z,w]`
/// coordinates.
pub fn quat_right_matrix(q: &Quaternion) -> Mat4 {
    let (w, v) = (q.w, q.vector_part());
    let mut m = Mat4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Mat3::identity() * w - skew(v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m[(3, 3)] = w;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit_quaternion(rng: &mut impl Rng) -> Quaternion {
        loop {
            let q = Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 1e-3 {
                return q.normalized();
            }
        }
    }

    fn random_vec3(rng: &mut impl Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        )
    }

    #[test]
    fn skew_of_zero_is_zero() {
        assert_eq!(skew(Vec3::zeros()), Mat3::zeros());
    }

    #[test]
    fn skew_of_unit_x() {
        let m = skew(Vec3::new(1.0, 0.0, 0.0));
        let expected = Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_eq!(m, expected);
    }

    #[test]
    fn skew_matches_componentwise_cross_product() {
        // Oracle: cross product spelled out component by component.
        let cross = |v: Vec3, u: Vec3| {
            Vec3::new(
                v.y * u.z - v.z * u.y,
                v.z * u.x - v.x * u.z,
                v.x * u.y - v.y * u.x,
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = random_vec3(&mut rng, 1.0);
            let u = random_vec3(&mut rng, 1.0);
            let got = skew(v) * u;
            let want = cross(v, u);
            assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn skew_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = skew(random_vec3(&mut rng, 10.0));
            assert_abs_diff_eq!(m.transpose(), -m, epsilon = 0.0);
        }
    }

    #[test]
    fn omega_of_zero_is_zero() {
        assert_eq!(omega_matrix(Vec3::zeros()), Mat4::zeros());
    }

    #[test]
    fn omega_block_layout_for_unit_z() {
        let m = omega_matrix(Vec3::new(0.0, 0.0, 1.0));
        #[rustfmt::skip]
        let expected = Mat4::new(
            0.0, 1.0, 0.0, 0.0,
            -1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, -1.0, 0.0,
        );
        assert_eq!(m, expected);
    }

    #[test]
    fn omega_reproduces_quaternion_derivative() {
        // Oracle: q̇ = ½ q ⊗ [0, ω] via the Hamilton product.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = random_unit_quaternion(&mut rng);
            let omega = random_vec3(&mut rng, 2.0);
            let lhs = 0.5 * omega_matrix(omega) * q.coords_xyzw();
            let qdot = quat_multiply(&q, &Quaternion::new(0.0, omega.x, omega.y, omega.z));
            let rhs = 0.5 * qdot.coords_xyzw();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
        }
    }

    #[test]
    fn multiply_identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_unit_quaternion(&mut rng);
        let r = quat_multiply(&Quaternion::IDENTITY, &q);
        assert_eq!(r, q);
    }

    #[test]
    fn multiply_by_conjugate_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_unit_quaternion(&mut rng);
        let r = quat_multiply(&q, &q.conjugate());
        assert_abs_diff_eq!(r.w, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.vector_part(), Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn multiply_matches_rotation_matrix_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a = random_unit_quaternion(&mut rng);
            let b = random_unit_quaternion(&mut rng);
            let ab = quat_multiply(&a, &b);
            let got = ab.rotation_matrix();
            let want = a.rotation_matrix() * b.rotation_matrix();
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_of_identity_quaternion() {
        let r = quat_to_rotation(&Quaternion::IDENTITY).unwrap();
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn rotation_of_quarter_turn_about_z() {
        let q = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let r = quat_to_rotation(&q).unwrap();
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_orthogonal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let q = random_unit_quaternion(&mut rng);
            let r = quat_to_rotation(&q).unwrap();
            assert_abs_diff_eq!(r * r.transpose(), Mat3::identity(), epsilon = 1e-12);
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_rejects_non_unit_input() {
        let q = Quaternion::new(1.1, 0.0, 0.0, 0.0);
        assert!(matches!(
            quat_to_rotation(&q),
            Err(GeometryError::NotUnitNorm { .. })
        ));
    }

    #[test]
    fn matrix_to_quaternion_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let q = random_unit_quaternion(&mut rng);
            let back = Quaternion::from_rotation_matrix(&q.rotation_matrix());
            // Same rotation up to global sign.
            let dot = q.w * back.w + q.x * back.x + q.y * back.y + q.z * back.z;
            assert!(dot.abs() > 1.0 - 1e-12, "dot {dot}");
        }
        // Near-180° rotations hit the non-trace branches.
        for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
            let q = Quaternion::from_axis_angle(axis, std::f64::consts::PI - 1e-9);
            let back = Quaternion::from_rotation_matrix(&q.rotation_matrix());
            let dot = q.w * back.w + q.x * back.x + q.y * back.y + q.z * back.z;
            assert!(dot.abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn left_right_matrices_reproduce_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = random_unit_quaternion(&mut rng);
            let b = random_unit_quaternion(&mut rng);
            let prod = quat_multiply(&a, &b);
            assert_abs_diff_eq!(
                quat_left_matrix(&a) * b.coords_xyzw(),
                prod.coords_xyzw(),
                epsilon = 1e-15
            );
            assert_abs_diff_eq!(
                quat_right_matrix(&b) * a.coords_xyzw(),
                prod.coords_xyzw(),
                epsilon = 1e-15
            );
        }
    }

    proptest::proptest! {
        #[test]
        fn rotation_preserves_norm(
            wx in -1.0f64..1.0, xx in -1.0f64..1.0, yx in -1.0f64..1.0, zx in -1.0f64..1.0,
            vx in -10.0f64..10.0, vy in -10.0f64..10.0, vz in -10.0f64..10.0,
        ) {
            let q = Quaternion::new(wx, xx, yx, zx);
            proptest::prop_assume!(q.norm() > 1e-3);
            let q = q.normalized();
            let v = Vec3::new(vx, vy, vz);
            let rotated = q.rotate(v);
            proptest::prop_assert!((rotated.norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
        }

        #[test]
        fn boxplus_boxminus_round_trip(
            wx in -1.0f64..1.0, xx in -1.0f64..1.0, yx in -1.0f64..1.0, zx in -1.0f64..1.0,
            tx in -0.057f64..0.057, ty in -0.057f64..0.057, tz in -0.057f64..0.057,
        ) {
            let q = Quaternion::new(wx, xx, yx, zx);
            proptest::prop_assume!(q.norm() > 1e-3);
            let q = q.normalized();
            // ‖θ‖ ≤ 0.1 rad by construction of the component ranges.
            let theta = Vec3::new(tx, ty, tz);
            let recovered = q.boxplus(theta).boxminus(&q);
            proptest::prop_assert!((recovered - theta).norm() <= 1e-10);
        }
    }
}
