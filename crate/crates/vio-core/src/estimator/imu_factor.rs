//! The inertial factor between consecutive keyframes: wraps a pre-integrated
//! delta, whitens by the square root of its information (Cholesky of the
//! propagated covariance), and supplies analytic residual Jacobians with
//! respect to both keyframe error states.
//!
//! The attitude rows differentiate the implemented residual
//! `r_θ = 2·vec((q_k⁻¹ ⊗ q_{k+1}) ⊗ γ_corr⁻¹)` exactly, including the
//! renormalization inside the small-angle bias correction; at a linearization
//! point with a nonzero bias excursion that term contributes at first order.

use nalgebra::SMatrix;

use crate::geometry::{quat_left_matrix, quat_right_matrix, skew, Vec3};
use crate::preintegration::{
    correct_for_bias, imu_residual, Mat15, NavState, NoiseSigmas, PreintegratedDelta, Vec15,
};

use super::EstimatorError;

type Mat4x3 = SMatrix<f64, 4, 3>;
type Mat3x4 = SMatrix<f64, 3, 4>;

/// `[I₃; 0ᵀ]`: embeds a vector as the xyz part of `[x,y,z,w]` coordinates.
fn vec_lift() -> Mat4x3 {
    let mut m = Mat4x3::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&nalgebra::Matrix3::identity());
    m
}

/// `[I₃ 0]`: extracts the xyz part of `[x,y,z,w]` coordinates.
fn vec_proj() -> Mat3x4 {
    let mut m = Mat3x4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&nalgebra::Matrix3::identity());
    m
}

/// Pre-integrated IMU constraint between window slots `from` and `to`.
#[derive(Debug, Clone)]
pub struct ImuFactor {
    pub delta: PreintegratedDelta,
    /// σ active while this factor was integrated; kept for inspection.
    pub sigmas: NoiseSigmas,
    pub from: usize,
    pub to: usize,
    pub gravity: Vec3,
    /// Lower Cholesky factor M of the delta covariance (P = M Mᵀ); whitening
    /// is the triangular solve M⁻¹(·).
    chol_l: Mat15,
}

impl ImuFactor {
    pub fn new(
        delta: PreintegratedDelta,
        sigmas: NoiseSigmas,
        from: usize,
        to: usize,
        gravity: Vec3,
    ) -> Result<Self, EstimatorError> {
        let chol = nalgebra::Cholesky::new(delta.covariance)
            .ok_or(EstimatorError::NonPsdWeight { from, to })?;
        Ok(Self {
            delta,
            sigmas,
            from,
            to,
            gravity,
            chol_l: chol.l(),
        })
    }

    /// Whitens a residual (or each Jacobian column): M⁻¹ x.
    pub fn whiten_vec(&self, r: &Vec15) -> Vec15 {
        self.chol_l
            .solve_lower_triangular(r)
            .expect("Cholesky factor is nonsingular by construction")
    }

    pub fn whiten_mat(&self, j: &Mat15) -> Mat15 {
        self.chol_l
            .solve_lower_triangular(j)
            .expect("Cholesky factor is nonsingular by construction")
    }

    /// Unwhitened residual at the given states.
    pub fn residual(&self, x_k: &NavState, x_k1: &NavState) -> Vec15 {
        imu_residual(&self.delta, x_k, x_k1, self.gravity)
    }

    /// Unwhitened residual plus Jacobians w.r.t. the error states of `x_k`
    /// and `x_k1` (columns `[δp, δθ, δv, δb_f, δb_ω]`).
    pub fn linearize(&self, x_k: &NavState, x_k1: &NavState) -> (Vec15, Mat15, Mat15) {
        let r = self.residual(x_k, x_k1);
        let dt = self.delta.dt;
        let g = self.gravity;
        let a = x_k.q.rotation_matrix().transpose();

        let s = x_k1.p - x_k.p - x_k.v * dt + 0.5 * g * dt * dt;
        let u = x_k1.v - x_k.v + g * dt;

        let jac = &self.delta.jacobian;
        let j_alpha_bf = jac.fixed_view::<3, 3>(0, 9).into_owned();
        let j_alpha_bw = jac.fixed_view::<3, 3>(0, 12).into_owned();
        let j_beta_bf = jac.fixed_view::<3, 3>(3, 9).into_owned();
        let j_beta_bw = jac.fixed_view::<3, 3>(3, 12).into_owned();
        let j_gamma_bw = jac.fixed_view::<3, 3>(6, 12).into_owned();

        let corrected = correct_for_bias(&self.delta, x_k.bias_accel, x_k.bias_gyro);
        let b = crate::geometry::quat_multiply(&x_k.q.inverse(), &x_k1.q);
        let c = corrected.gamma.inverse();
        let q_err = crate::geometry::quat_multiply(&b, &c);

        let lift = vec_lift();
        let proj = vec_proj();

        let mut j_k = Mat15::zeros();
        let mut j_k1 = Mat15::zeros();

        // r_α rows.
        j_k.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-a));
        j_k.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(a * s));
        j_k.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-a * dt));
        j_k.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-j_alpha_bf));
        j_k.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-j_alpha_bw));
        j_k1.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);

        // r_β rows.
        j_k.fixed_view_mut::<3, 3>(3, 3).copy_from(&skew(a * u));
        j_k.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-a));
        j_k.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-j_beta_bf));
        j_k.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-j_beta_bw));
        j_k1.fixed_view_mut::<3, 3>(3, 6).copy_from(&a);

        // r_θ rows: q_err = e(−δθ_k) ⊗ B ⊗ C when q_k is perturbed, and
        // B ⊗ e(δθ_{k+1}) ⊗ C when q_{k+1} is.
        let d_theta_k = -(proj * quat_right_matrix(&q_err) * lift);
        let d_theta_k1 = proj * quat_left_matrix(&b) * quat_right_matrix(&c) * lift;
        j_k.fixed_view_mut::<3, 3>(6, 3).copy_from(&d_theta_k);
        j_k1.fixed_view_mut::<3, 3>(6, 3).copy_from(&d_theta_k1);

        // r_θ w.r.t. δb_ω: through γ_corr = γ̂ ⊗ normalize([1, ½J δb]).
        {
            let db = x_k.bias_gyro - self.delta.bias_gyro_lin;
            let half = 0.5 * (j_gamma_bw * db);
            let u_q = nalgebra::Vector4::new(half.x, half.y, half.z, 1.0);
            let norm = u_q.norm();
            let n_hat = u_q / norm;
            let d_normalize =
                (nalgebra::Matrix4::identity() - n_hat * n_hat.transpose()) / norm;
            // conj in [x,y,z,w] coordinates.
            let conj = nalgebra::Matrix4::from_diagonal(&nalgebra::Vector4::new(
                -1.0, -1.0, -1.0, 1.0,
            ));
            let mut d_uq = Mat4x3::zeros();
            d_uq.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_gamma_bw);
            let d_theta_bw = proj
                * quat_left_matrix(&b)
                * quat_right_matrix(&self.delta.gamma.inverse())
                * conj
                * d_normalize
                * d_uq;
            j_k.fixed_view_mut::<3, 3>(6, 12).copy_from(&d_theta_bw);
        }

        // Bias random-walk rows.
        j_k.fixed_view_mut::<3, 3>(9, 9)
            .copy_from(&(-nalgebra::Matrix3::identity()));
        j_k1.fixed_view_mut::<3, 3>(9, 9)
            .copy_from(&nalgebra::Matrix3::identity());
        j_k.fixed_view_mut::<3, 3>(12, 12)
            .copy_from(&(-nalgebra::Matrix3::identity()));
        j_k1.fixed_view_mut::<3, 3>(12, 12)
            .copy_from(&nalgebra::Matrix3::identity());

        (r, j_k, j_k1)
    }
}
