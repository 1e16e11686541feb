//! IMU pre-integration between consecutive keyframes.
//!
//! Measurements are summarized into deltas that are independent of the
//! absolute start state:
//!
//! ```text
//! α_{i+1} = α_i + β_i δt + ½ R(γ_i)(f̂_i − b_f) δt²      (position delta, m)
//! β_{i+1} = β_i + R(γ_i)(f̂_i − b_f) δt                  (velocity delta, m/s)
//! γ_{i+1} = γ_i ⊗ [1, ½(ω̂_i − b_ω) δt]                  (attitude delta)
//! ```
//!
//! alongside a 15×15 first-order error-state covariance
//! `P ← (I + F δt) P (I + F δt)ᵀ + (G δt) Q̂ (G δt)ᵀ` and a bias Jacobian
//! `J ← (I + F δt) J`, both in error order (δα, δβ, δθ, δb_f, δb_ω).
//!
//! Conventions pinned by the round-trip test at the bottom of this file:
//! world frame z-up with `g_w = [0, 0, 9.81]`, accelerometer specific force
//! `f̂ = R_w^b (a_w + g_w) + b_f + n_f` (reads +9.81 on the body z axis at
//! rest, level), navigation update `v̇ = R(q) (f̂ − b_f) − g_w`. Per-sample
//! noise n has standard deviation σ directly (the δt factor lives in the
//! discrete covariance update), and the bias random walk steps by
//! `b ← b + n_b δt` with n_b of standard deviation σ_b.

use crate::geometry::{quat_multiply, skew, Mat3, Quaternion, Vec3};
use nalgebra::{SMatrix, SVector};
use thiserror::Error;

/// 15-dimensional error-state vector (δα, δβ, δθ, δb_f, δb_ω).
pub type Vec15 = SVector<f64, 15>;
/// Error-state covariance / Jacobian shape.
pub type Mat15 = SMatrix<f64, 15, 15>;
/// Noise-routing matrix shape (error state × noise vector).
pub type Mat15x12 = SMatrix<f64, 15, 12>;
/// Process-noise covariance shape, block order (n_f, n_ω, n_bf, n_bω).
pub type Mat12 = SMatrix<f64, 12, 12>;

/// Largest admissible spacing between consecutive samples; anything longer
/// means the stream dropped samples and first-order propagation is unsafe.
pub const MAX_SAMPLE_STEP: f64 = 0.1;

/// World gravity vector, z-up.
pub fn gravity_w() -> Vec3 {
    Vec3::new(0.0, 0.0, 9.81)
}

#[derive(Debug, Error, PartialEq)]
pub enum PreintegrationError {
    #[error("non-positive sample spacing dt = {dt} s")]
    NonPositiveStep { dt: f64 },
    #[error("sample spacing dt = {dt} s exceeds {max} s; stream has dropped samples")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("process-noise sigma must be positive and finite; {block} contains {value}")]
    InvalidSigma { block: &'static str, value: f64 },
}

/// One timestamped IMU reading in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Timestamp, seconds.
    pub t: f64,
    /// Specific force, m/s².
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

impl ImuSample {
    pub fn new(t: f64, accel: Vec3, gyro: Vec3) -> Self {
        Self { t, accel, gyro }
    }
}

/// Per-axis process-noise levels. `accel`/`gyro` are the adaptive quantities
/// (updatable between propagation steps); the bias-walk levels stay constant
/// for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSigmas {
    /// Accelerometer noise σ_f per axis, m/s².
    pub accel: Vec3,
    /// Gyroscope noise σ_ω per axis, rad/s.
    pub gyro: Vec3,
    /// Accelerometer bias-walk σ_bf per axis, m/s²·s⁻¹ᐟ².
    pub accel_bias: Vec3,
    /// Gyroscope bias-walk σ_bω per axis, rad/s·s⁻¹ᐟ².
    pub gyro_bias: Vec3,
}

impl NoiseSigmas {
    pub fn new(accel: Vec3, gyro: Vec3, accel_bias: Vec3, gyro_bias: Vec3) -> Self {
        Self {
            accel,
            gyro,
            accel_bias,
            gyro_bias,
        }
    }

    /// Same level on all three axes of each block.
    pub fn uniform(accel: f64, gyro: f64, accel_bias: f64, gyro_bias: f64) -> Self {
        Self::new(
            Vec3::repeat(accel),
            Vec3::repeat(gyro),
            Vec3::repeat(accel_bias),
            Vec3::repeat(gyro_bias),
        )
    }

    pub fn validate(&self) -> Result<(), PreintegrationError> {
        for (block, v) in [
            ("accel", &self.accel),
            ("gyro", &self.gyro),
            ("accel_bias", &self.accel_bias),
            ("gyro_bias", &self.gyro_bias),
        ] {
            for &value in v.iter() {
                if !(value > 0.0) || !value.is_finite() {
                    return Err(PreintegrationError::InvalidSigma { block, value });
                }
            }
        }
        Ok(())
    }
}

/// Full navigation state of one keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// Position in the world frame, m.
    pub p: Vec3,
    /// Attitude, body to world.
    pub q: Quaternion,
    /// Velocity in the world frame, m/s.
    pub v: Vec3,
    /// Accelerometer bias, m/s².
    pub bias_accel: Vec3,
    /// Gyroscope bias, rad/s.
    pub bias_gyro: Vec3,
}

impl NavState {
    pub fn new(p: Vec3, q: Quaternion, v: Vec3, bias_accel: Vec3, bias_gyro: Vec3) -> Self {
        Self {
            p,
            q,
            v,
            bias_accel,
            bias_gyro,
        }
    }

    /// Manifold update with explicit per-block increments; the caller owns
    /// the flat error-vector ordering.
    pub fn retract(
        &self,
        dp: Vec3,
        dtheta: Vec3,
        dv: Vec3,
        dbias_accel: Vec3,
        dbias_gyro: Vec3,
    ) -> Self {
        Self {
            p: self.p + dp,
            q: self.q.boxplus(dtheta),
            v: self.v + dv,
            bias_accel: self.bias_accel + dbias_accel,
            bias_gyro: self.bias_gyro + dbias_gyro,
        }
    }
}

/// Pre-integrated deltas over one keyframe interval, with their error-state
/// covariance and the Jacobian of the deltas w.r.t. the linearization biases.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedDelta {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: Quaternion,
    /// Error-state covariance, order (δα, δβ, δθ, δb_f, δb_ω).
    pub covariance: Mat15,
    /// Jacobian of the error state w.r.t. its initial value; the bias
    /// columns feed the first-order bias correction.
    pub jacobian: Mat15,
    /// Accelerometer bias the deltas were integrated with.
    pub bias_accel_lin: Vec3,
    /// Gyroscope bias the deltas were integrated with.
    pub bias_gyro_lin: Vec3,
    /// Accumulated interval length, s.
    pub dt: f64,
}

impl PreintegratedDelta {
    /// Fresh interval: zero deltas, zero covariance, identity Jacobian.
    pub fn new(bias_accel_lin: Vec3, bias_gyro_lin: Vec3) -> Self {
        Self {
            alpha: Vec3::zeros(),
            beta: Vec3::zeros(),
            gamma: Quaternion::IDENTITY,
            covariance: Mat15::zeros(),
            jacobian: Mat15::identity(),
            bias_accel_lin,
            bias_gyro_lin,
            dt: 0.0,
        }
    }
}

/// Continuous-time error-state dynamics at the current delta and sample:
/// `δẋ = F δx + G n` with n = (n_f, n_ω, n_bf, n_bω).
pub fn error_state_matrices(delta: &PreintegratedDelta, s: &ImuSample) -> (Mat15, Mat15x12) {
    let r = delta.gamma.rotation_matrix();
    let f_unbiased = s.accel - delta.bias_accel_lin;
    let w_unbiased = s.gyro - delta.bias_gyro_lin;
    let eye = Mat3::identity();

    let mut f = Mat15::zeros();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&eye);
    f.fixed_view_mut::<3, 3>(3, 6)
        .copy_from(&(-r * skew(f_unbiased)));
    f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-r));
    f.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-skew(w_unbiased)));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-eye));

    let mut g = Mat15x12::zeros();
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-eye));
    g.fixed_view_mut::<3, 3>(9, 6).copy_from(&eye);
    g.fixed_view_mut::<3, 3>(12, 9).copy_from(&eye);

    (f, g)
}

/// Diagonal process-noise covariance Q̂ = diag(σ_f², σ_ω², σ_bf², σ_bω²).
pub fn build_process_noise(sigmas: &NoiseSigmas) -> Result<Mat12, PreintegrationError> {
    sigmas.validate()?;
    let mut q = Mat12::zeros();
    for axis in 0..3 {
        q[(axis, axis)] = sigmas.accel[axis] * sigmas.accel[axis];
        q[(3 + axis, 3 + axis)] = sigmas.gyro[axis] * sigmas.gyro[axis];
        q[(6 + axis, 6 + axis)] = sigmas.accel_bias[axis] * sigmas.accel_bias[axis];
        q[(9 + axis, 9 + axis)] = sigmas.gyro_bias[axis] * sigmas.gyro_bias[axis];
    }
    Ok(q)
}

/// Advance the deltas, covariance, and bias Jacobian by one sample interval
/// `[s_i.t, s_next.t]`, integrating the measurement taken at `s_i`.
pub fn propagate(
    delta: &PreintegratedDelta,
    s_i: &ImuSample,
    s_next: &ImuSample,
    sigmas: &NoiseSigmas,
) -> Result<PreintegratedDelta, PreintegrationError> {
    let dt = s_next.t - s_i.t;
    if dt <= 0.0 {
        return Err(PreintegrationError::NonPositiveStep { dt });
    }
    if dt > MAX_SAMPLE_STEP {
        return Err(PreintegrationError::StepTooLarge {
            dt,
            max: MAX_SAMPLE_STEP,
        });
    }
    let q_hat = build_process_noise(sigmas)?;
    let (f_mat, g_mat) = error_state_matrices(delta, s_i);

    let r = delta.gamma.rotation_matrix();
    let f_unbiased = s_i.accel - delta.bias_accel_lin;
    let w_unbiased = s_i.gyro - delta.bias_gyro_lin;
    let accel_bk = r * f_unbiased;

    let alpha = delta.alpha + delta.beta * dt + 0.5 * accel_bk * dt * dt;
    let beta = delta.beta + accel_bk * dt;
    let gamma = quat_multiply(&delta.gamma, &Quaternion::from_small_angle(w_unbiased * dt));

    let a_mat = Mat15::identity() + f_mat * dt;
    let g_dt = g_mat * dt;
    let mut covariance =
        a_mat * delta.covariance * a_mat.transpose() + g_dt * q_hat * g_dt.transpose();
    covariance = 0.5 * (covariance + covariance.transpose());
    let jacobian = a_mat * delta.jacobian;

    Ok(PreintegratedDelta {
        alpha,
        beta,
        gamma,
        covariance,
        jacobian,
        bias_accel_lin: delta.bias_accel_lin,
        bias_gyro_lin: delta.bias_gyro_lin,
        dt: delta.dt + dt,
    })
}

/// Propagate through a whole sample series; `samples[i] → samples[i+1]`
/// intervals in order.
pub fn propagate_series(
    bias_accel_lin: Vec3,
    bias_gyro_lin: Vec3,
    samples: &[ImuSample],
    sigmas: &NoiseSigmas,
) -> Result<PreintegratedDelta, PreintegrationError> {
    let mut delta = PreintegratedDelta::new(bias_accel_lin, bias_gyro_lin);
    for pair in samples.windows(2) {
        delta = propagate(&delta, &pair[0], &pair[1], sigmas)?;
    }
    Ok(delta)
}

/// Deltas corrected to first order for a bias estimate that moved away from
/// the linearization point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasCorrectedDelta {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: Quaternion,
    /// Set when either bias moved more than 0.1 (sensor units) from the
    /// linearization point; the first-order correction is unreliable and the
    /// caller should re-integrate.
    pub large_delta: bool,
}

/// First-order bias correction via the J sub-blocks:
/// `α' = α + J_bf^α δb_f + J_bω^α δb_ω`, β analogous,
/// `γ' = γ ⊗ [1, ½ J_bω^γ δb_ω]`.
pub fn correct_for_bias(
    delta: &PreintegratedDelta,
    bias_accel: Vec3,
    bias_gyro: Vec3,
) -> BiasCorrectedDelta {
    let db_f = bias_accel - delta.bias_accel_lin;
    let db_w = bias_gyro - delta.bias_gyro_lin;
    let j = &delta.jacobian;
    let j_alpha_bf = j.fixed_view::<3, 3>(0, 9);
    let j_alpha_bw = j.fixed_view::<3, 3>(0, 12);
    let j_beta_bf = j.fixed_view::<3, 3>(3, 9);
    let j_beta_bw = j.fixed_view::<3, 3>(3, 12);
    let j_gamma_bw = j.fixed_view::<3, 3>(6, 12);

    BiasCorrectedDelta {
        alpha: delta.alpha + j_alpha_bf * db_f + j_alpha_bw * db_w,
        beta: delta.beta + j_beta_bf * db_f + j_beta_bw * db_w,
        gamma: quat_multiply(
            &delta.gamma,
            &Quaternion::from_small_angle(j_gamma_bw * db_w),
        ),
        large_delta: db_f.norm() > 0.1 || db_w.norm() > 0.1,
    }
}

/// Inertial residual between keyframes k and k+1, rows (δα, δβ, δθ, δb_f,
/// δb_ω). Deltas are bias-corrected at `x_k`'s bias estimates first.
pub fn imu_residual(
    delta: &PreintegratedDelta,
    x_k: &NavState,
    x_k1: &NavState,
    g_w: Vec3,
) -> Vec15 {
    let corrected = correct_for_bias(delta, x_k.bias_accel, x_k.bias_gyro);
    let dt = delta.dt;
    // R_w^{b_k}: world into body k.
    let r_wk = x_k.q.rotation_matrix().transpose();

    let r_alpha = r_wk * (x_k1.p - x_k.p - x_k.v * dt + 0.5 * g_w * dt * dt) - corrected.alpha;
    let r_beta = r_wk * (x_k1.v - x_k.v + g_w * dt) - corrected.beta;
    let q_err = quat_multiply(
        &quat_multiply(&x_k.q.inverse(), &x_k1.q),
        &corrected.gamma.inverse(),
    );
    let r_theta = 2.0 * q_err.vector_part();

    let mut r = Vec15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_alpha);
    r.fixed_rows_mut::<3>(3).copy_from(&r_beta);
    r.fixed_rows_mut::<3>(6).copy_from(&r_theta);
    r.fixed_rows_mut::<3>(9)
        .copy_from(&(x_k1.bias_accel - x_k.bias_accel));
    r.fixed_rows_mut::<3>(12)
        .copy_from(&(x_k1.bias_gyro - x_k.bias_gyro));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const DT: f64 = 0.005;

    fn quiet_sigmas() -> NoiseSigmas {
        NoiseSigmas::uniform(0.08, 0.004, 1e-4, 1e-5)
    }

    /// Smooth deterministic test signal: bounded, non-constant, analytic.
    fn smooth_sample_at(t: f64) -> ImuSample {
        let accel = Vec3::new(
            1.2 * (2.0 * t).sin(),
            -0.7 * (1.3 * t + 0.4).cos(),
            0.5 * (0.8 * t).sin(),
        );
        let gyro = Vec3::new(
            0.3 * (1.7 * t).cos(),
            0.2 * (0.9 * t + 1.0).sin(),
            -0.4 * (1.1 * t).cos(),
        );
        ImuSample::new(t, accel, gyro)
    }

    fn smooth_series(n: usize) -> Vec<ImuSample> {
        (0..n).map(|i| smooth_sample_at(i as f64 * DT)).collect()
    }

    #[test]
    fn zero_input_keeps_deltas_at_identity() {
        let sig = quiet_sigmas();
        let mut delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros());
        for i in 0..50 {
            let s0 = ImuSample::new(i as f64 * DT, Vec3::zeros(), Vec3::zeros());
            let s1 = ImuSample::new((i + 1) as f64 * DT, Vec3::zeros(), Vec3::zeros());
            delta = propagate(&delta, &s0, &s1, &sig).unwrap();
        }
        assert_eq!(delta.alpha, Vec3::zeros());
        assert_eq!(delta.beta, Vec3::zeros());
        assert_eq!(delta.gamma, Quaternion::IDENTITY);
        assert_abs_diff_eq!(delta.dt, 50.0 * DT, epsilon = 1e-12);
    }

    #[test]
    fn constant_acceleration_matches_euler_summation_oracle() {
        // Oracle: the same recursion summed directly, scalar x axis only.
        let sig = quiet_sigmas();
        let f = Vec3::new(1.0, 0.0, 0.0);
        let mut delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros());
        let (mut alpha_oracle, mut beta_oracle) = (0.0f64, 0.0f64);
        for i in 0..200 {
            let s0 = ImuSample::new(i as f64 * DT, f, Vec3::zeros());
            let s1 = ImuSample::new((i + 1) as f64 * DT, f, Vec3::zeros());
            delta = propagate(&delta, &s0, &s1, &sig).unwrap();
            // Same δt sequence and evaluation order as the recursion, so the
            // comparison is bit-exact.
            let dt = s1.t - s0.t;
            alpha_oracle = (alpha_oracle + beta_oracle * dt) + 0.5 * dt * dt;
            beta_oracle += dt;
        }
        assert_abs_diff_eq!(delta.beta.x, beta_oracle, epsilon = 0.0);
        assert_abs_diff_eq!(delta.alpha.x, alpha_oracle, epsilon = 0.0);
        assert_abs_diff_eq!(delta.beta, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        // Euler with the ½δt² term integrates constant acceleration exactly.
        assert_abs_diff_eq!(delta.alpha.x, 0.5, epsilon = 1e-12);
        assert_eq!(delta.gamma, Quaternion::IDENTITY);
    }

    #[test]
    fn propagate_rejects_bad_spacing() {
        let sig = quiet_sigmas();
        let delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros());
        let s = |t| ImuSample::new(t, Vec3::zeros(), Vec3::zeros());
        assert!(matches!(
            propagate(&delta, &s(1.0), &s(1.0), &sig),
            Err(PreintegrationError::NonPositiveStep { .. })
        ));
        assert!(matches!(
            propagate(&delta, &s(1.0), &s(0.5), &sig),
            Err(PreintegrationError::NonPositiveStep { .. })
        ));
        assert!(matches!(
            propagate(&delta, &s(1.0), &s(1.2), &sig),
            Err(PreintegrationError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn error_state_matrices_zero_input_structure() {
        let delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros());
        let s = ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros());
        let (f, g) = error_state_matrices(&delta, &s);

        let mut f_expected = Mat15::zeros();
        f_expected
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&Mat3::identity());
        // With identity attitude, −R on the δb_f column is −I.
        f_expected
            .fixed_view_mut::<3, 3>(3, 9)
            .copy_from(&(-Mat3::identity()));
        f_expected
            .fixed_view_mut::<3, 3>(6, 12)
            .copy_from(&(-Mat3::identity()));
        assert_eq!(f, f_expected);

        let mut g_expected = Mat15x12::zeros();
        g_expected
            .fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-Mat3::identity()));
        g_expected
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(-Mat3::identity()));
        g_expected
            .fixed_view_mut::<3, 3>(9, 6)
            .copy_from(&Mat3::identity());
        g_expected
            .fixed_view_mut::<3, 3>(12, 9)
            .copy_from(&Mat3::identity());
        assert_eq!(g, g_expected);
    }

    /// Apply an error-state perturbation to a delta the way the covariance
    /// recursion models it: additive on α, β, biases; right-multiplicative
    /// small angle on γ.
    fn apply_error(delta: &PreintegratedDelta, dx: &Vec15) -> PreintegratedDelta {
        let mut out = delta.clone();
        out.alpha += dx.fixed_rows::<3>(0).into_owned();
        out.beta += dx.fixed_rows::<3>(3).into_owned();
        out.gamma = out.gamma.boxplus(dx.fixed_rows::<3>(6).into_owned());
        out.bias_accel_lin += dx.fixed_rows::<3>(9).into_owned();
        out.bias_gyro_lin += dx.fixed_rows::<3>(12).into_owned();
        out
    }

    /// Error between two deltas in the same parameterization.
    fn measure_error(perturbed: &PreintegratedDelta, nominal: &PreintegratedDelta) -> Vec15 {
        let mut dx = Vec15::zeros();
        dx.fixed_rows_mut::<3>(0)
            .copy_from(&(perturbed.alpha - nominal.alpha));
        dx.fixed_rows_mut::<3>(3)
            .copy_from(&(perturbed.beta - nominal.beta));
        dx.fixed_rows_mut::<3>(6)
            .copy_from(&perturbed.gamma.boxminus(&nominal.gamma));
        dx.fixed_rows_mut::<3>(9)
            .copy_from(&(perturbed.bias_accel_lin - nominal.bias_accel_lin));
        dx.fixed_rows_mut::<3>(12)
            .copy_from(&(perturbed.bias_gyro_lin - nominal.bias_gyro_lin));
        dx
    }

    #[test]
    fn discrete_transition_matches_finite_differences() {
        // (I + F δt) is the Jacobian of one propagate step w.r.t. the error
        // state, up to O(δt²); a small δt keeps that gap below tolerance.
        let sig = quiet_sigmas();
        let small_dt = 1e-4;
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut delta = PreintegratedDelta::new(
                Vec3::new(rng.gen_range(-0.05..0.05), 0.0, 0.02),
                Vec3::new(0.0, rng.gen_range(-0.005..0.005), 0.001),
            );
            // Random but valid interior state.
            delta.alpha = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.3);
            delta.beta = Vec3::new(0.2, rng.gen_range(-1.0..1.0), -0.4);
            delta.gamma = crate::geometry::Quaternion::from_axis_angle(
                Vec3::new(rng.gen_range(-1.0..1.0), 0.7, -0.2),
                rng.gen_range(-1.0..1.0),
            );
            let s0 = ImuSample::new(
                0.0,
                Vec3::new(rng.gen_range(-5.0..5.0), 2.0, -9.0),
                Vec3::new(0.3, rng.gen_range(-2.0..2.0), -0.8),
            );
            let s1 = ImuSample::new(small_dt, s0.accel, s0.gyro);

            let (f_mat, _) = error_state_matrices(&delta, &s0);
            let a_mat = Mat15::identity() + f_mat * small_dt;

            let nominal = propagate(&delta, &s0, &s1, &sig).unwrap();
            let mut fd = Mat15::zeros();
            for col in 0..15 {
                let mut dx = Vec15::zeros();
                dx[col] = eps;
                let plus = propagate(&apply_error(&delta, &dx), &s0, &s1, &sig).unwrap();
                dx[col] = -eps;
                let minus = propagate(&apply_error(&delta, &dx), &s0, &s1, &sig).unwrap();
                let diff = (measure_error(&plus, &nominal) - measure_error(&minus, &nominal))
                    / (2.0 * eps);
                fd.set_column(col, &diff);
            }
            let rel = (a_mat - fd).norm() / a_mat.norm();
            assert!(rel < 1e-5, "discrete transition vs FD: rel = {rel:.3e}");
        }
    }

    /// Forward-simulate a delta with a given bias over the smooth series.
    fn integrate_with_bias(samples: &[ImuSample], b_f: Vec3, b_w: Vec3) -> PreintegratedDelta {
        propagate_series(b_f, b_w, samples, &quiet_sigmas()).unwrap()
    }

    /// Smooth series resampled at an arbitrary interval.
    fn smooth_series_at(dt: f64, duration: f64) -> Vec<ImuSample> {
        let n = (duration / dt).round() as usize;
        (0..=n).map(|i| smooth_sample_at(i as f64 * dt)).collect()
    }

    #[test]
    fn beta_bias_jacobian_is_exact() {
        // β is linear in b_f with the attitude trajectory independent of it,
        // so the J sub-block must match a central difference of full
        // re-propagation to near machine precision.
        let samples = smooth_series(101);
        let nominal = integrate_with_bias(&samples, Vec3::zeros(), Vec3::zeros());
        let j_beta_bf = nominal.jacobian.fixed_view::<3, 3>(3, 9).into_owned();
        let eps = 1e-5;
        let mut fd = Mat3::zeros();
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = eps;
            let plus = integrate_with_bias(&samples, e, Vec3::zeros());
            let minus = integrate_with_bias(&samples, -e, Vec3::zeros());
            fd.set_column(axis, &((plus.beta - minus.beta) / (2.0 * eps)));
        }
        let rel = (fd - j_beta_bf).norm() / j_beta_bf.norm();
        assert!(rel < 1e-9, "J_β,bf vs re-propagation FD: rel = {rel:.3e}");
    }

    #[test]
    fn bias_correction_tracks_repropagation() {
        // The J recursion is first order in δt, so the correction error at a
        // fixed bias perturbation carries an O(δt) floor: halving the sample
        // interval must roughly halve the error, and the error itself stays
        // far below the perturbation's effect on the deltas.
        let duration = 0.5;
        let cases = [
            (Vec3::new(1e-3, -2e-3, 0.5e-3), Vec3::zeros()),
            (Vec3::zeros(), Vec3::new(-0.4e-3, 0.2e-3, 0.6e-3)),
            (Vec3::new(0.8e-3, 0.4e-3, -0.6e-3), Vec3::new(0.3e-3, -0.5e-3, 0.2e-3)),
        ];
        for (db_f, db_w) in cases {
            let err_at = |dt: f64| -> f64 {
                let samples = smooth_series_at(dt, duration);
                let nominal = integrate_with_bias(&samples, Vec3::zeros(), Vec3::zeros());
                let corrected = correct_for_bias(&nominal, db_f, db_w);
                let reprop = integrate_with_bias(&samples, db_f, db_w);
                let effect = (nominal.alpha - reprop.alpha).norm()
                    + (nominal.beta - reprop.beta).norm()
                    + nominal.gamma.boxminus(&reprop.gamma).norm();
                let err = (corrected.alpha - reprop.alpha).norm()
                    + (corrected.beta - reprop.beta).norm()
                    + corrected.gamma.boxminus(&reprop.gamma).norm();
                // The correction must remove almost all of the bias effect.
                assert!(
                    err < 0.02 * effect,
                    "correction left {err:.3e} of a {effect:.3e} bias effect"
                );
                err
            };
            let e_coarse = err_at(DT);
            let e_fine = err_at(DT / 2.0);
            assert!(e_coarse < 1e-5, "correction error too large: {e_coarse:.3e}");
            let ratio = e_coarse / e_fine;
            assert!(
                (1.4..3.5).contains(&ratio),
                "correction error not first order in δt: ratio = {ratio:.3}"
            );
        }
    }

    #[test]
    fn bias_correction_identity_at_zero_delta() {
        let samples = smooth_series(51);
        let b_f = Vec3::new(0.01, -0.02, 0.005);
        let b_w = Vec3::new(0.002, 0.001, -0.003);
        let delta = integrate_with_bias(&samples, b_f, b_w);
        let corrected = correct_for_bias(&delta, b_f, b_w);
        assert_eq!(corrected.alpha, delta.alpha);
        assert_eq!(corrected.beta, delta.beta);
        assert_eq!(corrected.gamma, delta.gamma);
        assert!(!corrected.large_delta);
    }

    #[test]
    fn bias_correction_flags_large_excursions() {
        let samples = smooth_series(11);
        let delta = integrate_with_bias(&samples, Vec3::zeros(), Vec3::zeros());
        let corrected = correct_for_bias(&delta, Vec3::new(0.2, 0.0, 0.0), Vec3::zeros());
        assert!(corrected.large_delta);
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let sig = NoiseSigmas::uniform(0.16, 0.008, 1e-3, 1e-4);
        let samples = smooth_series(1001);
        let mut delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros());
        for pair in samples.windows(2) {
            delta = propagate(&delta, &pair[0], &pair[1], &sig).unwrap();
        }
        let p = delta.covariance;
        assert_abs_diff_eq!(p, p.transpose(), epsilon = 0.0);
        let eigs = p.symmetric_eigenvalues();
        assert!(
            eigs.min() >= -1e-10,
            "covariance lost PSD: min eig = {:.3e}",
            eigs.min()
        );
    }

    #[test]
    fn doubling_sigmas_quadruples_covariance() {
        let samples = smooth_series(201);
        let base = NoiseSigmas::uniform(0.04, 0.002, 2e-4, 2e-5);
        let doubled = NoiseSigmas::uniform(0.08, 0.004, 4e-4, 4e-5);
        let p1 = propagate_series(Vec3::zeros(), Vec3::zeros(), &samples, &base)
            .unwrap()
            .covariance;
        let p2 = propagate_series(Vec3::zeros(), Vec3::zeros(), &samples, &doubled)
            .unwrap()
            .covariance;
        assert!((p2 - p1 * 4.0).norm() <= 1e-14 * p2.norm());
    }

    #[test]
    fn accel_noise_routes_into_beta_block_only() {
        // Monte-Carlo over a short interval: inject accelerometer noise only
        // and compare empirical block variances against P̂. First order, the
        // attitude and bias blocks stay exactly at zero.
        let steps = 5;
        let sigma_f = 0.1;
        let sig = NoiseSigmas::new(
            Vec3::repeat(sigma_f),
            Vec3::repeat(1e-12),
            Vec3::repeat(1e-12),
            Vec3::repeat(1e-12),
        );
        let clean = smooth_series(steps + 1);
        let nominal = propagate_series(Vec3::zeros(), Vec3::zeros(), &clean, &sig).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dist = Normal::new(0.0, sigma_f).unwrap();
        let runs = 4000;
        let mut acc = Mat15::zeros();
        for _ in 0..runs {
            let noisy: Vec<ImuSample> = clean
                .iter()
                .map(|s| {
                    let n = Vec3::new(
                        dist.sample(&mut rng),
                        dist.sample(&mut rng),
                        dist.sample(&mut rng),
                    );
                    ImuSample::new(s.t, s.accel + n, s.gyro)
                })
                .collect();
            let d = propagate_series(Vec3::zeros(), Vec3::zeros(), &noisy, &sig).unwrap();
            let e = measure_error(&d, &nominal);
            acc += e * e.transpose();
        }
        let sample_cov = acc / runs as f64;

        // β block dominates and matches prediction within MC tolerance.
        let beta_pred = nominal.covariance.fixed_view::<3, 3>(3, 3).into_owned();
        let beta_mc = sample_cov.fixed_view::<3, 3>(3, 3).into_owned();
        let rel = (beta_mc - beta_pred).norm() / beta_pred.norm();
        assert!(rel < 0.15, "β-block MC mismatch: rel = {rel:.3}");
        // Attitude and bias blocks see no accel noise (the tiny attitude
        // residue is quaternion-product rounding dust, not signal).
        assert!(sample_cov.fixed_view::<3, 3>(6, 6).norm() < 1e-30);
        assert_eq!(sample_cov.fixed_view::<6, 6>(9, 9).norm(), 0.0);
    }

    #[test]
    fn process_noise_matrix_squares_entries() {
        let q = build_process_noise(&NoiseSigmas::uniform(0.08, 0.004, 1e-4, 1e-5)).unwrap();
        for axis in 0..3 {
            assert_abs_diff_eq!(q[(axis, axis)], 0.0064, epsilon = 1e-18);
        }
        let eye = build_process_noise(&NoiseSigmas::uniform(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(eye, Mat12::identity());

        let asym = NoiseSigmas::new(
            Vec3::new(0.01, 0.21, 0.05),
            Vec3::repeat(0.001),
            Vec3::repeat(1e-4),
            Vec3::repeat(1e-5),
        );
        let q = build_process_noise(&asym).unwrap();
        assert_abs_diff_eq!(q[(0, 0)], 0.01f64.powi(2), epsilon = 0.0);
        assert_abs_diff_eq!(q[(1, 1)], 0.21f64.powi(2), epsilon = 0.0);
        assert_abs_diff_eq!(q[(2, 2)], 0.05f64.powi(2), epsilon = 0.0);
    }

    #[test]
    fn process_noise_rejects_non_positive_sigma() {
        let mut sig = quiet_sigmas();
        sig.gyro.y = 0.0;
        assert!(matches!(
            build_process_noise(&sig),
            Err(PreintegrationError::InvalidSigma { block: "gyro", .. })
        ));
        sig = quiet_sigmas();
        sig.accel.z = -0.1;
        assert!(build_process_noise(&sig).is_err());
    }

    /// Integrate the navigation state forward with the same Euler scheme the
    /// pre-integration uses; the shared scheme is what makes the round trip
    /// exact rather than merely O(δt)-consistent.
    fn navigate(
        start: &NavState,
        samples: &[ImuSample],
        b_f_true: Vec3,
        b_w_true: Vec3,
        g_w: Vec3,
    ) -> NavState {
        let mut x = *start;
        for pair in samples.windows(2) {
            let dt = pair[1].t - pair[0].t;
            let accel_w = x.q.rotate(pair[0].accel - b_f_true) - g_w;
            let omega = pair[0].gyro - b_w_true;
            x.p += x.v * dt + 0.5 * accel_w * dt * dt;
            x.v += accel_w * dt;
            x.q = quat_multiply(&x.q, &Quaternion::from_small_angle(omega * dt));
        }
        x
    }

    #[test]
    fn noise_free_round_trip_residual_vanishes() {
        // The sign-convention pin: a noise-free IMU stream synthesized from
        // the measurement model, integrated to states by the plain strapdown
        // update, must zero the residual regardless of the start state.
        let g_w = gravity_w();
        let b_f = Vec3::new(0.02, -0.01, 0.015);
        let b_w = Vec3::new(0.001, 0.002, -0.0015);
        let mut rng = ChaCha8Rng::seed_from_u64(31);

        for trial in 0..4 {
            let start = NavState::new(
                Vec3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ),
                random_start_quat(&mut rng),
                Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
                b_f,
                b_w,
            );

            // True world-frame acceleration/rate profiles; measurements follow
            // the model f̂ = R_w^b (a_w + g_w) + b_f, ω̂ = ω + b_ω.
            let n = 200;
            let mut samples = Vec::with_capacity(n + 1);
            let mut q = start.q;
            for i in 0..=n {
                let t = i as f64 * DT;
                let a_w = Vec3::new(
                    0.8 * (1.1 * t + trial as f64).sin(),
                    -0.5 * (0.7 * t).cos(),
                    0.3 * (1.9 * t).sin(),
                );
                let omega = Vec3::new(
                    0.2 * (1.3 * t).cos(),
                    -0.3 * (0.8 * t + 0.5).sin(),
                    0.25 * (1.6 * t).cos(),
                );
                let f_hat = q.rotation_matrix().transpose() * (a_w + g_w) + b_f;
                samples.push(ImuSample::new(t, f_hat, omega + b_w));
                q = quat_multiply(&q, &Quaternion::from_small_angle(omega * DT));
            }

            let x_end = navigate(&start, &samples, b_f, b_w, g_w);
            let delta = propagate_series(b_f, b_w, &samples, &quiet_sigmas()).unwrap();
            let r = imu_residual(&delta, &start, &x_end, g_w);
            assert!(
                r.amax() <= 1e-9,
                "round-trip residual too large: {:.3e}",
                r.amax()
            );
        }
    }

    pub(crate) fn random_start_quat(rng: &mut impl Rng) -> Quaternion {
        Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalized()
    }

    #[test]
    fn residual_trivial_cases() {
        let x = NavState::new(
            Vec3::new(1.0, 2.0, 3.0),
            Quaternion::IDENTITY,
            Vec3::zeros(),
            Vec3::zeros(),
            Vec3::zeros(),
        );
        let mut delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros());
        delta.dt = 0.7;
        let r = imu_residual(&delta, &x, &x, Vec3::zeros());
        assert_eq!(r, Vec15::zeros());
    }

    #[test]
    fn residual_bias_rows_are_state_differences() {
        let samples = smooth_series(21);
        let delta = integrate_with_bias(&samples, Vec3::zeros(), Vec3::zeros());
        let x_k = NavState::new(
            Vec3::zeros(),
            Quaternion::IDENTITY,
            Vec3::zeros(),
            Vec3::new(0.01, 0.02, 0.03),
            Vec3::new(0.001, 0.002, 0.003),
        );
        let x_k1 = x_k;
        let base = imu_residual(&delta, &x_k, &x_k1, gravity_w());

        let eps = Vec3::new(1e-3, -2e-3, 3e-3);
        let mut bumped = x_k1;
        bumped.bias_accel += eps;
        bumped.bias_gyro += 2.0 * eps;
        let r = imu_residual(&delta, &x_k, &bumped, gravity_w());

        assert_abs_diff_eq!(
            r.fixed_rows::<3>(9).into_owned() - base.fixed_rows::<3>(9).into_owned(),
            eps,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            r.fixed_rows::<3>(12).into_owned() - base.fixed_rows::<3>(12).into_owned(),
            2.0 * eps,
            epsilon = 1e-15
        );
        // Rows above the bias blocks depend on x_k's biases only.
        assert_eq!(
            r.fixed_rows::<9>(0).into_owned(),
            base.fixed_rows::<9>(0).into_owned()
        );
    }

    #[test]
    fn propagate_series_is_deterministic() {
        let samples = smooth_series(101);
        let d1 = propagate_series(Vec3::zeros(), Vec3::zeros(), &samples, &quiet_sigmas()).unwrap();
        let d2 = propagate_series(Vec3::zeros(), Vec3::zeros(), &samples, &quiet_sigmas()).unwrap();
        assert_eq!(d1, d2);
    }
}
