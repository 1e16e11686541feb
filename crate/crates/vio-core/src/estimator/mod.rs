//! Sliding-window visual-inertial backend: pre-integrated IMU factors and
//! tangent-plane visual factors over a bounded set of keyframes, solved by
//! damped Gauss-Newton on the error-state manifold, with Schur-complement
//! marginalization keeping the window size constant.
//!
//! Error-state layout, used everywhere a keyframe is linearized:
//! `[δp (0..3), δθ (3..6), δv (6..9), δb_f (9..12), δb_ω (12..15)]`,
//! with attitude perturbed multiplicatively on the right
//! (`q ⊞ δθ = q ⊗ [1, δθ/2]`). Inverse depths are scalar parameters
//! appended after all keyframe blocks.

mod imu_factor;
mod marginal;
mod problem;
mod visual;
mod window;

pub use imu_factor::ImuFactor;
pub use marginal::{marginalize, GaussianPrior};
pub use problem::{solve_window, total_cost, Factor, SolveOutcome, SolverConfig, WindowProblem};
pub use visual::{tangent_basis, visual_residual, Extrinsics, VisualEval, VisualObservation};
pub use window::{
    AdaptiveSigmas, ConstantSigmas, RunnerConfig, SigmaProvider, SigmaRecord, SigmaStream,
    TrajectoryEstimate, VioRunner,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("factor between keyframes {from} and {to} has a non-positive-definite covariance")]
    NonPsdWeight { from: usize, to: usize },
    #[error("window holds {found} keyframes; at least 2 are required")]
    TooFewKeyframes { found: usize },
    #[error("marginalization requested but the window is not at capacity ({len} < {capacity})")]
    WindowNotFull { len: usize, capacity: usize },
    #[error("process-noise update rejected: {0}")]
    BadSigma(#[from] crate::preintegration::PreintegrationError),
    #[error("keyframe interval [{from_t}, {to_t}] contains no IMU samples")]
    EmptyInterval { from_t: f64, to_t: f64 },
}

/// Inverse depths are clamped here after every solve; keeps landmarks in
/// front of their anchor camera.
pub const MIN_INVERSE_DEPTH: f64 = 1e-6;
