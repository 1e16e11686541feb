//! Visual-inertial odometry backend with a learned inertial noise model.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: quaternion/rotation algebra (Hamilton, scalar-first).
//! * [`preintegration`]: IMU pre-integration between keyframes, with
//!   error-state covariance and bias Jacobians.
//! * [`sim`]: synthetic IMU + feature-track generator with ground truth.
//! * [`pipeline`]: raw IMU log → training examples (smoothing, windowing,
//!   noise injection, binary dataset files).
//! * [`noisenet`]: per-axis 1-D CNN that regresses process-noise levels from
//!   raw IMU windows, trained with hand-written backprop + Adam.
//! * [`estimator`]: sliding-window factor-graph odometry (IMU factors, visual
//!   factors, marginalization prior).
//! * [`eval`]: trajectory alignment and error metrics.

pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod noisenet;
pub mod pipeline;
pub mod preintegration;
pub mod sim;
