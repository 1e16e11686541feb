//! Per-axis inertial noise regression: a pair of small 1-D CNNs (one per
//! sensor) mapping a 200-sample single-axis window to the noise standard
//! deviation of that window, trained from scratch with hand-written
//! backpropagation and Adam.

mod io;
mod model;
mod train;

pub use io::{load_model, save_model, ModelIoError};
pub use model::{Gradients, ModelConfig, ModelError, RegressorModel, SensorKind};
pub use train::{
    evaluate_mse, predict_sigmas, train, PredictError, TrainConfig, TrainError, TrainReport,
};

/// One training example: a single-axis window and the σ injected into it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    /// Raw samples of one axis of one sensor (m/s² or rad/s).
    pub samples: Vec<f64>,
    /// Injected noise standard deviation, same units as the samples.
    pub label: f64,
    pub sensor: SensorKind,
}
