//! Mini-batch training for the σ regressors and the inference entry point
//! used by the estimator.
//!
//! Determinism contract: with a fixed seed, the shuffle order, batch
//! composition, and every floating-point reduction are reproducible.
//! Per-batch gradients are computed on fixed-size chunks in parallel,
//! collected in index order, and folded sequentially, so thread scheduling
//! cannot change the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::preintegration::ImuSample;

use super::model::{Gradients, ModelConfig, ModelError, RegressorModel, SensorKind};
use super::LabeledWindow;

/// Examples handed to one rayon task; fixed so reductions are reproducible.
const GRAD_CHUNK: usize = 25;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error("example {index} is for {found:?} but the trainer is configured for {expected:?}")]
    SensorMismatch {
        index: usize,
        expected: SensorKind,
        found: SensorKind,
    },
    #[error("example {index} has a non-finite label")]
    NonFiniteLabel { index: usize },
    #[error("example {index} is unusable: {source}")]
    BadWindow {
        index: usize,
        source: ModelError,
    },
    #[error("training diverged at epoch {epoch} (non-finite loss); lower the learning rate")]
    Diverged { epoch: usize },
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("σ prediction needs {need} buffered samples but only {have} are available")]
    WarmUp { have: usize, need: usize },
    #[error("model trained for {found:?} supplied where {expected:?} was expected")]
    SensorMismatch {
        expected: SensorKind,
        found: SensorKind,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sensor: SensorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of examples held out for snapshot selection; 0 tracks the
    /// training loss instead.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_sensor(sensor: SensorKind) -> Self {
        Self {
            model: ModelConfig::default(),
            sensor,
            epochs: 200,
            batch_size: 200,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Per-epoch loss history; `best_epoch` indexes the snapshot returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: Vec<f64>,
    pub holdout_mse: Vec<f64>,
    pub best_epoch: usize,
    pub best_holdout_mse: f64,
    pub holdout_len: usize,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &RegressorModel, lr: f64) -> Self {
        let zeros: Gradients = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }

    fn apply(&mut self, model: &mut RegressorModel, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (ti, tensor) in model.tensors_mut().into_iter().enumerate() {
            for (pi, theta) in tensor.iter_mut().enumerate() {
                let g = grads[ti][pi];
                let m = &mut self.m[ti][pi];
                let v = &mut self.v[ti][pi];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

fn validate(windows: &[LabeledWindow], config: &TrainConfig) -> Result<(), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::Empty);
    }
    for (index, w) in windows.iter().enumerate() {
        if w.sensor != config.sensor {
            return Err(TrainError::SensorMismatch {
                index,
                expected: config.sensor,
                found: w.sensor,
            });
        }
        if !w.label.is_finite() {
            return Err(TrainError::NonFiniteLabel { index });
        }
        if w.samples.len() != config.model.input_len {
            return Err(TrainError::BadWindow {
                index,
                source: ModelError::WrongLength {
                    expected: config.model.input_len,
                    found: w.samples.len(),
                },
            });
        }
        if let Some(bad) = w.samples.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::BadWindow {
                index,
                source: ModelError::NonFinite { index: bad },
            });
        }
    }
    Ok(())
}

/// Sum of gradients and squared errors over one index chunk, sequential.
fn chunk_gradients(
    model: &RegressorModel,
    windows: &[LabeledWindow],
    chunk: &[usize],
    d_scale: f64,
) -> (Gradients, f64) {
    let mut total: Gradients = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut sq_err = 0.0;
    for &idx in chunk {
        let w = &windows[idx];
        // Validation already vetted every window.
        let acts = model.forward_cached(&w.samples).expect("validated window");
        let err = acts.sigma - w.label;
        sq_err += err * err;
        let grads = model.backward(&acts, d_scale * 2.0 * err);
        for (t, g) in total.iter_mut().zip(&grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    (total, sq_err)
}

/// Mean squared error of the model over a window set.
pub fn evaluate_mse(model: &RegressorModel, windows: &[LabeledWindow]) -> Result<f64, ModelError> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let errs: Vec<f64> = windows
        .par_iter()
        .map(|w| model.forward(&w.samples).map(|s| s - w.label))
        .collect::<Result<_, _>>()?;
    Ok(errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64)
}

/// Trains a regressor with Adam on mean squared σ error and returns the
/// snapshot with the lowest held-out MSE, plus the loss history.
pub fn train(
    windows: &[LabeledWindow],
    config: &TrainConfig,
) -> Result<(RegressorModel, TrainReport), TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    validate(windows, config)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let holdout_n = ((windows.len() as f64 * config.holdout_fraction) as usize)
        .min(windows.len().saturating_sub(1));
    let (holdout_idx, train_idx) = order.split_at(holdout_n);
    let holdout: Vec<LabeledWindow> = holdout_idx.iter().map(|&i| windows[i].clone()).collect();
    let mut train_idx: Vec<usize> = train_idx.to_vec();

    let mut model = RegressorModel::init(config.model.clone(), config.sensor, config.seed);
    let mut adam = Adam::new(&model, config.learning_rate);

    let mut report = TrainReport {
        train_mse: Vec::with_capacity(config.epochs),
        holdout_mse: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_holdout_mse: f64::INFINITY,
        holdout_len: holdout.len(),
    };
    let mut best = model.clone();

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_sq_err = 0.0;
        for batch in train_idx.chunks(config.batch_size.max(1)) {
            let d_scale = 1.0 / batch.len() as f64;
            let partials: Vec<(Gradients, f64)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| chunk_gradients(&model, windows, chunk, d_scale))
                .collect();
            let mut grads: Gradients =
                model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for (partial, sq) in partials {
                epoch_sq_err += sq;
                for (t, g) in grads.iter_mut().zip(&partial) {
                    for (a, b) in t.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            adam.apply(&mut model, &grads);
        }
        let train_mse = epoch_sq_err / train_idx.len() as f64;
        let holdout_mse = if holdout.is_empty() {
            // No held-out data: snapshot on a fresh pass over the train set.
            evaluate_mse(&model, &train_idx.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>())
                .expect("validated window")
        } else {
            evaluate_mse(&model, &holdout).expect("validated window")
        };
        if !train_mse.is_finite() || !holdout_mse.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        report.train_mse.push(train_mse);
        report.holdout_mse.push(holdout_mse);
        if holdout_mse < report.best_holdout_mse {
            report.best_holdout_mse = holdout_mse;
            report.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, report))
}

/// Runs both regressors over the trailing window of an IMU buffer and
/// returns per-axis (σ_accel, σ_gyro) predictions.
pub fn predict_sigmas(
    accel_model: &RegressorModel,
    gyro_model: &RegressorModel,
    buffer: &[ImuSample],
) -> Result<(Vec3, Vec3), PredictError> {
    if accel_model.sensor != SensorKind::Accel {
        return Err(PredictError::SensorMismatch {
            expected: SensorKind::Accel,
            found: accel_model.sensor,
        });
    }
    if gyro_model.sensor != SensorKind::Gyro {
        return Err(PredictError::SensorMismatch {
            expected: SensorKind::Gyro,
            found: gyro_model.sensor,
        });
    }
    let need = accel_model
        .config
        .input_len
        .max(gyro_model.config.input_len);
    if buffer.len() < need {
        return Err(PredictError::WarmUp {
            have: buffer.len(),
            need,
        });
    }

    let per_axis = |model: &RegressorModel,
                    take: &dyn Fn(&ImuSample, usize) -> f64|
     -> Result<Vec3, ModelError> {
        let tail = &buffer[buffer.len() - model.config.input_len..];
        let mut out = [0.0; 3];
        for (axis, slot) in out.iter_mut().enumerate() {
            let series: Vec<f64> = tail.iter().map(|s| take(s, axis)).collect();
            *slot = model.forward(&series)?;
        }
        Ok(Vec3::new(out[0], out[1], out[2]))
    };
    let sigma_accel = per_axis(accel_model, &|s, a| s.accel[a])?;
    let sigma_gyro = per_axis(gyro_model, &|s, a| s.gyro[a])?;
    Ok((sigma_accel, sigma_gyro))
}
