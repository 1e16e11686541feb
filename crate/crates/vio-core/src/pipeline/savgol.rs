//! Savitzky-Golay smoothing: least-squares polynomial convolution with
//! mirror padding at the edges.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SavGolError {
    #[error("window length {0} must be odd and at least 3")]
    BadWindow(usize),
    #[error("polynomial order {order} must be smaller than window length {window}")]
    BadOrder { order: usize, window: usize },
    #[error("signal of length {len} is shorter than the window {window}")]
    SignalTooShort { len: usize, window: usize },
}

/// Convolution weights for the central sample of a window: the value a
/// least-squares polynomial of `order` takes at the window center.
pub fn savgol_weights(window: usize, order: usize) -> Result<Vec<f64>, SavGolError> {
    if window < 3 || window % 2 == 0 {
        return Err(SavGolError::BadWindow(window));
    }
    if order >= window {
        return Err(SavGolError::BadOrder { order, window });
    }
    let half = (window / 2) as i64;
    // Vandermonde in the offset j = −h..h; weights = e₀ᵀ (AᵀA)⁻¹ Aᵀ.
    let a = DMatrix::from_fn(window, order + 1, |r, c| {
        ((r as i64 - half) as f64).powi(c as i32)
    });
    let ata = &a.transpose() * &a;
    let chol = ata
        .cholesky()
        .expect("normal equations PSD by construction");
    let mut e0 = DVector::zeros(order + 1);
    e0[0] = 1.0;
    let coeffs = chol.solve(&e0);
    Ok((&a * coeffs).iter().copied().collect())
}

/// Mirror index: reflects about the end samples without duplicating them,
/// so `[-1] → [1]` and `[n] → [n−2]`.
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    // A window never spans more than one reflection for valid inputs, but
    // iterate for safety with short signals.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Smooth one scalar signal; output length equals input length.
pub fn savitzky_golay(signal: &[f64], window: usize, order: usize) -> Result<Vec<f64>, SavGolError> {
    let weights = savgol_weights(window, order)?;
    if signal.len() < window {
        return Err(SavGolError::SignalTooShort {
            len: signal.len(),
            window,
        });
    }
    let half = (window / 2) as i64;
    let out = (0..signal.len() as i64)
        .map(|i| {
            weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * signal[mirror(i + k as i64 - half, signal.len())])
                .sum()
        })
        .collect();
    Ok(out)
}
