//! The per-axis regressor: three 1-D convolution blocks (conv → leaky ReLU →
//! layer norm), global average pooling over time, and a four-layer MLP, with
//! a positivity floor on the output. Forward and backward passes are written
//! out in closed form; the finite-difference gradient test in this file is
//! the contract for every layer's backward formula.
//!
//! Layer norm here normalizes across channels at each time position and
//! applies a per-channel scale and shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which sensor a model regresses; fixes units and the output floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Accel,
    Gyro,
}

impl SensorKind {
    /// Smallest σ the model may emit, in sensor units; keeps the process
    /// noise positive definite.
    pub fn sigma_floor(self) -> f64 {
        match self {
            SensorKind::Accel => 1e-4,
            SensorKind::Gyro => 1e-5,
        }
    }

    /// Mid-grid σ used to initialize the final bias so training does not
    /// start inside the clamped (zero-gradient) region.
    pub fn mid_grid_sigma(self) -> f64 {
        match self {
            SensorKind::Accel => 0.11,
            SensorKind::Gyro => 0.008,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("window length {found} does not match the model input length {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("window contains a non-finite sample at index {index}")]
    NonFinite { index: usize },
}

/// Architecture hyperparameters. The published architecture fixes the layer
/// kinds but not the sizes; these defaults are this artifact's choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_len: usize,
    /// Output channels of the three conv layers.
    pub conv_channels: [usize; 3],
    /// Odd kernel lengths of the three conv layers (same padding).
    pub kernels: [usize; 3],
    /// Widths of the four linear layers; the last must be 1.
    pub mlp_widths: [usize; 4],
    pub leaky_slope: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 200,
            conv_channels: [16, 32, 64],
            kernels: [7, 5, 3],
            mlp_widths: [64, 32, 16, 1],
            leaky_slope: 0.01,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Reduced architecture for the finite-difference gradient suite.
    pub fn down_scaled() -> Self {
        Self {
            input_len: 32,
            conv_channels: [8, 8, 8],
            kernels: [7, 5, 3],
            mlp_widths: [8, 8, 8, 1],
            ..Self::default()
        }
    }
}

/// Channels × time buffer, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub ch: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(ch: usize, len: usize) -> Self {
        Self {
            ch,
            len,
            data: vec![0.0; ch * len],
        }
    }

    #[inline]
    fn at(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.len + t]
    }

    #[inline]
    fn at_mut(&mut self, c: usize, t: usize) -> &mut f64 {
        &mut self.data[c * self.len + t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// Weights indexed `[out][in][k]`, flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    #[inline]
    fn w(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weight[(o * self.in_ch + i) * self.kernel + k]
    }

    /// Valid output range for a kernel tap: writing `y[t] += w · x[t + off]`
    /// requires `0 ≤ t + off < len`.
    #[inline]
    fn tap_range(len: usize, off: isize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (len as isize).min(len as isize - off).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let pad = (self.kernel - 1) / 2;
        let len = x.len;
        let mut y = Tensor::zeros(self.out_ch, len);
        for o in 0..self.out_ch {
            let y_row = &mut y.data[o * len..(o + 1) * len];
            y_row.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let x_row = &x.data[i * len..(i + 1) * len];
                for k in 0..self.kernel {
                    let w = self.w(o, i, k);
                    let off = k as isize - pad as isize;
                    let (lo, hi) = Self::tap_range(len, off);
                    let src = &x_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    for (yv, xv) in y_row[lo..hi].iter_mut().zip(src) {
                        *yv += w * xv;
                    }
                }
            }
        }
        y
    }

    /// Returns (dL/dx, dL/dw, dL/db) given upstream dL/dy.
    fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let pad = (self.kernel - 1) / 2;
        let len = x.len;
        let mut dx = Tensor::zeros(self.in_ch, len);
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_ch];
        for o in 0..self.out_ch {
            let dy_row = &dy.data[o * len..(o + 1) * len];
            db[o] = dy_row.iter().sum();
            for i in 0..self.in_ch {
                let x_row = &x.data[i * len..(i + 1) * len];
                let dx_row = &mut dx.data[i * len..(i + 1) * len];
                for k in 0..self.kernel {
                    let off = k as isize - pad as isize;
                    let (lo, hi) = Self::tap_range(len, off);
                    let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                    let mut acc = 0.0;
                    for (g, xv) in dy_row[lo..hi].iter().zip(&x_row[slo..shi]) {
                        acc += g * xv;
                    }
                    dw[(o * self.in_ch + i) * self.kernel + k] = acc;
                    let w = self.w(o, i, k);
                    for (dxv, g) in dx_row[slo..shi].iter_mut().zip(&dy_row[lo..hi]) {
                        *dxv += w * g;
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Weights indexed `[out][in]`, flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// One trained regressor (half of the dual pair).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    pub config: ModelConfig,
    pub sensor: SensorKind,
    pub(crate) convs: Vec<Conv1d>,
    pub(crate) norms: Vec<LayerNorm>,
    pub(crate) linears: Vec<Linear>,
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    input: Tensor,
    /// Per conv block: pre-activation, x̂, 1/√(var+ε), block output.
    conv_pre: Vec<Tensor>,
    ln_xhat: Vec<Tensor>,
    ln_inv_std: Vec<Vec<f64>>,
    ln_out: Vec<Tensor>,
    pooled: Vec<f64>,
    lin_pre: Vec<Vec<f64>>,
    lin_out: Vec<Vec<f64>>,
    pub raw: f64,
    pub sigma: f64,
}

impl Activations {
    /// Smallest |pre-activation| across every leaky-ReLU input; the gradient
    /// suite uses this to steer clear of the kink.
    pub(crate) fn min_abs_preactivation(&self) -> f64 {
        let conv = self
            .conv_pre
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let lin = self
            .lin_pre
            .iter()
            .flat_map(|v| v.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        conv.min(lin)
    }
}

/// Parameter gradients in the same tensor order as [`RegressorModel::tensors`].
pub type Gradients = Vec<Vec<f64>>;

impl RegressorModel {
    /// Seeded random initialization: He-style weights, unit layer-norm gain,
    /// final bias at the sensor's mid-grid σ.
    pub fn init(config: ModelConfig, sensor: SensorKind, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeroed(config, sensor);
        for conv in &mut model.convs {
            let std = (2.0 / (conv.in_ch * conv.kernel) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in &mut conv.weight {
                *w = dist.sample(&mut rng);
            }
        }
        for norm in &mut model.norms {
            norm.gain.fill(1.0);
        }
        for lin in &mut model.linears {
            let std = (2.0 / lin.in_dim as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in &mut lin.weight {
                *w = dist.sample(&mut rng);
            }
        }
        // He-scale weights at the output would swamp the mid-grid bias and
        // park most inputs under the σ floor, whose clamp has zero gradient;
        // damping them keeps every initial prediction in the live region.
        if let Some(last) = model.linears.last_mut() {
            for w in &mut last.weight {
                *w *= 0.01;
            }
        }
        *model
            .linears
            .last_mut()
            .unwrap()
            .bias
            .last_mut()
            .unwrap() = sensor.mid_grid_sigma();
        model
    }

    /// All parameters at zero (layer-norm gain included); mostly for tests.
    pub fn zeroed(config: ModelConfig, sensor: SensorKind) -> Self {
        assert_eq!(config.mlp_widths[3], 1, "final layer must emit one value");
        for k in config.kernels {
            assert!(k % 2 == 1, "kernels must be odd for same padding");
        }
        let convs = (0..3)
            .map(|i| {
                let in_ch = if i == 0 { 1 } else { config.conv_channels[i - 1] };
                let out_ch = config.conv_channels[i];
                Conv1d {
                    in_ch,
                    out_ch,
                    kernel: config.kernels[i],
                    weight: vec![0.0; out_ch * in_ch * config.kernels[i]],
                    bias: vec![0.0; out_ch],
                }
            })
            .collect();
        let norms = (0..3)
            .map(|i| LayerNorm {
                gain: vec![0.0; config.conv_channels[i]],
                bias: vec![0.0; config.conv_channels[i]],
            })
            .collect();
        let linears = (0..4)
            .map(|i| {
                let in_dim = if i == 0 {
                    config.conv_channels[2]
                } else {
                    config.mlp_widths[i - 1]
                };
                let out_dim = config.mlp_widths[i];
                Linear {
                    in_dim,
                    out_dim,
                    weight: vec![0.0; out_dim * in_dim],
                    bias: vec![0.0; out_dim],
                }
            })
            .collect();
        Self {
            config,
            sensor,
            convs,
            norms,
            linears,
        }
    }

    fn leaky(&self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            self.config.leaky_slope * v
        }
    }

    fn leaky_grad(&self, pre: f64) -> f64 {
        if pre > 0.0 {
            1.0
        } else {
            self.config.leaky_slope
        }
    }

    /// Predicted σ for one window, clamped to the sensor floor.
    pub fn forward(&self, window: &[f64]) -> Result<f64, ModelError> {
        Ok(self.forward_cached(window)?.sigma)
    }

    /// Prediction plus its analytic gradient w.r.t. every parameter, in
    /// [`Self::tensors`] order. Runs the same backward pass training uses,
    /// so external gradient checks can difference [`Self::forward`] against
    /// the returned gradients.
    pub fn prediction_gradients(&self, window: &[f64]) -> Result<(f64, Gradients), ModelError> {
        let acts = self.forward_cached(window)?;
        let sigma = acts.sigma;
        Ok((sigma, self.backward(&acts, 1.0)))
    }

    /// Distance of the forward pass from its nearest non-smooth point: the
    /// smallest |pre-activation| over every leaky-ReLU input, min-ed with
    /// the raw output's distance from the σ floor clamp. Near-zero values
    /// flag windows where finite differences straddle a kink.
    pub fn activation_margin(&self, window: &[f64]) -> Result<f64, ModelError> {
        let acts = self.forward_cached(window)?;
        let floor_gap = (acts.raw - self.sensor.sigma_floor()).abs();
        Ok(acts.min_abs_preactivation().min(floor_gap))
    }

    pub(crate) fn forward_cached(&self, window: &[f64]) -> Result<Activations, ModelError> {
        if window.len() != self.config.input_len {
            return Err(ModelError::WrongLength {
                expected: self.config.input_len,
                found: window.len(),
            });
        }
        if let Some(index) = window.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        let eps = self.config.layernorm_eps;
        let mut x = Tensor {
            ch: 1,
            len: window.len(),
            data: window.to_vec(),
        };

        let mut conv_pre = Vec::with_capacity(3);
        let mut ln_xhat = Vec::with_capacity(3);
        let mut ln_inv_std = Vec::with_capacity(3);
        let mut ln_out = Vec::with_capacity(3);
        let input = x.clone();

        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let pre = conv.forward(&x);
            let mut act = pre.clone();
            for v in &mut act.data {
                *v = self.leaky(*v);
            }
            // Layer norm across channels at each time position.
            let c = act.ch as f64;
            let mut xhat = Tensor::zeros(act.ch, act.len);
            let mut inv_std = vec![0.0; act.len];
            let mut out = Tensor::zeros(act.ch, act.len);
            for t in 0..act.len {
                let mut mean = 0.0;
                for ch in 0..act.ch {
                    mean += act.at(ch, t);
                }
                mean /= c;
                let mut var = 0.0;
                for ch in 0..act.ch {
                    let d = act.at(ch, t) - mean;
                    var += d * d;
                }
                var /= c;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[t] = is;
                for ch in 0..act.ch {
                    let h = (act.at(ch, t) - mean) * is;
                    *xhat.at_mut(ch, t) = h;
                    *out.at_mut(ch, t) = norm.gain[ch] * h + norm.bias[ch];
                }
            }
            conv_pre.push(pre);
            ln_xhat.push(xhat);
            ln_inv_std.push(inv_std);
            ln_out.push(out.clone());
            x = out;
        }

        // Global average pool over time.
        let pooled: Vec<f64> = (0..x.ch)
            .map(|c| (0..x.len).map(|t| x.at(c, t)).sum::<f64>() / x.len as f64)
            .collect();

        let mut h = pooled.clone();
        let mut lin_pre = Vec::with_capacity(4);
        let mut lin_out = Vec::with_capacity(4);
        for lin in &self.linears {
            let pre = lin.forward(&h);
            let post: Vec<f64> = pre.iter().map(|&v| self.leaky(v)).collect();
            lin_pre.push(pre);
            lin_out.push(post.clone());
            h = post;
        }
        let raw = h[0];
        let sigma = raw.max(self.sensor.sigma_floor());

        Ok(Activations {
            input,
            conv_pre,
            ln_xhat,
            ln_inv_std,
            ln_out,
            pooled,
            lin_pre,
            lin_out,
            raw,
            sigma,
        })
    }

    /// Backpropagate dL/dσ through the whole network; returns parameter
    /// gradients ordered like [`RegressorModel::tensors`].
    pub(crate) fn backward(&self, acts: &Activations, d_sigma: f64) -> Gradients {
        let mut grads: Gradients = self
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();

        // Clamp: zero gradient while the floor is active.
        let d = if acts.raw > self.sensor.sigma_floor() {
            d_sigma
        } else {
            0.0
        };

        // MLP backward. Tensor order per block: [conv.w, conv.b, ln.g, ln.b]
        // ×3 then [lin.w, lin.b] ×4 → linear block i sits at 12 + 2i.
        let mut dh = vec![d; 1];
        for i in (0..4).rev() {
            let lin = &self.linears[i];
            let pre = &acts.lin_pre[i];
            let upstream: Vec<f64> = dh
                .iter()
                .zip(pre)
                .map(|(g, &p)| g * self.leaky_grad(p))
                .collect();
            let x = if i == 0 {
                &acts.pooled
            } else {
                &acts.lin_out[i - 1]
            };
            {
                let gw = &mut grads[12 + 2 * i];
                for o in 0..lin.out_dim {
                    for (j, xv) in x.iter().enumerate() {
                        gw[o * lin.in_dim + j] += upstream[o] * xv;
                    }
                }
            }
            for (o, g) in upstream.iter().enumerate() {
                grads[12 + 2 * i + 1][o] += g;
            }
            let mut dx = vec![0.0; lin.in_dim];
            for o in 0..lin.out_dim {
                for j in 0..lin.in_dim {
                    dx[j] += upstream[o] * lin.weight[o * lin.in_dim + j];
                }
            }
            dh = dx;
        }

        // Un-pool: every time position shares the channel gradient equally.
        let last = &acts.ln_out[2];
        let mut dt = Tensor::zeros(last.ch, last.len);
        for c in 0..last.ch {
            let g = dh[c] / last.len as f64;
            for t in 0..last.len {
                *dt.at_mut(c, t) = g;
            }
        }

        // Conv blocks backward, newest first.
        for i in (0..3).rev() {
            let norm = &self.norms[i];
            let xhat = &acts.ln_xhat[i];
            let inv_std = &acts.ln_inv_std[i];
            let c_count = xhat.ch as f64;

            // Layer norm parameter and input gradients.
            {
                let gg = &mut grads[4 * i + 2];
                for c in 0..xhat.ch {
                    let mut acc = 0.0;
                    for t in 0..xhat.len {
                        acc += dt.at(c, t) * xhat.at(c, t);
                    }
                    gg[c] += acc;
                }
            }
            {
                let gb = &mut grads[4 * i + 3];
                for c in 0..xhat.ch {
                    let mut acc = 0.0;
                    for t in 0..xhat.len {
                        acc += dt.at(c, t);
                    }
                    gb[c] += acc;
                }
            }
            let mut d_act = Tensor::zeros(xhat.ch, xhat.len);
            for t in 0..xhat.len {
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for c in 0..xhat.ch {
                    let dxh = dt.at(c, t) * norm.gain[c];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat.at(c, t);
                }
                mean_dxhat /= c_count;
                mean_dxhat_xhat /= c_count;
                for c in 0..xhat.ch {
                    let dxh = dt.at(c, t) * norm.gain[c];
                    *d_act.at_mut(c, t) =
                        inv_std[t] * (dxh - mean_dxhat - xhat.at(c, t) * mean_dxhat_xhat);
                }
            }

            // Leaky ReLU.
            let pre = &acts.conv_pre[i];
            let mut d_pre = d_act;
            for c in 0..pre.ch {
                for t in 0..pre.len {
                    *d_pre.at_mut(c, t) *= self.leaky_grad(pre.at(c, t));
                }
            }

            // Convolution.
            let x = if i == 0 { &acts.input } else { &acts.ln_out[i - 1] };
            let (dx, dw, db) = self.convs[i].backward(x, &d_pre);
            for (g, v) in grads[4 * i].iter_mut().zip(dw) {
                *g += v;
            }
            for (g, v) in grads[4 * i + 1].iter_mut().zip(db) {
                *g += v;
            }
            dt = dx;
        }
        grads
    }

    /// Flat views of every parameter tensor, in a fixed documented order:
    /// `[conv.w, conv.b, ln.gain, ln.bias] × 3`, then `[lin.w, lin.b] × 4`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(20);
        for i in 0..3 {
            out.push(&self.convs[i].weight);
            out.push(&self.convs[i].bias);
            out.push(&self.norms[i].gain);
            out.push(&self.norms[i].bias);
        }
        for lin in &self.linears {
            out.push(&lin.weight);
            out.push(&lin.bias);
        }
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(20);
        let (convs, norms, linears) = (&mut self.convs, &mut self.norms, &mut self.linears);
        for (conv, norm) in convs.iter_mut().zip(norms.iter_mut()) {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
            out.push(&mut norm.gain);
            out.push(&mut norm.bias);
        }
        for lin in linears.iter_mut() {
            out.push(&mut lin.weight);
            out.push(&mut lin.bias);
        }
        out
    }

    /// Total parameter count.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
