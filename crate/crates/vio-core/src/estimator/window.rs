//! Closed-loop sliding-window runner: schedules keyframes at a fixed camera
//! stride, queries a σ provider once per keyframe interval, integrates IMU
//! factors with the σ active at integration time, maintains feature tracks
//! in inverse depth, solves the window, and marginalizes the oldest keyframe
//! into a dense prior once the window is at capacity.
//!
//! The runner is single-writer; σ updates apply between keyframe steps, so a
//! factor always carries the covariance it was integrated with.

use std::collections::BTreeMap;
use std::io::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::geometry::{quat_multiply, Quaternion, Vec3};
use crate::noisenet::{predict_sigmas, RegressorModel};
use crate::preintegration::{gravity_w, propagate_series, ImuSample, NavState, NoiseSigmas};
use crate::sim::CameraFrame;

use super::imu_factor::ImuFactor;
use super::marginal::{marginalize, GaussianPrior};
use super::problem::{robust_weight, solve_window, Factor, SolverConfig, WindowProblem};
use super::visual::{visual_residual, Extrinsics};
use super::{EstimatorError, MIN_INVERSE_DEPTH};

/// Source of per-interval process-noise levels. Implementations see the
/// trailing IMU buffer (may be shorter than a model window early on) and
/// return per-axis (σ_f, σ_ω).
pub trait SigmaProvider {
    fn sigmas(&mut self, trailing: &[ImuSample]) -> (Vec3, Vec3);
}

/// Fixed σ for every interval: the constant-Q baseline.
#[derive(Debug, Clone)]
pub struct ConstantSigmas {
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl ConstantSigmas {
    pub fn uniform(accel: f64, gyro: f64) -> Self {
        Self {
            accel: Vec3::repeat(accel),
            gyro: Vec3::repeat(gyro),
        }
    }
}

impl SigmaProvider for ConstantSigmas {
    fn sigmas(&mut self, _trailing: &[ImuSample]) -> (Vec3, Vec3) {
        (self.accel, self.gyro)
    }
}

/// Externally scripted σ sequence, one entry per keyframe interval; the last
/// entry repeats once exhausted. Exercises the adaptive update path with
/// arbitrary values.
#[derive(Debug, Clone)]
pub struct SigmaStream {
    pub values: Vec<(Vec3, Vec3)>,
    cursor: usize,
}

impl SigmaStream {
    pub fn new(values: Vec<(Vec3, Vec3)>) -> Self {
        assert!(!values.is_empty(), "stream needs at least one entry");
        Self { values, cursor: 0 }
    }
}

impl SigmaProvider for SigmaStream {
    fn sigmas(&mut self, _trailing: &[ImuSample]) -> (Vec3, Vec3) {
        let i = self.cursor.min(self.values.len() - 1);
        self.cursor += 1;
        self.values[i]
    }
}

/// Network-driven σ: one prediction per keyframe interval on the trailing
/// buffer. Falls back to fixed values until the buffer fills (and on any
/// prediction failure), so the runner never stalls.
pub struct AdaptiveSigmas {
    pub accel_model: RegressorModel,
    pub gyro_model: RegressorModel,
    pub fallback_accel: Vec3,
    pub fallback_gyro: Vec3,
}

impl SigmaProvider for AdaptiveSigmas {
    fn sigmas(&mut self, trailing: &[ImuSample]) -> (Vec3, Vec3) {
        match predict_sigmas(&self.accel_model, &self.gyro_model, trailing) {
            Ok(pair) => pair,
            Err(_) => (self.fallback_accel, self.fallback_gyro),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunnerConfig {
    /// Maximum keyframes held in the window; one marginalization per new
    /// keyframe beyond this.
    pub window_capacity: usize,
    /// Camera frames per keyframe.
    pub keyframe_stride: usize,
    /// Trailing IMU samples handed to the σ provider.
    pub sigma_buffer: usize,
    /// Bias random-walk densities, constant across the run.
    pub walk_accel: f64,
    pub walk_gyro: f64,
    pub solver: SolverConfig,
    /// Anchor prior strengths on the first keyframe (gauge fixing).
    pub anchor_sigma_p: f64,
    pub anchor_sigma_theta: f64,
    pub anchor_sigma_v: f64,
    pub anchor_sigma_bias: f64,
    /// Depth assumed for features whose first two rays are near-parallel.
    pub default_depth: f64,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            window_capacity: 10,
            keyframe_stride: 10,
            sigma_buffer: 200,
            walk_accel: 1e-4,
            walk_gyro: 1e-5,
            solver: SolverConfig::default(),
            anchor_sigma_p: 1e-3,
            anchor_sigma_theta: 1e-3,
            anchor_sigma_v: 1e-2,
            anchor_sigma_bias: 1e-2,
            default_depth: 5.0,
        }
    }
}

/// Estimated keyframe trajectory; the export format is TUM
/// (`timestamp tx ty tz qx qy qz qw`, one pose per line).
#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    pub poses: Vec<(f64, Vec3, Quaternion)>,
}

impl TrajectoryEstimate {
    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for (t, p, q) in &self.poses {
            out.push_str(&format!(
                "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                t, p.x, p.y, p.z, q.x, q.y, q.z, q.w
            ));
        }
        out
    }

    pub fn write_tum(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_tum_string().as_bytes())
    }
}

/// σ actually applied to one keyframe interval (post-validation).
#[derive(Debug, Clone, Copy)]
pub struct SigmaRecord {
    pub t: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
}

struct Keyframe {
    t: f64,
    state: NavState,
}

struct FeatureTrack {
    /// (window slot, camera-frame bearing), ascending slot; first is anchor.
    sightings: Vec<(usize, Vec3)>,
    lambda: Option<f64>,
}

pub struct VioRunner {
    pub config: RunnerConfig,
    pub extrinsics: Extrinsics,
    noise: NoiseSigmas,
    keyframes: Vec<Keyframe>,
    /// imu_factors[i] connects window slot i to i+1.
    imu_factors: Vec<ImuFactor>,
    features: BTreeMap<u32, FeatureTrack>,
    prior: GaussianPrior,
    finalized: Vec<(f64, NavState)>,
    /// σ applied per interval, in keyframe order.
    pub sigma_trace: Vec<SigmaRecord>,
    pub warnings: Vec<String>,
}

impl VioRunner {
    pub fn new(
        config: RunnerConfig,
        extrinsics: Extrinsics,
        initial_accel_sigma: Vec3,
        initial_gyro_sigma: Vec3,
    ) -> Result<Self, EstimatorError> {
        let noise = NoiseSigmas::new(
            initial_accel_sigma,
            initial_gyro_sigma,
            Vec3::repeat(config.walk_accel),
            Vec3::repeat(config.walk_gyro),
        );
        noise.validate()?;
        Ok(Self {
            config,
            extrinsics,
            noise,
            keyframes: Vec::new(),
            imu_factors: Vec::new(),
            features: BTreeMap::new(),
            prior: GaussianPrior {
                keyframes: Vec::new(),
                lin_points: Vec::new(),
                jacobian: DMatrix::zeros(0, 0),
                residual0: DVector::zeros(0),
            },
            finalized: Vec::new(),
            sigma_trace: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Installs new per-axis noise levels for subsequent integration.
    /// Already-built factors keep the covariance they were integrated with.
    /// Non-positive or non-finite values are rejected: the previous levels
    /// stay active and a warning is recorded.
    pub fn update_process_noise(&mut self, sigma_accel: Vec3, sigma_gyro: Vec3) -> bool {
        let candidate = NoiseSigmas::new(
            sigma_accel,
            sigma_gyro,
            self.noise.accel_bias,
            self.noise.gyro_bias,
        );
        match candidate.validate() {
            Ok(()) => {
                self.noise = candidate;
                true
            }
            Err(e) => {
                self.warnings
                    .push(format!("process-noise update rejected: {e}"));
                false
            }
        }
    }

    /// Runs the full loop over a camera-frame sequence and its IMU stream.
    /// `initial` is the ground-truth state at the first camera frame (the
    /// harness initializes there; visual-inertial bootstrapping is out of
    /// scope). Keyframes are taken every `keyframe_stride` frames.
    pub fn run(
        &mut self,
        initial: NavState,
        imu: &[ImuSample],
        frames: &[CameraFrame],
        provider: &mut dyn SigmaProvider,
    ) -> Result<TrajectoryEstimate, EstimatorError> {
        let stride = self.config.keyframe_stride.max(1);
        let kf_frames: Vec<usize> = (0..frames.len()).step_by(stride).collect();
        if kf_frames.len() < 2 {
            return Err(EstimatorError::TooFewKeyframes {
                found: kf_frames.len(),
            });
        }

        self.keyframes.push(Keyframe {
            t: frames[kf_frames[0]].t,
            state: initial.clone(),
        });
        self.prior = GaussianPrior::anchor(
            0,
            &initial,
            self.config.anchor_sigma_p,
            self.config.anchor_sigma_theta,
            self.config.anchor_sigma_v,
            self.config.anchor_sigma_bias,
        );
        self.record_sightings(kf_frames[0], frames);

        for w in kf_frames.windows(2) {
            let (prev_frame, this_frame) = (w[0], w[1]);
            self.step(prev_frame, this_frame, imu, frames, provider)?;
            if self.keyframes.len() > self.config.window_capacity {
                self.marginalize_oldest();
            }
        }

        let mut poses: Vec<(f64, Vec3, Quaternion)> = self
            .finalized
            .iter()
            .map(|(t, x)| (*t, x.p, x.q))
            .collect();
        poses.extend(self.keyframes.iter().map(|k| (k.t, k.state.p, k.state.q)));
        Ok(TrajectoryEstimate { poses })
    }

    fn step(
        &mut self,
        prev_frame: usize,
        this_frame: usize,
        imu: &[ImuSample],
        frames: &[CameraFrame],
        provider: &mut dyn SigmaProvider,
    ) -> Result<(), EstimatorError> {
        let a = frames[prev_frame].imu_index;
        let b = frames[this_frame].imu_index;
        if b <= a + 1 {
            return Err(EstimatorError::EmptyInterval {
                from_t: frames[prev_frame].t,
                to_t: frames[this_frame].t,
            });
        }

        // σ for this interval: trailing buffer ends at the interval's last
        // sample, so the prediction sees the data it is weighting.
        let start = (b + 1).saturating_sub(self.config.sigma_buffer);
        let (sig_a, sig_g) = provider.sigmas(&imu[start..=b]);
        self.update_process_noise(sig_a, sig_g);
        self.sigma_trace.push(SigmaRecord {
            t: frames[this_frame].t,
            accel: self.noise.accel,
            gyro: self.noise.gyro,
        });

        let prev = self
            .keyframes
            .last()
            .expect("window holds at least the initial keyframe");
        let delta = propagate_series(
            prev.state.bias_accel,
            prev.state.bias_gyro,
            &imu[a..=b],
            &self.noise,
        )?;

        // Predicted state: the unique zero-residual successor of `prev`.
        let g = gravity_w();
        let dt = delta.dt;
        let r_prev = prev.state.q.rotation_matrix();
        let state = NavState {
            p: prev.state.p + prev.state.v * dt - 0.5 * g * dt * dt + r_prev * delta.alpha,
            v: prev.state.v - g * dt + r_prev * delta.beta,
            q: quat_multiply(&prev.state.q, &delta.gamma).normalized(),
            bias_accel: prev.state.bias_accel,
            bias_gyro: prev.state.bias_gyro,
        };

        let from = self.keyframes.len() - 1;
        self.imu_factors.push(ImuFactor::new(
            delta,
            self.noise.clone(),
            from,
            from + 1,
            g,
        )?);
        self.keyframes.push(Keyframe {
            t: frames[this_frame].t,
            state,
        });
        self.record_sightings(this_frame, frames);
        self.triangulate_new_tracks();
        self.solve_current_window()?;
        Ok(())
    }

    fn record_sightings(&mut self, frame: usize, frames: &[CameraFrame]) {
        let slot = self.keyframes.len() - 1;
        for obs in &frames[frame].observations {
            self.features
                .entry(obs.feature_id)
                .or_insert_with(|| FeatureTrack {
                    sightings: Vec::new(),
                    lambda: None,
                })
                .sightings
                .push((slot, obs.bearing));
        }
    }

    /// Assigns an initial inverse depth to tracks that just gained a second
    /// sighting: midpoint triangulation from the first two rays, or the
    /// configured default depth when the rays are near-parallel.
    fn triangulate_new_tracks(&mut self) {
        let default_lambda = 1.0 / self.config.default_depth;
        for track in self.features.values_mut() {
            if track.lambda.is_some() || track.sightings.len() < 2 {
                continue;
            }
            let (slot_a, bearing_a) = track.sightings[0];
            let (slot_b, bearing_b) = track.sightings[1];
            let depth = triangulate_depth(
                &self.keyframes[slot_a].state,
                bearing_a,
                &self.keyframes[slot_b].state,
                bearing_b,
                &self.extrinsics,
            );
            track.lambda = Some(match depth {
                Some(d) => (1.0 / d).max(MIN_INVERSE_DEPTH),
                None => default_lambda,
            });
        }
    }

    /// Builds the window problem from current bookkeeping, solves it, and
    /// writes the optimized states and depths back.
    fn solve_current_window(&mut self) -> Result<(), EstimatorError> {
        let states: Vec<NavState> = self.keyframes.iter().map(|k| k.state.clone()).collect();
        let mut factors: Vec<Factor> = Vec::new();
        if self.prior.dim() > 0 {
            factors.push(Factor::Prior(self.prior.clone()));
        }
        factors.extend(self.imu_factors.iter().cloned().map(Factor::Imu));

        // Deterministic feature ordering: ascending id.
        let mut inv_depths = Vec::new();
        let mut index_to_id = Vec::new();
        for (&id, track) in &self.features {
            let lambda = match track.lambda {
                Some(l) if track.sightings.len() >= 2 => l,
                _ => continue,
            };
            let feature = inv_depths.len();
            inv_depths.push(lambda);
            index_to_id.push(id);
            let (anchor, bearing_anchor) = track.sightings[0];
            for &(target, bearing_target) in &track.sightings[1..] {
                factors.push(Factor::Visual {
                    feature,
                    anchor,
                    target,
                    bearing_anchor,
                    bearing_target,
                });
            }
        }

        let mut problem = WindowProblem {
            states,
            inv_depths,
            extrinsics: self.extrinsics,
            factors,
        };
        let outcome = solve_window(&mut problem, &self.config.solver)?;
        if outcome.diverged {
            self.warnings.push(format!(
                "window solve at t={:.3} hit the damping cap; kept best iterate",
                self.keyframes.last().map_or(0.0, |k| k.t)
            ));
        }

        for (kf, state) in self.keyframes.iter_mut().zip(&problem.states) {
            kf.state = state.clone();
        }
        for (index, &id) in index_to_id.iter().enumerate() {
            if let Some(track) = self.features.get_mut(&id) {
                track.lambda = Some(problem.inv_depths[index]);
            }
        }
        for &feature in &outcome.degenerate_features {
            let id = index_to_id[feature];
            self.features.remove(&id);
            self.warnings
                .push(format!("feature {id} degenerate; track dropped"));
        }
        Ok(())
    }

    /// Eliminates the oldest keyframe and every feature anchored there.
    /// Factors folded into the new prior: the carried prior, the IMU factor
    /// leaving slot 0, and all visual factors of slot-0-anchored features
    /// (their inverse depths are eliminated alongside the state).
    fn marginalize_oldest(&mut self) {
        let n = self.keyframes.len();
        let states: Vec<NavState> = self.keyframes.iter().map(|k| k.state.clone()).collect();

        // Features anchored at slot 0 with an optimizable depth are
        // eliminated; single-sighting slot-0 candidates are simply dropped.
        let eliminated: Vec<u32> = self
            .features
            .iter()
            .filter(|(_, t)| t.sightings[0].0 == 0 && t.lambda.is_some() && t.sightings.len() >= 2)
            .map(|(&id, _)| id)
            .collect();
        let m0 = eliminated.len();

        let marg_dim = 15 + m0;
        let dim = marg_dim + 15 * (n - 1);
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let col_of_slot = |slot: usize| -> usize {
            if slot == 0 {
                0
            } else {
                marg_dim + 15 * (slot - 1)
            }
        };

        // Carried prior (always touches slot 0: it covers every retained
        // keyframe of the previous window).
        if self.prior.dim() > 0 {
            let r = self.prior.residual(&states);
            for (bi, &slot_i) in self.prior.keyframes.iter().enumerate() {
                let j_i = self.prior.jacobian.columns(15 * bi, 15);
                let ci = col_of_slot(slot_i);
                for (bj, &slot_j) in self.prior.keyframes.iter().enumerate() {
                    let j_j = self.prior.jacobian.columns(15 * bj, 15);
                    let cj = col_of_slot(slot_j);
                    let block = j_i.transpose() * j_j;
                    for r_ in 0..15 {
                        for c_ in 0..15 {
                            h[(ci + r_, cj + c_)] += block[(r_, c_)];
                        }
                    }
                }
                let gv = j_i.transpose() * &r;
                for r_ in 0..15 {
                    g[ci + r_] += gv[r_];
                }
            }
        }

        // IMU factor 0 -> 1.
        {
            let f = &self.imu_factors[0];
            let (r, j0, j1) = f.linearize(&states[0], &states[1]);
            let r_w = f.whiten_vec(&r);
            let j0_w = f.whiten_mat(&j0);
            let j1_w = f.whiten_mat(&j1);
            let c1 = col_of_slot(1);
            add_block(&mut h, 0, 0, &(j0_w.transpose() * j0_w));
            add_block(&mut h, 0, c1, &(j0_w.transpose() * j1_w));
            add_block(&mut h, c1, 0, &(j1_w.transpose() * j0_w));
            add_block(&mut h, c1, c1, &(j1_w.transpose() * j1_w));
            add_vec(&mut g, 0, &(j0_w.transpose() * r_w));
            add_vec(&mut g, c1, &(j1_w.transpose() * r_w));
        }

        // Visual factors of eliminated features; λ_i sits at column 15 + i.
        let inv_sigma = 1.0 / self.config.solver.bearing_sigma;
        for (i, id) in eliminated.iter().enumerate() {
            let track = &self.features[id];
            let lambda = track.lambda.expect("eliminated tracks carry a depth");
            let lcol = 15 + i;
            let (anchor, bearing_anchor) = track.sightings[0];
            for &(target, bearing_target) in &track.sightings[1..] {
                let eval = match visual_residual(
                    bearing_anchor,
                    bearing_target,
                    &states[anchor],
                    &states[target],
                    lambda,
                    &self.extrinsics,
                ) {
                    Some(e) => e,
                    None => continue,
                };
                let r_w = eval.residual * inv_sigma;
                let sw = robust_weight(r_w.norm(), self.config.solver.huber_delta).sqrt();
                let r_s = r_w * sw;
                let ji = eval.j_pose_i * (inv_sigma * sw);
                let jj = eval.j_pose_j * (inv_sigma * sw);
                let jl = eval.j_lambda * (inv_sigma * sw);
                let (ca, ct) = (col_of_slot(anchor), col_of_slot(target));
                add_block(&mut h, ca, ca, &(ji.transpose() * ji));
                add_block(&mut h, ca, ct, &(ji.transpose() * jj));
                add_block(&mut h, ct, ca, &(jj.transpose() * ji));
                add_block(&mut h, ct, ct, &(jj.transpose() * jj));
                let jil = ji.transpose() * jl;
                let jjl = jj.transpose() * jl;
                for row in 0..6 {
                    h[(ca + row, lcol)] += jil[row];
                    h[(lcol, ca + row)] += jil[row];
                    h[(ct + row, lcol)] += jjl[row];
                    h[(lcol, ct + row)] += jjl[row];
                }
                h[(lcol, lcol)] += jl.dot(&jl);
                add_vec(&mut g, ca, &(ji.transpose() * r_s));
                add_vec(&mut g, ct, &(jj.transpose() * r_s));
                g[lcol] += jl.dot(&r_s);
            }
        }

        let retained: Vec<usize> = (0..n - 1).collect();
        let lin_points: Vec<NavState> = states[1..].to_vec();
        let outcome = marginalize(h, g, marg_dim, retained, lin_points);
        if outcome.regularized {
            self.warnings.push(format!(
                "marginalization at t={:.3} regularized a singular block",
                self.keyframes[0].t
            ));
        }
        self.prior = outcome.prior;

        // Window bookkeeping: drop the keyframe, its leading IMU factor,
        // and re-index everything one slot down.
        let dropped = self.keyframes.remove(0);
        self.finalized.push((dropped.t, dropped.state));
        self.imu_factors.remove(0);
        for f in &mut self.imu_factors {
            f.from -= 1;
            f.to -= 1;
        }
        for id in &eliminated {
            self.features.remove(id);
        }
        self.features.retain(|_, track| {
            // Tracks never straddle: a slot-0 sighting is always the anchor,
            // so whatever remains here is anchored strictly later.
            track.sightings[0].0 != 0
        });
        for track in self.features.values_mut() {
            for (slot, _) in &mut track.sightings {
                *slot -= 1;
            }
        }
    }
}

fn add_block<const R: usize, const C: usize>(
    h: &mut DMatrix<f64>,
    row: usize,
    col: usize,
    block: &nalgebra::SMatrix<f64, R, C>,
) {
    for r in 0..R {
        for c in 0..C {
            h[(row + r, col + c)] += block[(r, c)];
        }
    }
}

fn add_vec<const R: usize>(g: &mut DVector<f64>, row: usize, block: &nalgebra::SVector<f64, R>) {
    for r in 0..R {
        g[row + r] += block[r];
    }
}

/// Midpoint triangulation: depth along the anchor ray minimizing the
/// distance between the two rays. `None` when near-parallel or behind.
fn triangulate_depth(
    anchor: &NavState,
    bearing_anchor: Vec3,
    target: &NavState,
    bearing_target: Vec3,
    ext: &Extrinsics,
) -> Option<f64> {
    let r_a = anchor.q.rotation_matrix();
    let r_t = target.q.rotation_matrix();
    let r_cb = ext.r_cb();
    let o1 = anchor.p + r_a * ext.p_cb;
    let o2 = target.p + r_t * ext.p_cb;
    let d1 = r_a * (r_cb * bearing_anchor);
    let d2 = r_t * (r_cb * bearing_target);
    let c = d1.dot(&d2);
    let det = 1.0 - c * c;
    if det < 1e-9 {
        return None;
    }
    let rhs = o2 - o1;
    let s = (d1.dot(&rhs) - c * d2.dot(&rhs)) / det;
    if s < 0.05 {
        return None;
    }
    Some(s)
}
