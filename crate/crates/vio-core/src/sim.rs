//! Synthetic world: analytic motion profiles, IMU synthesis under the
//! measurement model, and pinhole feature tracks.
//!
//! Ground truth is the discrete Euler integration of the analytic clean
//! signals (world acceleration and body rate), using the same strapdown
//! update the pre-integration assumes. That choice makes the noise-free
//! closed loop exactly self-consistent: residuals vanish to rounding, and
//! the estimator can reproduce ground truth to numerical precision.

use crate::geometry::{quat_multiply, Mat3, Quaternion, Vec3};
use crate::preintegration::{gravity_w, ImuSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Sinusoidal per-axis position profile plus an analytic body-rate profile.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub seed: u64,
    /// Total length, s.
    pub duration: f64,
    /// IMU sampling rate, Hz.
    pub imu_rate: f64,
    /// Camera frame rate, Hz; must divide the IMU rate.
    pub cam_rate: f64,
    /// Position p(t) = amplitude · sin(2π·frequency·t + phase), per axis (m, Hz, rad).
    pub pos_amplitude: Vec3,
    pub pos_frequency: Vec3,
    pub pos_phase: Vec3,
    /// Body rate ω(t) = offset + amplitude · sin(2π·frequency·t + phase), per axis.
    pub omega_offset: Vec3,
    pub omega_amplitude: Vec3,
    pub omega_frequency: Vec3,
    pub omega_phase: Vec3,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            seed: 7,
            duration: 30.0,
            imu_rate: 200.0,
            cam_rate: 20.0,
            pos_amplitude: Vec3::new(2.0, 1.5, 0.8),
            pos_frequency: Vec3::new(0.25, 0.18, 0.30),
            pos_phase: Vec3::new(0.0, 1.2, 0.5),
            omega_offset: Vec3::new(0.0, 0.0, 0.15),
            omega_amplitude: Vec3::new(0.08, 0.06, 0.10),
            omega_frequency: Vec3::new(0.20, 0.15, 0.10),
            omega_phase: Vec3::new(0.3, 1.0, 0.0),
        }
    }
}

impl TrajectorySpec {
    fn tau(f: f64, t: f64, phase: f64) -> f64 {
        2.0 * std::f64::consts::PI * f * t + phase
    }

    /// Analytic world position (used only to seed the discrete integration).
    pub fn analytic_position(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| {
            self.pos_amplitude[i] * Self::tau(self.pos_frequency[i], t, self.pos_phase[i]).sin()
        })
    }

    /// Analytic world velocity.
    pub fn analytic_velocity(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| {
            let w = 2.0 * std::f64::consts::PI * self.pos_frequency[i];
            self.pos_amplitude[i] * w * Self::tau(self.pos_frequency[i], t, self.pos_phase[i]).cos()
        })
    }

    /// Analytic world acceleration.
    pub fn analytic_accel(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| {
            let w = 2.0 * std::f64::consts::PI * self.pos_frequency[i];
            -self.pos_amplitude[i]
                * w
                * w
                * Self::tau(self.pos_frequency[i], t, self.pos_phase[i]).sin()
        })
    }

    /// Analytic body angular rate.
    pub fn analytic_omega(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| {
            self.omega_offset[i]
                + self.omega_amplitude[i]
                    * Self::tau(self.omega_frequency[i], t, self.omega_phase[i]).sin()
        })
    }

    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_rate
    }

    /// IMU samples per camera frame; the rates must divide evenly.
    pub fn imu_per_camera_frame(&self) -> usize {
        let ratio = self.imu_rate / self.cam_rate;
        let rounded = ratio.round();
        assert!(
            (ratio - rounded).abs() < 1e-9 && rounded >= 1.0,
            "camera rate must divide IMU rate (got {} / {})",
            self.imu_rate,
            self.cam_rate
        );
        rounded as usize
    }
}

/// One ground-truth support point at IMU rate, with the clean signals that
/// produced it.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    /// Body-to-world attitude.
    pub q: Quaternion,
    /// Clean world-frame acceleration at this instant, m/s².
    pub accel_w: Vec3,
    /// Clean body-frame angular rate, rad/s.
    pub omega_b: Vec3,
}

/// Discrete ground truth at IMU rate.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub points: Vec<TrajectoryPoint>,
    pub imu_dt: f64,
}

/// Integrate the analytic profile into discrete ground truth.
pub fn generate_trajectory(spec: &TrajectorySpec) -> GroundTruth {
    let dt = spec.imu_dt();
    let n = (spec.duration * spec.imu_rate).round() as usize;
    let mut points = Vec::with_capacity(n + 1);

    let mut p = spec.analytic_position(0.0);
    let mut v = spec.analytic_velocity(0.0);
    let mut q = Quaternion::IDENTITY;
    for i in 0..=n {
        let t = i as f64 * dt;
        let accel_w = spec.analytic_accel(t);
        let omega_b = spec.analytic_omega(t);
        points.push(TrajectoryPoint {
            t,
            p,
            v,
            q,
            accel_w,
            omega_b,
        });
        p += v * dt + 0.5 * accel_w * dt * dt;
        v += accel_w * dt;
        q = quat_multiply(&q, &Quaternion::from_small_angle(omega_b * dt));
    }
    GroundTruth { points, imu_dt: dt }
}

/// Piecewise-constant noise levels plus constant true biases and an optional
/// bias random walk.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Segments sorted by start time; the first must start at or before 0.
    pub segments: Vec<SigmaSegment>,
    pub bias_accel: Vec3,
    pub bias_gyro: Vec3,
    /// Walk intensities; zero disables the walk (the default).
    pub walk_accel: Vec3,
    pub walk_gyro: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct SigmaSegment {
    pub start: f64,
    /// Accelerometer noise σ_f per axis, m/s² (zero allowed for clean runs).
    pub accel: Vec3,
    /// Gyroscope noise σ_ω per axis, rad/s.
    pub gyro: Vec3,
}

impl NoiseSchedule {
    pub fn constant(sigma_accel: f64, sigma_gyro: f64) -> Self {
        Self {
            segments: vec![SigmaSegment {
                start: 0.0,
                accel: Vec3::repeat(sigma_accel),
                gyro: Vec3::repeat(sigma_gyro),
            }],
            bias_accel: Vec3::zeros(),
            bias_gyro: Vec3::zeros(),
            walk_accel: Vec3::zeros(),
            walk_gyro: Vec3::zeros(),
        }
    }

    pub fn noise_free() -> Self {
        Self::constant(0.0, 0.0)
    }

    /// Active (σ_f, σ_ω) at time t.
    pub fn sigma_at(&self, t: f64) -> (Vec3, Vec3) {
        let mut active = &self.segments[0];
        for seg in &self.segments {
            if seg.start <= t {
                active = seg;
            } else {
                break;
            }
        }
        (active.accel, active.gyro)
    }
}

/// Synthesize the measured IMU stream from ground truth:
/// `f̂ = R_w^b (a_w + g_w) + b_f + n_f`, `ω̂ = ω + b_ω + n_ω`, noise sampled
/// per axis at the scheduled σ, bias walking by `b += n_b δt` when enabled.
pub fn synthesize_imu(truth: &GroundTruth, schedule: &NoiseSchedule, seed: u64) -> Vec<ImuSample> {
    assert!(
        !schedule.segments.is_empty() && schedule.segments[0].start <= truth.points[0].t,
        "noise schedule must cover the trajectory start"
    );
    let g_w = gravity_w();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut b_f = schedule.bias_accel;
    let mut b_w = schedule.bias_gyro;
    let dt = truth.imu_dt;

    truth
        .points
        .iter()
        .map(|pt| {
            let (sig_f, sig_w) = schedule.sigma_at(pt.t);
            let n_f = Vec3::new(
                normal() * sig_f.x,
                normal() * sig_f.y,
                normal() * sig_f.z,
            );
            let n_w = Vec3::new(
                normal() * sig_w.x,
                normal() * sig_w.y,
                normal() * sig_w.z,
            );
            let f_hat = pt.q.rotation_matrix().transpose() * (pt.accel_w + g_w) + b_f + n_f;
            let w_hat = pt.omega_b + b_w + n_w;
            b_f += Vec3::new(
                normal() * schedule.walk_accel.x,
                normal() * schedule.walk_accel.y,
                normal() * schedule.walk_accel.z,
            ) * dt;
            b_w += Vec3::new(
                normal() * schedule.walk_gyro.x,
                normal() * schedule.walk_gyro.y,
                normal() * schedule.walk_gyro.z,
            ) * dt;
            ImuSample::new(pt.t, f_hat, w_hat)
        })
        .collect()
}

/// Pinhole camera with fixed body extrinsics. Camera axes: z forward along
/// body +x, x right (body −y), y down (body −z).
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub width: f64,
    pub height: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-body rotation.
    pub q_cb: Quaternion,
    /// Camera origin in the body frame, m.
    pub p_cb: Vec3,
    /// Points closer than this along the optical axis are not observed, m.
    pub min_depth: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            fx: 320.0,
            fy: 320.0,
            cx: 319.5,
            cy: 239.5,
            q_cb: Quaternion::new(0.5, -0.5, 0.5, -0.5),
            p_cb: Vec3::new(0.05, 0.0, 0.0),
            min_depth: 0.5,
        }
    }
}

impl CameraModel {
    pub fn r_cb(&self) -> Mat3 {
        self.q_cb.rotation_matrix()
    }

    /// Camera-frame point → pixel, if in front of the camera and in bounds.
    pub fn project(&self, x_c: Vec3) -> Option<[f64; 2]> {
        if x_c.z < self.min_depth {
            return None;
        }
        let u = self.fx * x_c.x / x_c.z + self.cx;
        let v = self.fy * x_c.y / x_c.z + self.cy;
        if u < 0.0 || u >= self.width || v < 0.0 || v >= self.height {
            return None;
        }
        Some([u, v])
    }

    /// Pixel → unit bearing in the camera frame.
    pub fn back_project(&self, pixel: [f64; 2]) -> Vec3 {
        let d = Vec3::new(
            (pixel[0] - self.cx) / self.fx,
            (pixel[1] - self.cy) / self.fy,
            1.0,
        );
        d / d.norm()
    }

    /// World point into the camera frame at a given body pose.
    pub fn world_to_camera(&self, x_w: Vec3, p_wb: Vec3, q_wb: &Quaternion) -> Vec3 {
        let x_b = q_wb.rotation_matrix().transpose() * (x_w - p_wb);
        self.r_cb().transpose() * (x_b - self.p_cb)
    }
}

/// One feature sighting: noisy pixel and the unit bearing back-projected
/// from it.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub feature_id: u32,
    pub pixel: [f64; 2],
    pub bearing: Vec3,
}

/// All landmark sightings from one camera frame.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    pub t: f64,
    /// Index into the ground-truth point array.
    pub imu_index: usize,
    pub observations: Vec<Observation>,
}

/// Feature tracks over the whole trajectory, with the true landmark
/// positions retained for oracle checks.
#[derive(Debug, Clone)]
pub struct FeatureTracks {
    pub frames: Vec<CameraFrame>,
    pub landmarks: Vec<Vec3>,
    /// Frames that saw fewer than 8 landmarks (under-constrained geometry).
    pub low_visibility_frames: Vec<usize>,
}

/// Sample landmarks uniformly in a cube around the trajectory and project
/// them through the camera at every camera instant, with persistent ids.
pub fn synthesize_features(
    truth: &GroundTruth,
    spec: &TrajectorySpec,
    camera: &CameraModel,
    landmark_count: usize,
    pixel_noise: f64,
    seed: u64,
) -> FeatureTracks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut center = Vec3::zeros();
    for pt in &truth.points {
        center += pt.p;
    }
    center /= truth.points.len() as f64;
    let half = 5.0;
    let landmarks: Vec<Vec3> = (0..landmark_count)
        .map(|_| {
            center
                + Vec3::new(
                    rng.gen_range(-half..half),
                    rng.gen_range(-half..half),
                    rng.gen_range(-half..half),
                )
        })
        .collect();

    let step = spec.imu_per_camera_frame();
    let mut frames = Vec::new();
    let mut low_visibility_frames = Vec::new();
    let mut idx = 0;
    while idx < truth.points.len() {
        let pt = &truth.points[idx];
        let mut observations = Vec::new();
        for (id, lm) in landmarks.iter().enumerate() {
            let x_c = camera.world_to_camera(*lm, pt.p, &pt.q);
            let Some(clean_px) = camera.project(x_c) else {
                continue;
            };
            let pixel = [
                clean_px[0] + pixel_noise * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
                clean_px[1] + pixel_noise * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
            ];
            observations.push(Observation {
                feature_id: id as u32,
                pixel,
                bearing: camera.back_project(pixel),
            });
        }
        if observations.len() < 8 {
            low_visibility_frames.push(frames.len());
        }
        frames.push(CameraFrame {
            t: pt.t,
            imu_index: idx,
            observations,
        });
        idx += step;
    }
    FeatureTracks {
        frames,
        landmarks,
        low_visibility_frames,
    }
}
