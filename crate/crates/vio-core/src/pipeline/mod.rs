//! Training-data construction: IMU log ingestion, smoothing, window
//! extraction, noise injection over the σ grids, and the sequence-level
//! train/test split.
//!
//! Labels are standard deviations in sensor units throughout (m/s² for the
//! accelerometer, rad/s for the gyroscope).

pub mod dataset;
pub mod euroc;
pub mod savgol;

pub use dataset::{read_dataset, write_dataset, DatasetError};
pub use euroc::{parse_euroc_imu_csv, write_imu_csv, EurocError, ImuSeries};
pub use savgol::{savitzky_golay, SavGolError};

use crate::noisenet::{LabeledWindow, SensorKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Accelerometer noise grid, m/s².
pub fn default_accel_grid() -> Vec<f64> {
    vec![0.01, 0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15, 0.17, 0.19, 0.21]
}

/// Gyroscope noise grid, rad/s.
pub fn default_gyro_grid() -> Vec<f64> {
    vec![0.001, 0.003, 0.005, 0.007, 0.009, 0.011, 0.013, 0.015]
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Euroc(#[from] EurocError),
    #[error(transparent)]
    SavGol(#[from] SavGolError),
    #[error("{sensor} noise grid is empty")]
    EmptyGrid { sensor: &'static str },
    #[error("series {source_id} has {len} samples, shorter than one window of {window}")]
    SeriesTooShort {
        source_id: String,
        len: usize,
        window: usize,
    },
    #[error("sequence {name} appears in both train and test sets")]
    ManifestOverlap { name: String },
    #[error("sequence {name} not found; tried {tried:?}")]
    MissingSequence { name: String, tried: Vec<PathBuf> },
}

/// Everything that parameterizes training-set construction.
#[derive(Debug, Clone)]
pub struct TrainingSetConfig {
    /// Samples per extracted window.
    pub window_len: usize,
    /// Savitzky-Golay window length (odd).
    pub savgol_window: usize,
    /// Savitzky-Golay polynomial order.
    pub savgol_order: usize,
    pub grid_accel: Vec<f64>,
    pub grid_gyro: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            window_len: 200,
            savgol_window: 21,
            savgol_order: 3,
            grid_accel: default_accel_grid(),
            grid_gyro: default_gyro_grid(),
            seed: 0,
        }
    }
}

/// Sequence-level train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            train: ["MH01", "MH03", "MH05", "V102", "V201", "V203"]
                .map(String::from)
                .to_vec(),
            test: ["MH02", "MH04", "V101", "V103", "V202"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for name in &self.train {
            if self.test.contains(name) {
                return Err(PipelineError::ManifestOverlap { name: name.clone() });
            }
        }
        Ok(())
    }
}

/// Stable 64-bit hash so per-sequence noise streams decouple without
/// depending on platform hasher state.
fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Smooth the series, cut it into non-overlapping single-axis windows, and
/// emit one labeled example per (window, grid level, axis) with i.i.d.
/// Gaussian noise of that level added to every sample. The same level is
/// applied to all three axes of a window set; examples come out ordered by
/// (window index, grid index, axis).
pub fn build_training_set(
    series: &ImuSeries,
    config: &TrainingSetConfig,
) -> Result<Vec<LabeledWindow>, PipelineError> {
    if config.grid_accel.is_empty() {
        return Err(PipelineError::EmptyGrid { sensor: "accel" });
    }
    if config.grid_gyro.is_empty() {
        return Err(PipelineError::EmptyGrid { sensor: "gyro" });
    }
    let n = series.samples.len();
    if n < config.window_len {
        return Err(PipelineError::SeriesTooShort {
            source_id: series.source_id.clone(),
            len: n,
            window: config.window_len,
        });
    }

    // Six independent scalar channels: accel xyz, gyro xyz.
    let channel = |pick: fn(&crate::preintegration::ImuSample) -> f64| -> Vec<f64> {
        series.samples.iter().map(pick).collect()
    };
    let raw: [Vec<f64>; 6] = [
        channel(|s| s.accel.x),
        channel(|s| s.accel.y),
        channel(|s| s.accel.z),
        channel(|s| s.gyro.x),
        channel(|s| s.gyro.y),
        channel(|s| s.gyro.z),
    ];
    let mut smooth = Vec::with_capacity(6);
    for ch in &raw {
        smooth.push(savitzky_golay(ch, config.savgol_window, config.savgol_order)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(&series.source_id));
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let window_count = n / config.window_len;
    let mut out = Vec::new();
    for w in 0..window_count {
        let start = w * config.window_len;
        let range = start..start + config.window_len;
        for (sensor, base, grid) in [
            (SensorKind::Accel, 0usize, &config.grid_accel),
            (SensorKind::Gyro, 3usize, &config.grid_gyro),
        ] {
            for &sigma in grid.iter() {
                for axis in 0..3 {
                    let samples: Vec<f64> = smooth[base + axis][range.clone()]
                        .iter()
                        .map(|&v| v + normal() * sigma)
                        .collect();
                    out.push(LabeledWindow {
                        samples,
                        label: sigma,
                        sensor,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Locate a sequence's IMU CSV under the dataset root, EuRoC ASL layout
/// first (`<name>/mav0/imu0/data.csv`), then the flattened variant.
pub fn sequence_imu_path(root: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    let candidates = [
        root.join(name).join("mav0").join("imu0").join("data.csv"),
        root.join(name).join("imu0").join("data.csv"),
    ];
    for c in &candidates {
        if c.is_file() {
            return Ok(c.clone());
        }
    }
    Err(PipelineError::MissingSequence {
        name: name.to_string(),
        tried: candidates.to_vec(),
    })
}

/// Build the train and test sets for a manifest; windows never cross
/// sequence boundaries, and the split is by whole sequence.
pub fn build_split(
    manifest: &DatasetManifest,
    root: &Path,
    config: &TrainingSetConfig,
) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>), PipelineError> {
    manifest.validate()?;
    let build = |names: &[String]| -> Result<Vec<LabeledWindow>, PipelineError> {
        let mut out = Vec::new();
        for name in names {
            let path = sequence_imu_path(root, name)?;
            let series = parse_euroc_imu_csv(&path)?;
            let mut series = series;
            series.source_id = name.clone();
            out.extend(build_training_set(&series, config)?);
        }
        Ok(out)
    };
    Ok((build(&manifest.train)?, build(&manifest.test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::preintegration::ImuSample;
    use crate::sim::{generate_trajectory, synthesize_imu, NoiseSchedule, TrajectorySpec};

    fn synthetic_series(duration: f64, source_id: &str) -> ImuSeries {
        let spec = TrajectorySpec {
            duration,
            ..TrajectorySpec::default()
        };
        let truth = generate_trajectory(&spec);
        let samples = synthesize_imu(&truth, &NoiseSchedule::noise_free(), 17);
        ImuSeries::from_samples(samples, source_id)
    }

    #[test]
    fn default_grids_match_published_levels() {
        let accel = default_accel_grid();
        assert_eq!(accel.len(), 11);
        assert_eq!(accel[0], 0.01);
        assert_eq!(accel[10], 0.21);
        for pair in accel.windows(2) {
            assert!((pair[1] - pair[0] - 0.02).abs() < 1e-15);
        }
        let gyro = default_gyro_grid();
        assert_eq!(gyro.len(), 8);
        assert_eq!(gyro[0], 0.001);
        assert_eq!(gyro[7], 0.015);
        for pair in gyro.windows(2) {
            assert!((pair[1] - pair[0] - 0.002).abs() < 1e-15);
        }
    }

    #[test]
    fn training_set_counts_and_order() {
        let series = synthetic_series(5.0, "unit");
        let config = TrainingSetConfig {
            seed: 3,
            ..TrainingSetConfig::default()
        };
        let set = build_training_set(&series, &config).unwrap();
        let windows = series.samples.len() / 200;
        assert_eq!(set.len(), windows * (11 + 8) * 3);
        // Per window: 11 accel levels × 3 axes, then 8 gyro levels × 3 axes.
        assert_eq!(set[0].sensor, crate::noisenet::SensorKind::Accel);
        assert_eq!(set[0].label, 0.01);
        assert_eq!(set[33].sensor, crate::noisenet::SensorKind::Gyro);
        assert_eq!(set[33].label, 0.001);
        assert!(set.iter().all(|w| w.samples.len() == 200));
    }

    #[test]
    fn zero_sigma_level_reproduces_smoothed_signal() {
        let series = synthetic_series(2.0, "unit");
        let config = TrainingSetConfig {
            grid_accel: vec![0.0],
            grid_gyro: vec![0.0],
            seed: 5,
            ..TrainingSetConfig::default()
        };
        let set = build_training_set(&series, &config).unwrap();
        let accel_x: Vec<f64> = series.samples.iter().map(|s| s.accel.x).collect();
        let smooth = savitzky_golay(&accel_x, 21, 3).unwrap();
        let first = &set[0];
        assert_eq!(first.label, 0.0);
        assert_eq!(first.samples.as_slice(), &smooth[..200]);
    }

    #[test]
    fn injected_labels_are_recoverable_from_differences() {
        // 170 s → 34k samples → 170 windows → > 10⁵ noisy samples at the
        // single grid level; the variance of (noisy − clean) must recover σ².
        let series = synthetic_series(170.0, "unit");
        let sigma = 0.05;
        let config = TrainingSetConfig {
            grid_accel: vec![sigma],
            grid_gyro: vec![0.001],
            seed: 11,
            ..TrainingSetConfig::default()
        };
        let set = build_training_set(&series, &config).unwrap();

        let channels: [Vec<f64>; 3] = [
            series.samples.iter().map(|s| s.accel.x).collect(),
            series.samples.iter().map(|s| s.accel.y).collect(),
            series.samples.iter().map(|s| s.accel.z).collect(),
        ];
        let smooth: Vec<Vec<f64>> = channels
            .iter()
            .map(|c| savitzky_golay(c, 21, 3).unwrap())
            .collect();

        let mut sum_sq = 0.0;
        let mut count = 0usize;
        let mut w_idx = 0usize;
        for window in set.iter().filter(|w| w.sensor == SensorKind::Accel) {
            let axis = w_idx % 3;
            let window_no = w_idx / 3;
            let start = window_no * 200;
            for (k, v) in window.samples.iter().enumerate() {
                let d = v - smooth[axis][start + k];
                sum_sq += d * d;
                count += 1;
            }
            w_idx += 1;
        }
        assert!(count >= 100_000, "need ≥ 10⁵ samples, got {count}");
        let var = sum_sq / count as f64;
        let rel = (var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.03, "recovered variance off by {:.1}%", rel * 100.0);
    }

    #[test]
    fn training_set_is_deterministic() {
        let series = synthetic_series(3.0, "unit");
        let config = TrainingSetConfig {
            seed: 9,
            ..TrainingSetConfig::default()
        };
        let a = build_training_set(&series, &config).unwrap();
        let b = build_training_set(&series, &config).unwrap();
        assert_eq!(a, b);
        let c = build_training_set(
            &series,
            &TrainingSetConfig {
                seed: 10,
                ..config
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let series = synthetic_series(2.0, "unit");
        let config = TrainingSetConfig {
            grid_accel: vec![],
            ..TrainingSetConfig::default()
        };
        assert!(matches!(
            build_training_set(&series, &config),
            Err(PipelineError::EmptyGrid { sensor: "accel" })
        ));
    }

    #[test]
    fn short_series_is_rejected() {
        let samples: Vec<ImuSample> = (0..100)
            .map(|i| ImuSample::new(i as f64 * 0.005, Vec3::zeros(), Vec3::zeros()))
            .collect();
        let series = ImuSeries::from_samples(samples, "short");
        assert!(matches!(
            build_training_set(&series, &TrainingSetConfig::default()),
            Err(PipelineError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn default_manifest_matches_published_split() {
        let m = DatasetManifest::default();
        assert_eq!(m.train, ["MH01", "MH03", "MH05", "V102", "V201", "V203"]);
        assert_eq!(m.test, ["MH02", "MH04", "V101", "V103", "V202"]);
        m.validate().unwrap();
    }

    #[test]
    fn overlapping_manifest_is_rejected() {
        let m = DatasetManifest {
            train: vec!["A".into(), "B".into()],
            test: vec!["B".into()],
        };
        assert!(matches!(
            m.validate(),
            Err(PipelineError::ManifestOverlap { .. })
        ));
    }

    #[test]
    fn split_reads_sequences_from_disk_and_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["SEQA", "SEQB"] {
            let seq_dir = dir.path().join(name).join("mav0").join("imu0");
            std::fs::create_dir_all(&seq_dir).unwrap();
            let series = synthetic_series(2.0, name);
            write_imu_csv(&series.samples, &seq_dir.join("data.csv")).unwrap();
        }
        let config = TrainingSetConfig {
            seed: 1,
            ..TrainingSetConfig::default()
        };
        let manifest = DatasetManifest {
            train: vec!["SEQA".into()],
            test: vec!["SEQB".into()],
        };
        let (train, test) = build_split(&manifest, dir.path(), &config).unwrap();
        assert!(!train.is_empty());
        assert!(!test.is_empty());

        // Single-sequence, one-sided manifest is valid.
        let one_sided = DatasetManifest {
            train: vec!["SEQA".into()],
            test: vec![],
        };
        let (train_only, empty) = build_split(&one_sided, dir.path(), &config).unwrap();
        assert!(!train_only.is_empty());
        assert!(empty.is_empty());

        let bad = DatasetManifest {
            train: vec!["SEQC".into()],
            test: vec![],
        };
        match build_split(&bad, dir.path(), &config) {
            Err(PipelineError::MissingSequence { name, .. }) => assert_eq!(name, "SEQC"),
            other => panic!("expected missing-sequence error, got {other:?}"),
        }
    }
}
