//! EuRoC ASL on-disk format: `imu0/data.csv` with nanosecond timestamps,
//! gyroscope triplet, accelerometer triplet.

use crate::geometry::Vec3;
use crate::preintegration::ImuSample;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EurocError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 7 comma-separated fields, found {found}")]
    FieldCount {
        path: String,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: cannot parse field {field}: {value:?}")]
    BadNumber {
        path: String,
        line: usize,
        field: usize,
        value: String,
    },
    #[error("{path}:{line}: timestamp {t} s does not increase over previous {prev} s")]
    NonMonotonic {
        path: String,
        line: usize,
        t: f64,
        prev: f64,
    },
    #[error("{path}: no samples")]
    Empty { path: String },
}

/// A parsed IMU log with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSeries {
    pub samples: Vec<ImuSample>,
    /// Mean sampling rate, Hz.
    pub nominal_rate: f64,
    pub source_id: String,
}

impl ImuSeries {
    /// Wrap an in-memory sample list (synthetic streams take this path).
    pub fn from_samples(samples: Vec<ImuSample>, source_id: &str) -> Self {
        let rate = if samples.len() > 1 {
            (samples.len() - 1) as f64 / (samples.last().unwrap().t - samples[0].t)
        } else {
            0.0
        };
        Self {
            samples,
            nominal_rate: rate,
            source_id: source_id.to_string(),
        }
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// Parse `timestamp [ns], w_x, w_y, w_z [rad/s], a_x, a_y, a_z [m/s²]`.
/// A leading header line is tolerated; timestamps are converted to seconds
/// relative to nothing (absolute seconds).
pub fn parse_euroc_imu_csv(path: &Path) -> Result<ImuSeries, EurocError> {
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| EurocError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);

    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| EurocError::Io {
            path: path_str.clone(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(EurocError::FieldCount {
                path: path_str,
                line: line_no,
                found: fields.len(),
            });
        }
        let mut values = [0.0f64; 7];
        for (i, field) in fields.iter().enumerate() {
            values[i] = field.parse().map_err(|_| EurocError::BadNumber {
                path: path_str.clone(),
                line: line_no,
                field: i + 1,
                value: field.to_string(),
            })?;
        }
        let t = values[0] * 1e-9;
        if let Some(prev) = samples.last().map(|s: &ImuSample| s.t) {
            if t <= prev {
                return Err(EurocError::NonMonotonic {
                    path: path_str,
                    line: line_no,
                    t,
                    prev,
                });
            }
        }
        samples.push(ImuSample::new(
            t,
            Vec3::new(values[4], values[5], values[6]),
            Vec3::new(values[1], values[2], values[3]),
        ));
    }
    if samples.is_empty() {
        return Err(EurocError::Empty { path: path_str });
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path_str.clone());
    Ok(ImuSeries {
        nominal_rate: if samples.len() > 1 {
            (samples.len() - 1) as f64 / (samples.last().unwrap().t - samples[0].t)
        } else {
            0.0
        },
        samples,
        source_id,
    })
}

/// Write samples back out in the same format (synthetic streams reuse the
/// ingestion path this way). Timestamps are emitted as integer nanoseconds.
pub fn write_imu_csv(samples: &[ImuSample], path: &Path) -> Result<(), EurocError> {
    let path_str = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|source| EurocError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(
            out,
            "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],\
             a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
        )?;
        for s in samples {
            writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                (s.t * 1e9).round() as i64,
                s.gyro.x,
                s.gyro.y,
                s.gyro.z,
                s.accel.x,
                s.accel.y,
                s.accel.z
            )?;
        }
        out.flush()
    };
    write().map_err(|source| EurocError::Io {
        path: path_str,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn write_fixture(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn parses_three_row_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            "data.csv",
            "#timestamp [ns],w_x,w_y,w_z,a_x,a_y,a_z\n\
             1403636579758555392,-0.099134701513277898,0.14730578886832138,0.02722713633111154,8.1476917083333333,-0.37592158333333331,-2.4026292499999999\n\
             1403636579763555584,-0.098124104998689527,0.14444576742693560,0.02722713633111154,8.1285617083333338,-0.40861241666666664,-2.4026292499999999\n\
             1403636579768555520,-0.096102911969512769,0.14730578886832138,0.02617953263810624,8.1046491666666664,-0.42821691666666666,-2.3559216666666667\n",
        );
        let series = parse_euroc_imu_csv(&path).unwrap();
        assert_eq!(series.samples.len(), 3);
        assert_abs_diff_eq!(series.samples[0].t, 1403636579.758555392, epsilon = 1e-6);
        assert_abs_diff_eq!(
            series.samples[0].gyro.x,
            -0.099134701513277898,
            epsilon = 0.0
        );
        assert_abs_diff_eq!(series.samples[1].accel.y, -0.40861241666666664, epsilon = 0.0);
        assert_abs_diff_eq!(series.samples[2].accel.z, -2.3559216666666667, epsilon = 0.0);
        // 5 ms spacing → 200 Hz.
        assert_abs_diff_eq!(series.nominal_rate, 200.0, epsilon = 0.5);
    }

    #[test]
    fn rejects_row_with_wrong_field_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            "data.csv",
            "1000000000,0.1,0.2,0.3,1.0,2.0,3.0\n2000000000,0.1,0.2,0.3,1.0,2.0\n",
        );
        match parse_euroc_imu_csv(&path) {
            Err(EurocError::FieldCount { line, found, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(found, 6);
            }
            other => panic!("expected field-count error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unparseable_number_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            "data.csv",
            "1000000000,0.1,0.2,0.3,1.0,2.0,3.0\n2000000000,0.1,oops,0.3,1.0,2.0,3.0\n",
        );
        match parse_euroc_imu_csv(&path) {
            Err(EurocError::BadNumber { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, 3);
            }
            other => panic!("expected bad-number error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_monotonic_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            "data.csv",
            "2000000000,0.1,0.2,0.3,1.0,2.0,3.0\n1000000000,0.1,0.2,0.3,1.0,2.0,3.0\n",
        );
        assert!(matches!(
            parse_euroc_imu_csv(&path),
            Err(EurocError::NonMonotonic { line: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip_preserves_samples() {
        let samples: Vec<ImuSample> = (0..100)
            .map(|i| {
                let t = 1.5 + i as f64 * 0.005;
                ImuSample::new(
                    t,
                    Vec3::new((i as f64).sin(), 0.5, -9.8),
                    Vec3::new(0.01 * i as f64, -0.02, 0.3),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        write_imu_csv(&samples, &path).unwrap();
        let back = parse_euroc_imu_csv(&path).unwrap();
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in back.samples.iter().zip(&samples) {
            assert_abs_diff_eq!(a.t, b.t, epsilon = 1e-9);
            assert_abs_diff_eq!(a.accel, b.accel, epsilon = 1e-9);
            assert_abs_diff_eq!(a.gyro, b.gyro, epsilon = 1e-9);
        }
    }

    #[test]
    fn series_from_samples_reports_rate_and_duration() {
        let samples: Vec<ImuSample> = (0..=200)
            .map(|i| ImuSample::new(i as f64 * 0.005, Vec3::zeros(), Vec3::zeros()))
            .collect();
        let series = ImuSeries::from_samples(samples, "synthetic");
        assert_abs_diff_eq!(series.nominal_rate, 200.0, epsilon = 1e-9);
        assert_abs_diff_eq!(series.duration(), 1.0, epsilon = 1e-12);
    }
}
