//! On-disk container for labeled windows.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "VIOWIN01"
//! window    u32      samples per window
//! count     u64      number of windows
//! window[count]:
//!   sensor  u8       0 = accel, 1 = gyro
//!   label   f64      injected σ, sensor units
//!   samples f64 × window
//! ```
//!
//! f64 payloads are raw IEEE-754 bits, so a round trip is bit-exact.

use crate::noisenet::{LabeledWindow, SensorKind};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"VIOWIN01";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a dataset file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: truncated at window {index} of {count}")]
    Truncated {
        path: String,
        index: u64,
        count: u64,
    },
    #[error("{path}: unknown sensor tag {tag}")]
    BadSensor { path: String, tag: u8 },
    #[error("{path}: window length {found} does not match expected {expected}")]
    WindowMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
}

pub fn write_dataset(windows: &[LabeledWindow], path: &Path) -> Result<(), DatasetError> {
    let path_str = path.display().to_string();
    let io_err = |source| DatasetError::Io {
        path: path_str.clone(),
        source,
    };
    let window_len = windows.first().map(|w| w.samples.len()).unwrap_or(0) as u32;
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);

    let write = |out: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&window_len.to_le_bytes())?;
        out.write_all(&(windows.len() as u64).to_le_bytes())?;
        for w in windows {
            debug_assert_eq!(w.samples.len() as u32, window_len);
            out.write_all(&[match w.sensor {
                SensorKind::Accel => 0u8,
                SensorKind::Gyro => 1u8,
            }])?;
            out.write_all(&w.label.to_le_bytes())?;
            for v in &w.samples {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    };
    write(&mut out).map_err(|source| DatasetError::Io {
        path: path_str,
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledWindow>, DatasetError> {
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 8];
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut f64buf = [0u8; 8];

    let fail_magic = |e: std::io::Error, path: &str| -> DatasetError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::BadMagic {
                path: path.to_string(),
            }
        } else {
            DatasetError::Io {
                path: path.to_string(),
                source: e,
            }
        }
    };
    input
        .read_exact(&mut magic)
        .map_err(|e| fail_magic(e, &path_str))?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic { path: path_str });
    }
    input
        .read_exact(&mut u32buf)
        .map_err(|e| fail_magic(e, &path_str))?;
    let window_len = u32::from_le_bytes(u32buf) as usize;
    input
        .read_exact(&mut u64buf)
        .map_err(|e| fail_magic(e, &path_str))?;
    let count = u64::from_le_bytes(u64buf);

    let mut windows = Vec::with_capacity(count.min(1 << 20) as usize);
    for index in 0..count {
        let truncated = |_: std::io::Error| DatasetError::Truncated {
            path: path_str.clone(),
            index,
            count,
        };
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag).map_err(truncated)?;
        let sensor = match tag[0] {
            0 => SensorKind::Accel,
            1 => SensorKind::Gyro,
            tag => {
                return Err(DatasetError::BadSensor {
                    path: path_str,
                    tag,
                })
            }
        };
        input.read_exact(&mut f64buf).map_err(truncated)?;
        let label = f64::from_le_bytes(f64buf);
        let mut samples = Vec::with_capacity(window_len);
        for _ in 0..window_len {
            input.read_exact(&mut f64buf).map_err(truncated)?;
            samples.push(f64::from_le_bytes(f64buf));
        }
        windows.push(LabeledWindow {
            samples,
            label,
            sensor,
        });
    }
    Ok(windows)
}
