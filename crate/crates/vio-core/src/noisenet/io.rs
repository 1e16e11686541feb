//! Model persistence: a versioned JSON document carrying the architecture,
//! the sensor kind, and every parameter tensor by name. Values survive a
//! save/load round trip bit-for-bit (shortest-round-trip float printing),
//! and the loader validates version, tensor names, and tensor shapes before
//! constructing a model.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{ModelConfig, RegressorModel, SensorKind};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("model io failed on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a valid model file: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("model format version {found} is not supported (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("model file is for {found:?} but {expected:?} was expected")]
    SensorMismatch {
        expected: SensorKind,
        found: SensorKind,
    },
    #[error("model file lacks tensor {name}")]
    MissingTensor { name: String },
    #[error("model file carries unknown tensor {name}")]
    UnexpectedTensor { name: String },
    #[error("tensor {name} has {found} values where the architecture needs {expected}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("tensor {name} contains non-finite values")]
    NonFinite { name: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    sensor: SensorKind,
    config: ModelConfig,
    /// BTreeMap keeps the on-disk tensor order stable across saves.
    tensors: BTreeMap<String, Vec<f64>>,
}

/// Tensor names aligned with [`RegressorModel::tensors`] order.
fn tensor_names() -> Vec<String> {
    let mut names = Vec::with_capacity(20);
    for i in 0..3 {
        names.push(format!("conv{i}.weight"));
        names.push(format!("conv{i}.bias"));
        names.push(format!("norm{i}.gain"));
        names.push(format!("norm{i}.bias"));
    }
    for i in 0..4 {
        names.push(format!("linear{i}.weight"));
        names.push(format!("linear{i}.bias"));
    }
    names
}

/// Writes a model to `path` as versioned JSON. Non-finite parameters are
/// rejected because JSON cannot represent them losslessly.
pub fn save_model(model: &RegressorModel, path: &Path) -> Result<(), ModelIoError> {
    let path_str = path.display().to_string();
    let names = tensor_names();
    let mut tensors = BTreeMap::new();
    for (name, data) in names.into_iter().zip(model.tensors()) {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelIoError::NonFinite { name });
        }
        tensors.insert(name, data.to_vec());
    }
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        sensor: model.sensor,
        config: model.config.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&file).expect("model file serialization");
    let mut out = fs::File::create(path).map_err(|source| ModelIoError::Io {
        path: path_str.clone(),
        source,
    })?;
    out.write_all(json.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|source| ModelIoError::Io {
            path: path_str,
            source,
        })
}

/// Loads a model saved by [`save_model`]. When `expected` is given, a file
/// trained for the other sensor is rejected instead of silently accepted.
pub fn load_model(
    path: &Path,
    expected: Option<SensorKind>,
) -> Result<RegressorModel, ModelIoError> {
    let path_str = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ModelIoError::Io {
        path: path_str.clone(),
        source,
    })?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|source| ModelIoError::Parse {
        path: path_str,
        source,
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion {
            found: file.format_version,
        });
    }
    if let Some(expected) = expected {
        if file.sensor != expected {
            return Err(ModelIoError::SensorMismatch {
                expected,
                found: file.sensor,
            });
        }
    }

    let names = tensor_names();
    for key in file.tensors.keys() {
        if !names.contains(key) {
            return Err(ModelIoError::UnexpectedTensor { name: key.clone() });
        }
    }
    let mut model = RegressorModel::zeroed(file.config, file.sensor);
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let data = file
            .tensors
            .get(name)
            .ok_or_else(|| ModelIoError::MissingTensor { name: name.clone() })?;
        if data.len() != slot.len() {
            return Err(ModelIoError::ShapeMismatch {
                name: name.clone(),
                expected: slot.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelIoError::NonFinite { name: name.clone() });
        }
        slot.copy_from_slice(data);
    }
    Ok(model)
}
