//! Checkpoint directory format: `manifest.json` describing config, tensor
//! names, shapes and byte offsets, next to `tensors.bin` holding row-major
//! little-endian f32 data concatenated in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::{MlmModel, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {message}")]
    BadManifest { path: String, message: String },
    #[error("tensor {name}: manifest shape {expected:?} does not match config shape {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unsupported dtype {0:?} (only \"f32\")")]
    BadDtype(String),
    #[error("model error: {0}")]
    Model(#[from] super::net::ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorMeta>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(model: &MlmModel<f32>, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let names = ParamSet::<f32>::tensor_names(model.config.layers);
    let shapes = model.params.tensor_shapes();
    let slices = model.params.tensor_slices();

    let mut tensors = Vec::with_capacity(names.len());
    let mut offset = 0u64;
    let bin_path = dir.join("tensors.bin");
    let mut bin =
        std::io::BufWriter::new(std::fs::File::create(&bin_path).map_err(io_err(&bin_path))?);
    for ((name, shape), slice) in names.into_iter().zip(shapes).zip(slices) {
        let byte_len = (slice.len() * 4) as u64;
        tensors.push(TensorMeta {
            name,
            shape,
            offset,
            byte_len,
        });
        let mut buf = Vec::with_capacity(slice.len() * 4);
        for v in slice {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&buf).map_err(io_err(&bin_path))?;
        offset += byte_len;
    }
    bin.flush().map_err(io_err(&bin_path))?;

    let manifest = Manifest {
        config: model.config.clone(),
        dtype: "f32".to_string(),
        tensors,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<MlmModel<f32>, CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::BadManifest {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
    if manifest.dtype != "f32" {
        return Err(CheckpointError::BadDtype(manifest.dtype));
    }
    manifest.config.validate()?;

    let mut model = MlmModel::<f32> {
        config: manifest.config.clone(),
        params: ParamSet::zeros(&manifest.config),
    };
    let expected_names = ParamSet::<f32>::tensor_names(manifest.config.layers);
    if manifest.tensors.len() != expected_names.len() {
        return Err(CheckpointError::BadManifest {
            path: manifest_path.display().to_string(),
            message: format!(
                "expected {} tensors, found {}",
                expected_names.len(),
                manifest.tensors.len()
            ),
        });
    }

    let bin_path = dir.join("tensors.bin");
    let mut bin = std::fs::File::open(&bin_path).map_err(io_err(&bin_path))?;
    let shapes = model.params.tensor_shapes();
    let mut slices = model.params.tensor_slices_mut();
    for (i, meta) in manifest.tensors.iter().enumerate() {
        if meta.name != expected_names[i] {
            return Err(CheckpointError::BadManifest {
                path: manifest_path.display().to_string(),
                message: format!(
                    "tensor {i}: expected name {:?}, found {:?}",
                    expected_names[i], meta.name
                ),
            });
        }
        if meta.shape != shapes[i] {
            return Err(CheckpointError::ShapeMismatch {
                name: meta.name.clone(),
                expected: meta.shape.clone(),
                actual: shapes[i].clone(),
            });
        }
        let slice = &mut slices[i];
        if meta.byte_len as usize != slice.len() * 4 {
            return Err(CheckpointError::BadManifest {
                path: manifest_path.display().to_string(),
                message: format!("tensor {:?}: byte length mismatch", meta.name),
            });
        }
        let mut buf = vec![0u8; meta.byte_len as usize];
        bin.read_exact(&mut buf).map_err(io_err(&bin_path))?;
        for (j, chunk) in buf.chunks_exact(4).enumerate() {
            slice[j] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            ff: 16,
            max_seq_len: 8,
            vocab_size: 20,
            seed: 3,
        };
        let model: MlmModel<f32> = MlmModel::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model
            .params
            .tensor_slices()
            .iter()
            .zip(loaded.params.tensor_slices())
        {
            let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let cfg = ModelConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ff: 16,
            max_seq_len: 8,
            vocab_size: 12,
            seed: 3,
        };
        let model: MlmModel<f32> = MlmModel::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        // Corrupt the manifest: claim a different vocab size.
        let manifest_path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let text = text.replace("\"vocab_size\": 12", "\"vocab_size\": 13");
        std::fs::write(&manifest_path, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
