//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.json     model config + adapter table
//! <dir>/index.json      per container: file, sha256, tensor shapes/offsets
//! <dir>/vision.bin      vision.base tensors
//! <dir>/projector.bin
//! <dir>/lm.bin
//! <dir>/adapters.bin    vision.lora tensors
//! ```
//!
//! Containers hold raw little-endian `f64` values in index order. Loading
//! recomputes every container digest and rejects mismatches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vlm::LoraAdapter;
use super::{Matrix, ModelConfig, ModelError, ParamGroup, ParamStore, ToyVlm};

#[derive(Debug, Serialize, Deserialize)]
struct StoredConfig {
    model: ModelConfig,
    adapters: Vec<StoredAdapter>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredAdapter {
    target: String,
    rank: usize,
    alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in values (not bytes) into the container.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub group: ParamGroup,
    pub file: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub containers: Vec<ContainerEntry>,
}

fn container_file(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::VisionBase => "vision.bin",
        ParamGroup::VisionLora => "adapters.bin",
        ParamGroup::Projector => "projector.bin",
        ParamGroup::Lm => "lm.bin",
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(model: &ToyVlm, dir: &Path) -> Result<CheckpointIndex, ModelError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config = StoredConfig {
        model: model.config.clone(),
        adapters: model
            .adapters
            .values()
            .map(|a| StoredAdapter {
                target: a.target.clone(),
                rank: a.rank,
                alpha: a.alpha,
            })
            .collect(),
    };
    let config_path = dir.join("config.json");
    fs::write(&config_path, serde_json::to_vec_pretty(&config).expect("config serializes")).map_err(io_err(&config_path))?;

    let mut containers = Vec::new();
    for group in ParamGroup::ALL {
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, p) in model.params.iter().filter(|(_, p)| p.group == group) {
            tensors.push(TensorEntry {
                name: name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                offset,
            });
            offset += p.value.len();
            bytes.extend_from_slice(&p.value.to_le_bytes());
        }
        if tensors.is_empty() {
            continue;
        }
        let file = container_file(group);
        let path = dir.join(file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        containers.push(ContainerEntry {
            group,
            file: file.to_string(),
            sha256: sha256_hex(&bytes),
            tensors,
        });
    }
    let index = CheckpointIndex { containers };
    let index_path = dir.join("index.json");
    fs::write(&index_path, serde_json::to_vec_pretty(&index).expect("index serializes")).map_err(io_err(&index_path))?;
    Ok(index)
}

pub fn load_checkpoint(dir: &Path) -> Result<ToyVlm, ModelError> {
    let config_path = dir.join("config.json");
    let config: StoredConfig = serde_json::from_slice(&fs::read(&config_path).map_err(io_err(&config_path))?)
        .map_err(|e| ModelError::Checkpoint(format!("config.json: {e}")))?;
    let index_path = dir.join("index.json");
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(&index_path).map_err(io_err(&index_path))?)
        .map_err(|e| ModelError::Checkpoint(format!("index.json: {e}")))?;

    let mut params = ParamStore::default();
    for c in &index.containers {
        let path = dir.join(&c.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let digest = sha256_hex(&bytes);
        if digest != c.sha256 {
            return Err(ModelError::Checkpoint(format!(
                "checksum mismatch for {}: index {}, file {digest}",
                c.file, c.sha256
            )));
        }
        if bytes.len() % 8 != 0 {
            return Err(ModelError::Checkpoint(format!("{} is not a whole number of f64 values", c.file)));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        for t in &c.tensors {
            let end = t.offset + t.rows * t.cols;
            if end > values.len() {
                return Err(ModelError::Checkpoint(format!("tensor {} runs past the end of {}", t.name, c.file)));
            }
            params.insert(
                t.name.clone(),
                c.group,
                Matrix::from_vec(t.rows, t.cols, values[t.offset..end].to_vec()),
            );
        }
    }
    let adapters: BTreeMap<String, LoraAdapter> = config
        .adapters
        .into_iter()
        .map(|a| {
            (
                a.target.clone(),
                LoraAdapter {
                    target: a.target,
                    rank: a.rank,
                    alpha: a.alpha,
                },
            )
        })
        .collect();
    ToyVlm::from_parts(config.model, params, adapters)
}
