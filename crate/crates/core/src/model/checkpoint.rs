//! Checkpoint directory format.
//!
//! A checkpoint is a directory holding `config.json` (the model config,
//! profile name, and format version), `index.json` (parameter name →
//! binary file and shape), one `.bin` file per parameter with
//! little-endian 32-bit floats in row-major order, and `vocab.json`
//! (the id-ordered token list, so a saved model can tokenize new text).
//! Loading runs the shape audit and rejects mismatches.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{ModelParams, Profile, ViltConfig};
use crate::tensor::{NamedTensors, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ConfigFile {
    format_version: u32,
    profile: Profile,
    #[serde(flatten)]
    config: ViltConfig,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct IndexEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ViltConfig,
    pub profile: Profile,
    pub params: ModelParams<f32>,
    /// Id-ordered token list (index = token id).
    pub vocab_tokens: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write a checkpoint atomically: the directory is assembled under a
/// temporary name next to the target and renamed into place.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    ckpt.params.audit(&ckpt.config)?;
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into()),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    let config_file = ConfigFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        profile: ckpt.profile,
        config: ckpt.config.clone(),
    };
    write_json(&tmp.join("config.json"), &config_file)?;
    write_json(&tmp.join("vocab.json"), &ckpt.vocab_tokens)?;

    let mut index: BTreeMap<String, IndexEntry> = BTreeMap::new();
    for (name, tensor) in ckpt.params.tensors() {
        let file = format!("{name}.bin");
        let path = tmp.join(&file);
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(io_err(&path))?;
        index.insert(
            name.clone(),
            IndexEntry {
                file,
                shape: tensor.shape().to_vec(),
            },
        );
    }
    write_json(&tmp.join("index.json"), &index)?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let config_path = dir.join("config.json");
    let config_file: ConfigFile = read_json(&config_path)?;
    if config_file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Version(config_file.format_version));
    }
    let vocab_tokens: Vec<String> = read_json(&dir.join("vocab.json"))?;
    let index: BTreeMap<String, IndexEntry> = read_json(&dir.join("index.json"))?;

    let mut tensors: NamedTensors<f32> = BTreeMap::new();
    for (name, entry) in &index {
        let path = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(&path))?;
        if bytes.len() % 4 != 0 {
            return Err(CheckpointError::Malformed {
                path,
                message: format!("length {} is not a multiple of 4", bytes.len()),
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), values).map_err(|e| {
            CheckpointError::Malformed {
                path,
                message: e.to_string(),
            }
        })?;
        tensors.insert(name.clone(), tensor);
    }
    let params = ModelParams::from_tensors(tensors);
    params.audit(&config_file.config)?;
    Ok(Checkpoint {
        config: config_file.config,
        profile: config_file.profile,
        params,
        vocab_tokens,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CheckpointError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, body).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CheckpointError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&body).map_err(|e| CheckpointError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn save_load_round_trip_is_exact() {
        let mut cfg = ViltConfig::desk();
        cfg.vocab_size = 7;
        let params = ModelParams::<f32>::init(&cfg, &RngStream::new(5, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let ckpt = Checkpoint {
            config: cfg.clone(),
            profile: Profile::Desk,
            params: params.clone(),
            vocab_tokens: vec!["<pad>".into(), "<unk>".into(), "hello".into()],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.profile, Profile::Desk);
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.vocab_tokens.len(), 3);
    }

    #[test]
    fn loader_rejects_shape_audit_failures() {
        let mut cfg = ViltConfig::desk();
        cfg.vocab_size = 7;
        let params = ModelParams::<f32>::init(&cfg, &RngStream::new(5, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let ckpt = Checkpoint {
            config: cfg,
            profile: Profile::Desk,
            params,
            vocab_tokens: vec![],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        // truncate one parameter file
        std::fs::write(path.join("cls.emb.bin"), [0u8; 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn save_is_deterministic_byte_for_byte() {
        let mut cfg = ViltConfig::desk();
        cfg.vocab_size = 5;
        let params = ModelParams::<f32>::init(&cfg, &RngStream::new(9, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ckpt = Checkpoint {
            config: cfg,
            profile: Profile::Desk,
            params,
            vocab_tokens: vec!["<pad>".into(), "<unk>".into()],
        };
        save_checkpoint(&a, &ckpt).unwrap();
        save_checkpoint(&b, &ckpt).unwrap();
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let ba = std::fs::read(a.join(&name)).unwrap();
            let bb = std::fs::read(b.join(&name)).unwrap();
            assert_eq!(ba, bb, "{name:?}");
        }
    }
}
