//! Bit-exact checkpoint serialization.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! manifest.json   — format version, model config, tensor table, metadata
//! weights.bin     — little-endian IEEE-754 float32, tensors in manifest
//!                   order, row-major, no padding
//! vocab.txt       — the vocabulary the model was built against
//! ```
//!
//! Identical parameters always serialize to identical bytes (fixed
//! endianness, sorted metadata keys, no timestamps inside the weight
//! files), so `save → load → save` is byte-stable and digests are
//! meaningful.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{zero_shapes, ModelConfig, ModelParameters};
use crate::vocab::{save_vocab, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unknown checkpoint format version {found} (supported: {supported})")]
    UnknownFormatVersion { found: u32, supported: u32 },
    #[error("tensor {name} missing from manifest")]
    MissingTensor { name: String },
    #[error("unexpected tensor {name} in manifest")]
    UnexpectedTensor { name: String },
    #[error("tensor {name} shape mismatch: config requires {expected:?}, manifest has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name} offset/length inconsistent: expected offset {expected_offset}, length {expected_length}")]
    BadLayout {
        name: String,
        expected_offset: u64,
        expected_length: u64,
    },
    #[error("weights blob truncated: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: u64, found: u64 },
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("vocabulary has {vocab} pieces but config.vocab_size is {config}")]
    VocabSizeMismatch { vocab: usize, config: usize },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub vocab_file: String,
    pub metadata: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes parameters, the vocabulary, and free-form metadata into `dir`
/// (created if needed). Tensors are written in canonical visit order.
pub fn save_checkpoint(
    params: &ModelParameters<f32>,
    vocab: &Vocabulary,
    metadata: &BTreeMap<String, String>,
    dir: impl AsRef<Path>,
) -> Result<CheckpointManifest, CheckpointError> {
    let dir = dir.as_ref();
    if vocab.len() != params.config.vocab_size {
        return Err(CheckpointError::VocabSizeMismatch {
            vocab: vocab.len(),
            config: params.config.vocab_size,
        });
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    params.visit(|name, tensor| {
        let offset = blob.len() as u64;
        for &x in tensor.iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: vec![tensor.nrows(), tensor.ncols()],
            offset,
            length: blob.len() as u64 - offset,
        });
    });

    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors,
        vocab_file: VOCAB_FILE.to_string(),
        metadata: metadata.clone(),
    };

    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights_path, &blob).map_err(io_err(&weights_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest_json = serde_json::to_string_pretty(&manifest)?;
    manifest_json.push('\n');
    std::fs::write(&manifest_path, manifest_json).map_err(io_err(&manifest_path))?;
    save_vocab(vocab, dir.join(VOCAB_FILE))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest, CheckpointError> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownFormatVersion {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads and validates a checkpoint: every tensor required by the config
/// present exactly once with the right shape, offsets contiguous and
/// ascending, blob exactly the advertised size.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
) -> Result<(ModelParameters<f32>, CheckpointManifest), CheckpointError> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    manifest.config.validate()?;

    let mut params = zero_shapes::<f32>(&manifest.config);

    // Expected layout (canonical order) from the config alone.
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    params.visit(|name, t| expected.push((name.to_string(), vec![t.nrows(), t.ncols()])));

    for (name, _) in &expected {
        if !manifest.tensors.iter().any(|e| &e.name == name) {
            return Err(CheckpointError::MissingTensor { name: name.clone() });
        }
    }
    for entry in &manifest.tensors {
        if !expected.iter().any(|(name, _)| name == &entry.name) {
            return Err(CheckpointError::UnexpectedTensor {
                name: entry.name.clone(),
            });
        }
    }
    // Exactly-once now follows from set equality unless there are dupes.
    if manifest.tensors.len() != expected.len() {
        let mut seen = std::collections::HashSet::new();
        for entry in &manifest.tensors {
            if !seen.insert(&entry.name) {
                return Err(CheckpointError::UnexpectedTensor {
                    name: entry.name.clone(),
                });
            }
        }
    }

    let mut offset = 0u64;
    for entry in &manifest.tensors {
        let (_, shape) = expected
            .iter()
            .find(|(name, _)| name == &entry.name)
            .expect("checked above");
        if &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let expected_length = (shape.iter().product::<usize>() * 4) as u64;
        if entry.offset != offset || entry.length != expected_length {
            return Err(CheckpointError::BadLayout {
                name: entry.name.clone(),
                expected_offset: offset,
                expected_length,
            });
        }
        offset += expected_length;
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&weights_path).map_err(io_err(&weights_path))?;
    if blob.len() as u64 != offset {
        return Err(CheckpointError::TruncatedBlob {
            expected: offset,
            found: blob.len() as u64,
        });
    }

    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    params.visit_mut(|name, tensor| {
        let entry = by_name[name];
        let start = entry.offset as usize;
        for (i, x) in tensor.iter_mut().enumerate() {
            let b = start + i * 4;
            *x = f32::from_le_bytes([blob[b], blob[b + 1], blob[b + 2], blob[b + 3]]);
        }
    });

    Ok((params, manifest))
}

/// Loads the vocabulary stored beside a checkpoint.
pub fn load_checkpoint_vocab(
    dir: impl AsRef<Path>,
    manifest: &CheckpointManifest,
) -> Result<Vocabulary, CheckpointError> {
    Ok(crate::vocab::load_vocab(dir.as_ref().join(&manifest.vocab_file))?)
}

/// Short content identifier for lineage records: hex SHA-256 prefix of the
/// weights blob.
pub fn checkpoint_id(dir: impl AsRef<Path>) -> Result<String, CheckpointError> {
    let path: PathBuf = dir.as_ref().join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    Ok(crate::digest::sha256_hex(&bytes)[..16].to_string())
}
