//! Checkpoints: a JSON manifest plus a blob of little-endian `f64`s.
//!
//! The manifest at `path` lists the format version, training config,
//! question vocabulary and each parameter's name, shape and offset (in
//! values) into the blob at `path` with its extension replaced by `bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TrainConfig, TrainedModel};
use crate::autodiff::Tensor;
use crate::data::QuestionVocab;
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint path must not end in .bin: {0}")]
    BlobCollision(String),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    questions: QuestionVocab,
    blob: String,
    params: Vec<ParamEntry>,
}

pub fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the blob first, then the manifest; both land atomically.
pub fn save_checkpoint(trained: &TrainedModel, path: &Path) -> Result<(), CheckpointError> {
    if path.extension().is_some_and(|e| e == "bin") {
        return Err(CheckpointError::BlobCollision(path.display().to_string()));
    }
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(trained.store.num_scalars() * 8);
    let mut params = Vec::with_capacity(trained.store.len());
    let mut offset = 0;
    for (_, p) in trained.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel();
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: trained.config.clone(),
        questions: trained.vocab.clone(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&blob, &bytes).map_err(io_err(&blob))?;
    write_atomic(path, &json).map_err(|e| {
        let _ = fs::remove_file(&blob);
        io_err(path)(e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel, CheckpointError> {
    let text = fs::read(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(io_err(&blob_file))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Mismatch(format!("blob length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut trained = TrainedModel::init(&manifest.config, &manifest.questions);
    if manifest.params.len() != trained.store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters in manifest, model has {}",
            manifest.params.len(),
            trained.store.len()
        )));
    }
    for (entry, p) in manifest.params.iter().zip(trained.store.iter_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} {:?}, found {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )));
        }
        let n = p.value.numel();
        let slice = values.get(entry.offset..entry.offset + n).ok_or_else(|| {
            CheckpointError::Mismatch(format!("{} runs past the end of the blob", entry.name))
        })?;
        p.value = Tensor::new(entry.shape.clone(), slice.to_vec())
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    }
    Ok(trained)
}
