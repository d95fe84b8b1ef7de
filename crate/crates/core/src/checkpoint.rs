//! Checkpoint files: a JSON manifest next to a binary weights blob.
//!
//! The manifest (`model.json`) records dimensions, hyperparameters, both
//! dictionaries, and the name and SHA-256 of the blob. The blob
//! (`model.ibw`) is little-endian:
//!
//! ```text
//! "IBW1" u32 version=1 u32 V u32 d_e u32 d_v u32 A
//! E   (d_e × V, row-major)
//! M_w (A × d_e, row-major)
//! M_v (A × d_v, row-major)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, Matrix, Model, ModelParams};
use crate::vocab::{AnswerDict, Vocabulary, WordDict};

const BLOB_MAGIC: &[u8; 4] = b"IBW1";
const FORMAT_VERSION: u32 = 1;
const BLOB_HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "V")]
    vocab_size: usize,
    d_e: usize,
    d_v: usize,
    #[serde(rename = "A")]
    classes: usize,
    hyperparams: Hyperparams,
    word_dict: WordDict,
    answer_dict: AnswerDict,
    weights: String,
    weights_sha256: String,
}

/// Path of the weights blob written next to `manifest_path`.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("ibw")
}

fn encode_blob(params: &ModelParams) -> Vec<u8> {
    let e = params.embedding.transpose();
    let mut out = Vec::with_capacity(
        BLOB_HEADER_LEN + 4 * (e.as_slice().len() + params.m_w.as_slice().len() + params.m_v.as_slice().len()),
    );
    out.extend_from_slice(BLOB_MAGIC);
    for field in [
        FORMAT_VERSION,
        params.vocab_size() as u32,
        params.embed_dim() as u32,
        params.image_dim() as u32,
        params.num_classes() as u32,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for m in [&e, &params.m_w, &params.m_v] {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_blob(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < BLOB_HEADER_LEN {
        return Err(Error::Checkpoint(format!("weights blob truncated to {} bytes", bytes.len())));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(Error::Checkpoint("weights blob has bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if field(0) != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported weights version {}", field(0))));
    }
    let (v, d_e, d_v, a) = (field(1), field(2), field(3), field(4));
    let sizes = [d_e * v, a * d_e, a * d_v];
    let expected = BLOB_HEADER_LEN + 4 * sizes.iter().sum::<usize>();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "weights blob is {} bytes, dimensions require {expected}",
            bytes.len()
        )));
    }
    let mut at = BLOB_HEADER_LEN;
    let mut take = |n: usize| {
        let vals: Vec<f32> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * n;
        vals
    };
    let e = Matrix::from_vec(d_e, v, take(sizes[0]))?;
    let m_w = Matrix::from_vec(a, d_e, take(sizes[1]))?;
    let m_v = Matrix::from_vec(a, d_v, take(sizes[2]))?;
    ModelParams::from_parts(e.transpose(), m_w, m_v)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the manifest to `path` and the weights blob beside it.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let blob = encode_blob(&model.params);
    let blob_file = blob_path(path);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        vocab_size: model.params.vocab_size(),
        d_e: model.params.embed_dim(),
        d_v: model.params.image_dim(),
        classes: model.params.num_classes(),
        hyperparams: model.hyper.clone(),
        word_dict: model.vocab.word_dict.clone(),
        answer_dict: model.vocab.answer_dict.clone(),
        weights: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Argument(format!("unusable checkpoint path {}", path.display())))?
            .to_string(),
        weights_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// A loaded checkpoint and a stable fingerprint of its bytes.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub fingerprint: String,
}

pub fn load(path: &Path) -> Result<Model> {
    load_checked(path, None, None).map(|c| c.model)
}

/// Loads a checkpoint, optionally requiring specific vocabulary and answer
/// counts.
pub fn load_checked(
    path: &Path,
    expected_vocab: Option<usize>,
    expected_classes: Option<usize>,
) -> Result<LoadedCheckpoint> {
    let manifest_bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable manifest: {e}", path.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported manifest version {}", manifest.version)));
    }
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.weights);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let params = decode_blob(&blob)?;
    if sha256_hex(&blob) != manifest.weights_sha256 {
        return Err(Error::Checkpoint("weights blob does not match manifest checksum".into()));
    }
    let dims = (params.vocab_size(), params.embed_dim(), params.image_dim(), params.num_classes());
    if dims != (manifest.vocab_size, manifest.d_e, manifest.d_v, manifest.classes) {
        return Err(Error::Checkpoint(format!(
            "manifest dimensions {:?} disagree with weights {dims:?}",
            (manifest.vocab_size, manifest.d_e, manifest.d_v, manifest.classes)
        )));
    }
    if let Some(v) = expected_vocab.filter(|&v| v != manifest.vocab_size) {
        return Err(Error::Checkpoint(format!("checkpoint has V={}, expected {v}", manifest.vocab_size)));
    }
    if let Some(a) = expected_classes.filter(|&a| a != manifest.classes) {
        return Err(Error::Checkpoint(format!("checkpoint has A={}, expected {a}", manifest.classes)));
    }
    let vocab = Vocabulary {
        word_dict: manifest.word_dict,
        answer_dict: manifest.answer_dict,
    };
    let model = Model::new(params, vocab, manifest.hyperparams)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    hasher.update(&blob);
    Ok(LoadedCheckpoint {
        model,
        fingerprint: hex::encode(hasher.finalize()),
    })
}
