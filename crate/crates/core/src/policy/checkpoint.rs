//! On-disk checkpoints: a directory holding `manifest.json` and `params.bin`.
//!
//! `params.bin` is the magic bytes, a little-endian `u64` parameter count and
//! then every parameter as a little-endian `f32`, in tensor order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{tensor_shapes, PolicyConfig, ReferencePolicy};
use super::{PolicyError, Vocabulary};

pub const CHECKPOINT_MAGIC: &str = "DPUA1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub format_version: u32,
    pub config: PolicyConfig,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<TensorEntry>,
    pub param_count: usize,
    /// Hash of the architecture and vocabulary; two checkpoints with equal
    /// hashes are interchangeable as policies.
    pub config_hash: String,
    pub params_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Identity of a model's shape: architecture plus vocabulary.
pub fn config_hash(config: &PolicyConfig, vocab: &Vocabulary) -> String {
    let value = serde_json::json!({ "config": config, "vocabulary": vocab });
    sha256_hex(value.to_string().as_bytes())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PolicyError + '_ {
    move |e| PolicyError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn encode_blob(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + params.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

fn decode_blob(bytes: &[u8], expected: usize) -> Result<Vec<f64>, PolicyError> {
    let corrupt = |m: &str| PolicyError::CorruptCheckpoint(m.to_string());
    let header = CHECKPOINT_MAGIC.len() + 8;
    if bytes.len() < header || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(corrupt("bad blob header"));
    }
    let count = u64::from_le_bytes(bytes[CHECKPOINT_MAGIC.len()..header].try_into().unwrap());
    if count as usize != expected {
        return Err(corrupt("blob parameter count disagrees with manifest"));
    }
    let body = &bytes[header..];
    if body.len() != expected * 4 {
        return Err(corrupt("blob truncated or padded"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Write a checkpoint directory atomically. Refuses to overwrite.
pub fn save_checkpoint(policy: &ReferencePolicy, dir: &Path) -> Result<CheckpointManifest, PolicyError> {
    if dir.exists() {
        return Err(PolicyError::AlreadyExists(dir.display().to_string()));
    }
    let blob = encode_blob(policy.params());
    let manifest = CheckpointManifest {
        magic: CHECKPOINT_MAGIC.to_string(),
        format_version: CHECKPOINT_VERSION,
        config: policy.config().clone(),
        vocabulary: policy.vocab().clone(),
        tensors: tensor_shapes(policy.config(), policy.vocab().len())
            .into_iter()
            .map(|(name, shape)| TensorEntry {
                name: name.to_string(),
                shape,
            })
            .collect(),
        param_count: policy.num_params(),
        config_hash: config_hash(policy.config(), policy.vocab()),
        params_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PolicyError::CorruptCheckpoint(e.to_string()))?;

    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;
    fs::write(tmp.join(BLOB), &blob).map_err(io_err(&tmp))?;
    fs::write(tmp.join(MANIFEST), json).map_err(io_err(&tmp))?;
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(manifest)
}

/// Load and verify a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<ReferencePolicy, PolicyError> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| PolicyError::CorruptCheckpoint(format!("manifest: {e}")))?;
    if value.get("magic").and_then(|m| m.as_str()) != Some(CHECKPOINT_MAGIC) {
        return Err(PolicyError::CorruptCheckpoint("bad manifest magic".into()));
    }
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(PolicyError::VersionMismatch(format!(
            "format version {version:?}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let manifest: CheckpointManifest = serde_json::from_value(value)
        .map_err(|e| PolicyError::CorruptCheckpoint(format!("manifest: {e}")))?;
    if config_hash(&manifest.config, &manifest.vocabulary) != manifest.config_hash {
        return Err(PolicyError::CorruptCheckpoint("config hash mismatch".into()));
    }

    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if sha256_hex(&blob) != manifest.params_sha256 {
        return Err(PolicyError::CorruptCheckpoint("parameter hash mismatch".into()));
    }
    let params = decode_blob(&blob, manifest.param_count)?;
    ReferencePolicy::from_parts(manifest.config, manifest.vocabulary, params)
        .map_err(|e| PolicyError::CorruptCheckpoint(e.to_string()))
}

/// Load, requiring a specific architecture/vocabulary hash.
pub fn load_checkpoint_expecting(
    dir: &Path,
    expected_config_hash: &str,
) -> Result<ReferencePolicy, PolicyError> {
    let policy = load_checkpoint(dir)?;
    let found = config_hash(policy.config(), policy.vocab());
    if found != expected_config_hash {
        return Err(PolicyError::VersionMismatch(format!(
            "config hash {found}, expected {expected_config_hash}"
        )));
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> ReferencePolicy {
        let vocab = Vocabulary::build(["a b c Prediction : Rationale Confidence"], 200);
        ReferencePolicy::new(PolicyConfig::tiny(), vocab, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy();
        let path = dir.path().join("ckpt");
        let manifest = save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(p, back);
        assert_eq!(manifest.param_count, p.num_params());
        let back = load_checkpoint_expecting(&path, &manifest.config_hash).unwrap();
        assert_eq!(p.params(), back.params());
    }

    #[test]
    fn refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy();
        let path = dir.path().join("ckpt");
        save_checkpoint(&p, &path).unwrap();
        assert!(matches!(
            save_checkpoint(&p, &path),
            Err(PolicyError::AlreadyExists(_))
        ));
    }

    #[test]
    fn truncation_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&policy(), &path).unwrap();
        let blob = path.join(BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(PolicyError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn version_and_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&policy(), &path).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(&path, "deadbeef"),
            Err(PolicyError::VersionMismatch(_))
        ));
        let m = path.join(MANIFEST);
        let text = fs::read_to_string(&m)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&m, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(PolicyError::VersionMismatch(_))
        ));
    }
}
