//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, u64 header length, JSON header (model config,
//! vocabulary hash, parameter names and shapes), then every parameter as
//! little-endian f64 in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::retrieval::Cursor;

const MAGIC: &[u8; 8] = b"ESCCKPT\x01";

pub const BEST_CHECKPOINT: &str = "best.bin";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("ckpt-epoch{epoch}.bin")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    epoch: Option<usize>,
    params: Vec<(String, [usize; 2])>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_hash: String,
    pub epoch: Option<usize>,
}

pub fn to_bytes(model: &Model, vocab_hash: &str, epoch: Option<usize>) -> Vec<u8> {
    let store = &model.store;
    let header = Header {
        config: model.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        epoch,
        params: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()]))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in store.values() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds the model. Fails when `expected_vocab_hash` is given and differs.
pub fn from_bytes(bytes: &[u8], expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    if cur.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file"));
    }
    let len = cur.u64().ok_or_else(|| bad("truncated header length"))? as usize;
    let json = cur.take(len).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(expected) = expected_vocab_hash {
        if expected != header.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: expected.to_string(),
                found: header.vocab_hash,
            });
        }
    }
    let mut model = Model::new(header.config)?;
    if model.store.len() != header.params.len() {
        return Err(bad(format!(
            "{} parameters stored, architecture has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for (id, (name, shape)) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
        if model.store.name(id) != name {
            return Err(bad(format!("expected parameter {}, found {name}", model.store.name(id))));
        }
        let value = model.store.value_mut(id);
        if value.dim() != (shape[0], shape[1]) {
            return Err(bad(format!("shape mismatch for {name}")));
        }
        for x in value.iter_mut() {
            *x = cur.f64().ok_or_else(|| bad(format!("truncated data in {name}")))?;
        }
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        model,
        vocab_hash: header.vocab_hash,
        epoch: header.epoch,
    })
}

pub fn save(path: impl AsRef<Path>, model: &Model, vocab_hash: &str, epoch: Option<usize>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &to_bytes(model, vocab_hash, epoch))
}

pub fn load(path: impl AsRef<Path>, expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected_vocab_hash)
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            vocab_size: 20,
            cog_len: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut model = tiny();
        model.store.value_mut(model.fusion_weights)[[0, 2]] = 0.375;
        let bytes = to_bytes(&model, "abc", Some(7));
        let back = from_bytes(&bytes, Some("abc")).unwrap();
        assert_eq!(back.epoch, Some(7));
        for (a, b) in model.store.values().iter().zip(back.model.store.values()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let bytes = to_bytes(&tiny(), "abc", None);
        assert!(matches!(
            from_bytes(&bytes, Some("xyz")),
            Err(Error::VocabMismatch { .. })
        ));
        assert!(from_bytes(&bytes[..bytes.len() - 3], None).is_err());
        assert!(from_bytes(b"garbage!", None).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(BEST_CHECKPOINT);
        save(&path, &tiny(), "h", None).unwrap();
        assert!(load(&path, Some("h")).is_ok());
        assert!(matches!(
            load(dir.path().join("nope.bin"), None),
            Err(Error::MissingArtifact(_))
        ));
        assert_eq!(epoch_checkpoint_name(3), "ckpt-epoch3.bin");
    }
}
