//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OVDC" | u32 version | u32 header_len | header JSON
//! u32 n_params | per parameter, sorted by name:
//!     u32 name_len | name | u32 rank | u32 extents[rank] | f32 values[numel]
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"OVDC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub stage: Stage,
    pub vocab_hash: String,
    pub vocabulary: Vec<String>,
    /// Training step the parameters were taken at.
    #[serde(default)]
    pub step: u64,
}

/// Serializes a model. Values are stored as 32-bit floats.
pub fn to_bytes(model: &Model, step: u64) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        stage: model.stage,
        vocab_hash: model.vocab.hash(),
        vocabulary: model.vocab.tokens().to_vec(),
        step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 16 + model.params.numel() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, len_u32(json.len())?);
    out.extend_from_slice(&json);
    put_u32(&mut out, len_u32(model.params.len())?);
    for (name, t) in model.params.iter() {
        put_u32(&mut out, len_u32(name.len())?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.shape().len())?);
        for &e in t.shape() {
            put_u32(&mut out, len_u32(e)?);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::config("checkpoint field exceeds u32"))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads only the header, after checking magic and version.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { buf: bytes, pos: 0 };
    Ok(header_from(&mut r)?)
}

fn header_from(r: &mut Reader<'_>) -> Result<Header, CheckpointError> {
    let magic = r.take(4).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    serde_json::from_slice(json).map_err(|e| CheckpointError::BadHeader(e.to_string()))
}

/// Parses a checkpoint. When `vocab` is given its hash must match the header.
pub fn from_bytes(bytes: &[u8], vocab: Option<&Vocabulary>) -> Result<(Model, u64)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = header_from(&mut r)?;
    let embedded = Vocabulary::from_tokens(header.vocabulary.clone())
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if embedded.hash() != header.vocab_hash {
        return Err(CheckpointError::BadHeader(
            "embedded vocabulary does not match its hash".into(),
        )
        .into());
    }
    if let Some(v) = vocab {
        if v.hash() != header.vocab_hash {
            return Err(CheckpointError::Incompatible {
                checkpoint: header.vocab_hash,
                provided: v.hash(),
            }
            .into());
        }
    }

    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadHeader("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::ShapeMismatch {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        if params.contains(&name) {
            return Err(CheckpointError::BadHeader(format!("duplicate parameter {name}")).into());
        }
        params.put(name, t);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::BadHeader("trailing bytes after parameters".into()).into());
    }

    let expected = Model::init(header.config.clone(), embedded.clone(), header.stage, 0)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    check_shapes(&expected.params, &params)?;
    Ok((
        Model {
            config: expected.config,
            stage: header.stage,
            vocab: embedded,
            params,
        },
        header.step,
    ))
}

fn check_shapes(expected: &ParamStore, found: &ParamStore) -> Result<(), CheckpointError> {
    for (name, t) in expected.iter() {
        match found.get(name) {
            None => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    detail: "missing".into(),
                })
            }
            Some(f) if f.shape() != t.shape() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    detail: format!("expected {:?}, found {:?}", t.shape(), f.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = found.names().find(|n| !expected.contains(n)) {
        return Err(CheckpointError::ShapeMismatch {
            name: extra.to_string(),
            detail: "not part of the configured architecture".into(),
        });
    }
    Ok(())
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, step: u64, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model, step)?)
}

pub fn load_checkpoint(path: &Path, vocab: Option<&Vocabulary>) -> Result<(Model, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, vocab)
}
