//! Versioned adapter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! [u8; 4]  magic "RKCK"
//! u32      version (1)
//! u8       precision tag: 1 = f32, 2 = f64
//! [u8; 3]  reserved, zero
//! u64      optimizer step the parameters were taken at
//! u32 + N  adapter config, JSON
//! u32 + N  run metadata, JSON (free-form; the training config echo)
//! u32      tensor count
//! per tensor, in layout order
//!   u32 + N  name, UTF-8
//!   u32      rank r
//!   [u32; r] shape
//!   [S; ..]  values
//! u32      CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::datastore::format::write_atomic;
use crate::model::{Adapter, AdapterConfig, AdapterParams, ModelError};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint holds {file} parameters, {requested} requested")]
    PrecisionMismatch { file: Precision, requested: Precision },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub adapter: Adapter<F>,
    pub step: u64,
    pub metadata: String,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(adapter: Adapter<F>, step: u64, metadata: impl Into<String>) -> Self {
        Checkpoint {
            adapter,
            step,
            metadata: metadata.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_str(out: &mut Vec<u8>, s: &str) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(F::PRECISION.tag());
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(
            &mut out,
            &serde_json::to_string(&self.adapter.config).expect("config serializes"),
        );
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.adapter.params.len() as u32).to_le_bytes());
        for (name, t) in self.adapter.params.named() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            t.data().iter().for_each(|v| v.write_le(&mut out));
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let tag = r.take(1)?[0];
        let file = Precision::from_tag(tag).ok_or_else(|| r.corrupt(format!("precision tag {tag}")))?;
        if file != F::PRECISION {
            return Err(CheckpointError::PrecisionMismatch {
                file,
                requested: F::PRECISION,
            });
        }
        r.take(3)?;
        if r.remaining() < 4 {
            return Err(r.corrupt("missing checksum".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config: AdapterConfig =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        config.validate()?;
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let width = F::PRECISION.byte_width();
        let mut named = Vec::with_capacity(count.min(r.remaining()));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(r.corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n > 0 && n.checked_mul(width).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.corrupt(format!("tensor `{name}` shape {shape:?} exceeds the file")))?;
            let data = r.take(numel * width)?.chunks_exact(width).map(F::read_le).collect();
            named.push((name, Tensor::new(shape, data).expect("validated shape")));
        }
        if r.remaining() != 0 {
            return Err(r.corrupt(format!("{} trailing bytes", r.remaining())));
        }
        let params = AdapterParams::from_named(&config, named)?;
        Ok(Checkpoint {
            adapter: Adapter::from_params(config, params)?,
            step,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the precision tag, so callers can pick the matching type.
pub fn peek_precision(path: &Path) -> Result<Precision, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 9 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    Precision::from_tag(bytes[8]).ok_or(CheckpointError::Corrupt {
        offset: 8,
        reason: format!("precision tag {}", bytes[8]),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn corrupt(&self, reason: String) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: self.pos,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(self.corrupt(format!("needs {n} bytes, {} left", self.remaining())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| CheckpointError::Corrupt {
            offset: at,
            reason: e.to_string(),
        })
    }
}
