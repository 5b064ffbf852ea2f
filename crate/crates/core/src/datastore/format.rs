//! Binary layout of an embedding file.
//!
//! All integers and reals are little-endian. `S` is the scalar width named by
//! the precision tag (4 bytes for f32, 8 for f64); targets are always f64.
//!
//! ```text
//! header
//!   0   [u8; 4]  magic "RKAD"
//!   4   u32      format version (1)
//!   8   u8       precision tag: 1 = f32, 2 = f64
//!   9   [u8; 3]  reserved, zero
//!   12  u32      p   patch tokens per item
//!   16  u32      d   embedding width
//!   20  u32      t   text tokens per query
//!   24  u64      item count
//!   32  u32      query count
//!   36  u32      info length L
//!   40  [u8; L]  info, UTF-8
//! query record, repeated query-count times
//!       u32      query id
//!       u32      prompt length N
//!       [u8; N]  prompt, UTF-8
//!       [S; t*d] text tokens, row-major
//! item record, repeated item-count times
//!       u64      item id
//!       u32      query id
//!       f64      target score
//!       u8       has bin: 0 or 1
//!       u32      bin (0 when has bin = 0)
//!       [S; p*d] patch tokens, row-major
//! trailer
//!       u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Nothing may follow the trailer. Item ids are unique, query ids are unique,
//! every item references a query in the table and every stored real is
//! finite.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Dims, EmbeddingFile, Item, Query};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RKAD";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on each of `p`, `d` and `t`.
pub const MAX_EXTENT: usize = 1 << 20;

const HEADER_LEN: usize = 40;
const ITEM_FIXED_LEN: usize = 8 + 4 + 8 + 1 + 4;

/// Which part of the file an error refers to. Indices are 0-based positions
/// in file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Record {
    Header,
    Query(u64),
    Item(u64),
    Trailer,
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Record::Header => write!(f, "header"),
            Record::Query(i) => write!(f, "query record {i}"),
            Record::Item(i) => write!(f, "item record {i}"),
            Record::Trailer => write!(f, "trailer"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {found:?}, expected \"RKAD\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unknown precision tag {tag}")]
    UnknownPrecision { tag: u8 },
    #[error("file stores {file} values but {requested} was requested; convert explicitly")]
    PrecisionMismatch { file: Precision, requested: Precision },
    #[error("truncated {record} at byte {offset}: {field} needs {needed} bytes, {available} left")]
    Truncated {
        offset: usize,
        record: Record,
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid header at byte {offset}: {reason}")]
    InvalidHeader { offset: usize, reason: String },
    #[error("invalid {field} in {record} at byte {offset}: {reason}")]
    InvalidField {
        offset: usize,
        record: Record,
        field: &'static str,
        reason: String,
    },
    #[error("{record}: matrix shape {got:?}, header requires {expected:?}")]
    DimMismatch {
        record: Record,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{record}: non-finite value{}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    NonFinite { offset: Option<usize>, record: Record },
    #[error("{record}: duplicate query id {id}")]
    DuplicateQueryId { id: u32, record: Record },
    #[error("{record}: duplicate item id {id}")]
    DuplicateItemId { id: u64, record: Record },
    #[error("{record}: query id {query_id} not in the query table")]
    UnknownQuery { query_id: u32, record: Record },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{count} unexpected bytes after the trailer at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

/// A file of either precision, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyEmbeddingFile {
    F32(EmbeddingFile<f32>),
    F64(EmbeddingFile<f64>),
}

impl AnyEmbeddingFile {
    pub fn precision(&self) -> Precision {
        match self {
            AnyEmbeddingFile::F32(_) => Precision::F32,
            AnyEmbeddingFile::F64(_) => Precision::F64,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyEmbeddingFile::F32(f) => f.dims,
            AnyEmbeddingFile::F64(f) => f.dims,
        }
    }

    /// Returns the file at precision `F`, converting if it was stored at the
    /// other width. The flag reports whether a conversion happened.
    pub fn into_precision<F: Scalar>(self) -> (EmbeddingFile<F>, bool) {
        let converted = self.precision() != F::PRECISION;
        let file = match self {
            AnyEmbeddingFile::F32(f) => f.cast(),
            AnyEmbeddingFile::F64(f) => f.cast(),
        };
        (file, converted)
    }
}

/// Serializes a validated file.
pub fn encode<F: Scalar>(file: &EmbeddingFile<F>) -> Result<Vec<u8>, FormatError> {
    file.validate()?;
    let Dims { p, d, t } = file.dims;
    let width = F::PRECISION.byte_width();
    let mut out = Vec::with_capacity(
        HEADER_LEN
            + file.info.len()
            + file.queries.len() * (8 + t * d * width)
            + file.items.len() * (ITEM_FIXED_LEN + p * d * width)
            + 4,
    );
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(F::PRECISION.tag());
    out.extend_from_slice(&[0; 3]);
    for extent in [p, d, t] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    out.extend_from_slice(&(file.items.len() as u64).to_le_bytes());
    out.extend_from_slice(&len_u32(file.queries.len(), "query count")?.to_le_bytes());
    out.extend_from_slice(&len_u32(file.info.len(), "info length")?.to_le_bytes());
    out.extend_from_slice(file.info.as_bytes());
    for q in &file.queries {
        out.extend_from_slice(&q.id.to_le_bytes());
        out.extend_from_slice(&len_u32(q.prompt.len(), "prompt length")?.to_le_bytes());
        out.extend_from_slice(q.prompt.as_bytes());
        q.tokens.data().iter().for_each(|v| v.write_le(&mut out));
    }
    for it in &file.items {
        out.extend_from_slice(&it.id.to_le_bytes());
        out.extend_from_slice(&it.query_id.to_le_bytes());
        out.extend_from_slice(&it.target.to_le_bytes());
        out.push(u8::from(it.bin.is_some()));
        out.extend_from_slice(&it.bin.unwrap_or(0).to_le_bytes());
        it.patches.data().iter().for_each(|v| v.write_le(&mut out));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn len_u32(len: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(len).map_err(|_| FormatError::InvalidHeader {
        offset: 0,
        reason: format!("{what} {len} does not fit in u32"),
    })
}

pub fn write_file<F: Scalar>(path: &Path, file: &EmbeddingFile<F>) -> Result<(), FormatError> {
    let bytes = encode(file)?;
    write_atomic(path, &bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temporary file so readers never observe a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn read_file<F: Scalar>(path: &Path) -> Result<EmbeddingFile<F>, FormatError> {
    decode(&read_bytes(path)?)
}

pub fn read_any(path: &Path) -> Result<AnyEmbeddingFile, FormatError> {
    decode_any(&read_bytes(path)?)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes a file stored at precision `F`; a file of the other width is an
/// error rather than a silent conversion.
pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<EmbeddingFile<F>, FormatError> {
    let precision = peek_precision(bytes)?;
    if precision != F::PRECISION {
        return Err(FormatError::PrecisionMismatch {
            file: precision,
            requested: F::PRECISION,
        });
    }
    decode_body(bytes)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyEmbeddingFile, FormatError> {
    match peek_precision(bytes)? {
        Precision::F32 => decode_body(bytes).map(AnyEmbeddingFile::F32),
        Precision::F64 => decode_body(bytes).map(AnyEmbeddingFile::F64),
    }
}

fn peek_precision(bytes: &[u8]) -> Result<Precision, FormatError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, Record::Header, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec() });
    }
    let version = cur.u32(Record::Header, "version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    let tag = cur.u8(Record::Header, "precision tag")?;
    Precision::from_tag(tag).ok_or(FormatError::UnknownPrecision { tag })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, record: Record, field: &'static str) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                record,
                field,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, record: Record, field: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, record, field)?[0])
    }

    fn u32(&mut self, record: Record, field: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, record, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, record: Record, field: &'static str) -> Result<u64, FormatError> {
        let b = self.take(8, record, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, record: Record, field: &'static str) -> Result<f64, FormatError> {
        let b = self.take(8, record, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, len: usize, record: Record, field: &'static str) -> Result<String, FormatError> {
        let offset = self.pos;
        let b = self.take(len, record, field)?;
        String::from_utf8(b.to_vec()).map_err(|e| FormatError::InvalidField {
            offset,
            record,
            field,
            reason: e.to_string(),
        })
    }

    /// Reads a `rows×cols` matrix, checking that the bytes exist before
    /// allocating.
    fn matrix<F: Scalar>(
        &mut self,
        rows: usize,
        cols: usize,
        record: Record,
        field: &'static str,
    ) -> Result<Tensor<F>, FormatError> {
        let width = F::PRECISION.byte_width();
        let offset = self.pos;
        let b = self.take(rows * cols * width, record, field)?;
        let data: Vec<F> = b.chunks_exact(width).map(F::read_le).collect();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                offset: Some(offset + bad * width),
                record,
            });
        }
        Ok(Tensor::new(vec![rows, cols], data).expect("positive extents"))
    }
}

fn decode_body<F: Scalar>(bytes: &[u8]) -> Result<EmbeddingFile<F>, FormatError> {
    let mut cur = Cursor::new(bytes);
    // magic, version and tag were checked by `peek_precision`
    cur.pos = 9;
    let reserved = cur.take(3, Record::Header, "reserved")?;
    if reserved != [0, 0, 0] {
        return Err(FormatError::InvalidHeader {
            offset: 9,
            reason: "reserved bytes are not zero".into(),
        });
    }
    let mut extents = [0usize; 3];
    for (slot, field) in extents.iter_mut().zip(["p", "d", "t"]) {
        let offset = cur.pos;
        let v = cur.u32(Record::Header, field)? as usize;
        if v == 0 || v > MAX_EXTENT {
            return Err(FormatError::InvalidHeader {
                offset,
                reason: format!("{field} = {v} outside 1..={MAX_EXTENT}"),
            });
        }
        *slot = v;
    }
    let [p, d, t] = extents;
    let item_count = cur.u64(Record::Header, "item count")?;
    let query_count = cur.u32(Record::Header, "query count")? as usize;
    let info_len = cur.u32(Record::Header, "info length")? as usize;
    let info = cur.utf8(info_len, Record::Header, "info")?;

    let width = F::PRECISION.byte_width();
    let query_min = 8 + t * d * width;
    let item_len = ITEM_FIXED_LEN + p * d * width;
    // cap preallocation by what the remaining bytes could possibly hold
    let mut queries = Vec::with_capacity(query_count.min(cur.remaining() / query_min));
    let mut query_ids = HashSet::with_capacity(queries.capacity());
    for index in 0..query_count {
        let record = Record::Query(index as u64);
        let id = cur.u32(record, "query id")?;
        let prompt_len = cur.u32(record, "prompt length")? as usize;
        let prompt = cur.utf8(prompt_len, record, "prompt")?;
        let tokens = cur.matrix(t, d, record, "text tokens")?;
        if !query_ids.insert(id) {
            return Err(FormatError::DuplicateQueryId { id, record });
        }
        queries.push(Query { id, prompt, tokens });
    }

    let item_cap = usize::try_from(item_count)
        .unwrap_or(usize::MAX)
        .min(cur.remaining() / item_len);
    let mut items = Vec::with_capacity(item_cap);
    let mut item_ids = HashSet::with_capacity(item_cap);
    for index in 0..item_count {
        let record = Record::Item(index);
        let id = cur.u64(record, "item id")?;
        let query_id = cur.u32(record, "query id")?;
        let target_offset = cur.pos;
        let target = cur.f64(record, "target")?;
        if !target.is_finite() {
            return Err(FormatError::NonFinite {
                offset: Some(target_offset),
                record,
            });
        }
        let flag_offset = cur.pos;
        let has_bin = cur.u8(record, "bin flag")?;
        let bin = cur.u32(record, "bin")?;
        let bin = match (has_bin, bin) {
            (0, 0) => None,
            (1, b) => Some(b),
            _ => {
                return Err(FormatError::InvalidField {
                    offset: flag_offset,
                    record,
                    field: "bin",
                    reason: format!("flag {has_bin} with value {bin}"),
                })
            }
        };
        let patches = cur.matrix(p, d, record, "patch tokens")?;
        if !item_ids.insert(id) {
            return Err(FormatError::DuplicateItemId { id, record });
        }
        if !query_ids.contains(&query_id) {
            return Err(FormatError::UnknownQuery { query_id, record });
        }
        items.push(Item {
            id,
            query_id,
            target,
            bin,
            patches,
        });
    }

    let body_end = cur.pos;
    let stored = cur.u32(Record::Trailer, "checksum")?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    if cur.remaining() != 0 {
        return Err(FormatError::TrailingBytes {
            offset: cur.pos,
            count: cur.remaining(),
        });
    }
    Ok(EmbeddingFile {
        dims: Dims { p, d, t },
        info,
        queries,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample<F: Scalar>(n_items: usize) -> EmbeddingFile<F> {
        let dims = Dims { p: 3, d: 2, t: 2 };
        let mut rng = Rng::new(9);
        let mut file = EmbeddingFile::new(dims, "unit test");
        for id in [7u32, 3] {
            file.queries.push(Query {
                id,
                prompt: format!("query {id} ünïcode"),
                tokens: Tensor::from_fn(&[2, 2], |_| F::from_real(rng.normal())),
            });
        }
        for i in 0..n_items {
            file.items.push(Item {
                id: 100 + i as u64,
                query_id: if i % 2 == 0 { 7 } else { 3 },
                target: rng.normal() * 3.0,
                bin: (i % 3 != 0).then_some(i as u32),
                patches: Tensor::from_fn(&[3, 2], |_| F::from_real(rng.normal())),
            });
        }
        file
    }

    #[test]
    fn empty_item_list_round_trips() {
        let file = sample::<f32>(0);
        let bytes = encode(&file).unwrap();
        assert_eq!(decode::<f32>(&bytes).unwrap(), file);
    }

    #[test]
    fn three_items_round_trip_bit_exact_in_both_precisions() {
        let f32_file = sample::<f32>(3);
        let bytes = encode(&f32_file).unwrap();
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back, f32_file);
        assert_eq!(encode(&back).unwrap(), bytes);

        let f64_file = sample::<f64>(3);
        let bytes = encode(&f64_file).unwrap();
        let back = decode::<f64>(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert!(matches!(decode_any(&bytes).unwrap(), AnyEmbeddingFile::F64(_)));
    }

    #[test]
    fn precision_is_never_converted_silently() {
        let bytes = encode(&sample::<f64>(2)).unwrap();
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(FormatError::PrecisionMismatch {
                file: Precision::F64,
                requested: Precision::F32
            })
        ));
        let (file, converted) = decode_any(&bytes).unwrap().into_precision::<f32>();
        assert!(converted);
        assert_eq!(file.items.len(), 2);
    }

    #[test]
    fn truncation_mid_record_reports_offset() {
        let bytes = encode(&sample::<f32>(3)).unwrap();
        let item_len = ITEM_FIXED_LEN + 3 * 2 * 4;
        // cut inside the last item's patch matrix
        let cut = bytes.len() - 4 - item_len / 2;
        match decode::<f32>(&bytes[..cut]) {
            Err(FormatError::Truncated { offset, record, .. }) => {
                assert_eq!(record, Record::Item(2));
                assert!(offset <= cut);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode(&sample::<f32>(1)).unwrap();
        assert!(matches!(decode::<f32>(b"RKA"), Err(FormatError::Truncated { .. })));
        bytes[4] = 9;
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(FormatError::UnsupportedVersion { found: 9 })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn payload_corruption_fails_checksum() {
        let mut bytes = encode(&sample::<f32>(2)).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(FormatError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample::<f32>(1)).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(FormatError::TrailingBytes { count: 1, .. })
        ));
    }

    #[test]
    fn writer_rejects_invalid_records() {
        let mut file = sample::<f32>(2);
        file.items[1].id = file.items[0].id;
        assert!(matches!(
            encode(&file),
            Err(FormatError::DuplicateItemId {
                record: Record::Item(1),
                ..
            })
        ));

        let mut file = sample::<f32>(2);
        file.items[0].query_id = 99;
        assert!(matches!(
            encode(&file),
            Err(FormatError::UnknownQuery { query_id: 99, .. })
        ));

        let mut file = sample::<f32>(2);
        file.items[1].patches = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            encode(&file),
            Err(FormatError::DimMismatch {
                record: Record::Item(1),
                ..
            })
        ));

        let mut file = sample::<f32>(1);
        file.items[0].target = f64::NAN;
        assert!(matches!(encode(&file), Err(FormatError::NonFinite { .. })));
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rkad");
        let file = sample::<f64>(4);
        write_file(&path, &file).unwrap();
        assert_eq!(read_file::<f64>(&path).unwrap(), file);
        assert!(matches!(
            read_file::<f64>(&dir.path().join("missing")),
            Err(FormatError::Io { .. })
        ));
    }
}
