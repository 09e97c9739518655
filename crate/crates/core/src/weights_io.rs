//! NTC v1: a flat little-endian container of named `f32` tensors.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NTC1"
//! 4       4     version (u32) = 1
//! 8       4     entry count (u32)
//! 12      ...   entry table, one record per tensor:
//!                 name length (u32), name (UTF-8 bytes),
//!                 dtype (u32, 0 = F32), rank (u32), dims (rank × u32),
//!                 payload offset (u64, absolute)
//! ...     4     CRC-32 (IEEE) of bytes [0, end of entry table)
//! ...     0..3  zero padding to a 4-byte boundary
//! ...           payloads in table order, contiguous, 4·∏dims bytes each
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;
use crate::xception::{ModelGraph, Section};

pub const MAGIC: &[u8; 4] = b"NTC1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Error)]
pub enum NtcError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"NTC1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, expected 1")]
    UnsupportedVersion(u32),
    #[error("file truncated inside the header or entry table")]
    TruncatedTable,
    #[error("entry table checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("entry {index} has a name that is not valid UTF-8")]
    InvalidName { index: usize },
    #[error("entry `{name}` has unsupported dtype code {code}")]
    UnsupportedDtype { name: String, code: u32 },
    #[error("entry `{name}` has a zero-sized or overflowing shape {shape:?}")]
    BadShape { name: String, shape: Vec<u32> },
    #[error("entry `{name}` payload offset {found} does not match expected {expected}")]
    BadOffset { name: String, expected: u64, found: u64 },
    #[error("non-zero alignment padding after the entry table")]
    BadPadding,
    #[error("payload of entry `{name}` is truncated: need {needed} bytes, {available} available")]
    TruncatedPayload {
        name: String,
        needed: u64,
        available: u64,
    },
    #[error("{0} trailing bytes after the last payload")]
    TrailingBytes(u64),
    #[error("entry `{name}` contains a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
}

pub type Result<T> = std::result::Result<T, NtcError>;

/// One decoded tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        }
    }
}

/// Borrowed view used when writing, so a model registry can be saved
/// without copying it.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub data: &'a [f32],
}

impl<'a> From<&'a NamedTensor> for TensorRef<'a> {
    fn from(t: &'a NamedTensor) -> Self {
        TensorRef {
            name: &t.name,
            shape: &t.shape,
            data: &t.data,
        }
    }
}

/// Serializes entries in the given order. Rejects duplicate names before
/// producing any output.
pub fn encode_ntc(entries: &[TensorRef<'_>]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.name) {
            return Err(NtcError::DuplicateName(e.name.to_string()));
        }
        let numel: usize = e.shape.iter().product();
        if e.shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) || numel != e.data.len() {
            return Err(NtcError::BadShape {
                name: e.name.to_string(),
                shape: e.shape.iter().map(|&d| d as u32).collect(),
            });
        }
    }

    let table_len: usize = entries
        .iter()
        .map(|e| 4 + e.name.len() + 4 + 4 + 4 * e.shape.len() + 8)
        .sum();
    let header_end = 12 + table_len + 4;
    let payload_start = header_end.next_multiple_of(4);
    let payload_len: usize = entries.iter().map(|e| 4 * e.data.len()).sum();

    let mut buf = Vec::with_capacity(payload_start + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = payload_start as u64;
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * e.data.len() as u64;
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf.resize(payload_start, 0);
    for e in entries {
        for v in e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NtcError::TruncatedTable)?;
        let s = self.buf.get(self.pos..end).ok_or(NtcError::TruncatedTable)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

struct RawEntry {
    name: String,
    dims: Vec<u32>,
    offset: u64,
}

/// Parses a whole file image. Either every entry decodes or an error is
/// returned; there is no partial result.
pub fn decode_ntc(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = match buf.get(0..4) {
        Some(m) => m.try_into().unwrap(),
        None => {
            let mut m = [0u8; 4];
            m[..buf.len()].copy_from_slice(buf);
            return Err(NtcError::BadMagic(m));
        }
    };
    if &magic != MAGIC {
        return Err(NtcError::BadMagic(magic));
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != VERSION {
        return Err(NtcError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;

    let mut raw = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_bytes = r.bytes(name_len)?;
        let dtype = r.u32()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(NtcError::TruncatedTable);
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let offset = r.u64()?;
        raw.push((name_bytes, dtype, dims, offset));
    }
    let table_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&buf[..table_end]);
    if stored != computed {
        return Err(NtcError::ChecksumMismatch { stored, computed });
    }
    let payload_start = r.pos.next_multiple_of(4);
    let padding = buf.get(r.pos..payload_start).ok_or(NtcError::TruncatedTable)?;
    if padding.iter().any(|&b| b != 0) {
        return Err(NtcError::BadPadding);
    }

    let mut entries = Vec::with_capacity(raw.len());
    let mut seen = HashSet::new();
    for (index, (name_bytes, dtype, dims, offset)) in raw.into_iter().enumerate() {
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| NtcError::InvalidName { index })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(NtcError::DuplicateName(name));
        }
        if dtype != DTYPE_F32 {
            return Err(NtcError::UnsupportedDtype { name, code: dtype });
        }
        entries.push(RawEntry { name, dims, offset });
    }

    let mut expected = payload_start as u64;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let numel = e
            .dims
            .iter()
            .try_fold(1u64, |acc, &d| if d == 0 { None } else { acc.checked_mul(d as u64) })
            .filter(|&n| n <= u64::MAX / 4);
        let Some(numel) = numel else {
            return Err(NtcError::BadShape {
                name: e.name,
                shape: e.dims,
            });
        };
        if e.offset != expected {
            return Err(NtcError::BadOffset {
                name: e.name,
                expected,
                found: e.offset,
            });
        }
        let needed = numel * 4;
        let available = (buf.len() as u64).saturating_sub(e.offset);
        if available < needed {
            return Err(NtcError::TruncatedPayload {
                name: e.name,
                needed,
                available,
            });
        }
        let bytes = &buf[e.offset as usize..(e.offset + needed) as usize];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NtcError::NonFinite { name: e.name, index });
        }
        expected += needed;
        out.push(NamedTensor {
            name: e.name,
            shape: e.dims.iter().map(|&d| d as usize).collect(),
            data,
        });
    }
    if (buf.len() as u64) > expected {
        return Err(NtcError::TrailingBytes(buf.len() as u64 - expected));
    }
    Ok(out)
}

pub fn save_ntc(path: impl AsRef<Path>, entries: &[TensorRef<'_>]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ntc(entries)?;
    std::fs::write(path, bytes).map_err(|source| NtcError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_ntc(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| NtcError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ntc(&bytes)
}

/// Registry view of a model, in registry order.
pub fn registry_entries(model: &ModelGraph) -> Vec<TensorRef<'_>> {
    model
        .params()
        .iter()
        .map(|p| TensorRef {
            name: &p.name,
            shape: p.shape(),
            data: p.values.data(),
        })
        .collect()
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    save_ntc(path, &registry_entries(model))
}

/// One line per tensor: `name d0,d1,...`.
pub fn name_manifest(model: &ModelGraph) -> String {
    let mut s = String::new();
    for p in model.params() {
        let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&p.name);
        s.push(' ');
        s.push_str(&dims.join(","));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub name: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

/// Every way a set of entries failed to match a registry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Error)]
pub struct BindError {
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub mismatched: Vec<ShapeMismatch>,
}

impl fmt::Display for BindError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "weight binding failed")?;
        if !self.missing.is_empty() {
            write!(f, "; missing: {}", self.missing.join(", "))?;
        }
        if !self.extra.is_empty() {
            write!(f, "; extra: {}", self.extra.join(", "))?;
        }
        for m in &self.mismatched {
            write!(f, "; shape mismatch for {}: expected {:?}, found {:?}", m.name, m.expected, m.found)?;
        }
        Ok(())
    }
}

impl BindError {
    fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.mismatched.is_empty()
    }
}

/// Assigns every registry tensor from the same-named entry. All entries must
/// be consumed and all registry names covered.
pub fn bind_weights(model: ModelGraph, entries: &[NamedTensor]) -> std::result::Result<ModelGraph, BindError> {
    bind_impl(model, entries, false)
}

/// Like [`bind_weights`] but head tensors may be absent; those keep their
/// current values. Used when starting from a base-only (pretrained) file.
pub fn bind_base_weights(
    model: ModelGraph,
    entries: &[NamedTensor],
) -> std::result::Result<ModelGraph, BindError> {
    bind_impl(model, entries, true)
}

fn bind_impl(
    mut model: ModelGraph,
    entries: &[NamedTensor],
    head_optional: bool,
) -> std::result::Result<ModelGraph, BindError> {
    let mut err = BindError::default();
    let provided: BTreeSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    for p in model.params() {
        if !provided.contains(p.name.as_str()) && !(head_optional && p.section == Section::Head) {
            err.missing.push(p.name.clone());
        }
    }
    for e in entries {
        match model.param(&e.name) {
            None => err.extra.push(e.name.clone()),
            Some(p) if p.shape() != e.shape.as_slice() || e.data.len() != p.numel() => {
                err.mismatched.push(ShapeMismatch {
                    name: e.name.clone(),
                    expected: p.shape().to_vec(),
                    found: e.shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if !err.is_empty() {
        return Err(err);
    }
    for e in entries {
        let p = model.param_mut(&e.name).expect("checked above");
        p.values.data_mut().copy_from_slice(&e.data);
    }
    model.mark_loaded();
    Ok(model)
}
