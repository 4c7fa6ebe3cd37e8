// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor container shared by activation, dictionary and model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "HPT1"
//! version    u32       1
//! sections   u32
//! per section:
//!   name_len u16, name (UTF-8)
//!   rank     u8, dims (u64 x rank)
//!   dtype    u8        0 = f32, 1 = f64
//!   payload  product(dims) values, row-major
//! crc32      u32       IEEE CRC-32 of every preceding byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"HPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("duplicate section name '{0}'")]
    DuplicateSection(String),
    #[error("section '{name}': {len} values for dims {dims:?}")]
    PayloadLength { name: String, dims: Vec<usize>, len: usize },
    #[error("missing section '{0}'")]
    MissingSection(String),
    #[error("section '{name}' has unexpected shape {dims:?}")]
    UnexpectedShape { name: String, dims: Vec<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// One named tensor. Values are held as `f64` regardless of the on-disk
/// dtype; `dtype` records how it is (or was) stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl Section {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected = dims.iter().product::<usize>();
        if expected != data.len() {
            return Err(FormatError::PayloadLength {
                name,
                dims,
                len: data.len(),
            });
        }
        if name.len() > u16::MAX as usize {
            return Err(FormatError::Malformed(format!(
                "section name too long ({} bytes)",
                name.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(FormatError::Malformed(format!("rank {} too large", dims.len())));
        }
        Ok(Self {
            name,
            dims,
            dtype,
            data,
        })
    }

    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, dims, DType::F64, data)
    }

    pub fn f32(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, dims, DType::F32, data)
    }

    /// Bitwise comparison of values (distinguishes `-0.0`, matches NaN
    /// payloads exactly).
    pub fn bits_eq(&self, other: &Section) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.dtype == other.dtype
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Serializes sections to the wire format.
pub fn encode(sections: &[Section]) -> Result<Vec<u8>> {
    let mut names = HashSet::new();
    for s in sections {
        if !names.insert(s.name.as_str()) {
            return Err(FormatError::DuplicateSection(s.name.clone()));
        }
    }
    let payload: usize = sections.iter().map(|s| s.data.len() * s.dtype.size()).sum();
    let mut buf = Vec::with_capacity(16 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in sections {
        buf.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(s.name.as_bytes());
        buf.push(s.dims.len() as u8);
        for &d in &s.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(s.dtype.tag());
        match s.dtype {
            DType::F32 => {
                for &v in &s.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &s.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::TruncatedFile(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses and validates a complete file image. `f32` payloads are widened
/// to `f64`.
pub fn decode(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = cur.u32("section count")?;

    let mut sections = Vec::new();
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u16("section name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "section name")?)
            .map_err(|_| FormatError::Malformed("section name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64("dims")?;
            dims.push(usize::try_from(d).map_err(|_| FormatError::TruncatedFile("payload"))?);
        }
        let tag = cur.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| FormatError::Malformed(format!("unknown dtype tag {tag}")))?;
        let byte_len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or(FormatError::TruncatedFile("payload"))?;
        if byte_len > cur.remaining() {
            return Err(FormatError::TruncatedFile("payload"));
        }
        let raw = cur.take(byte_len, "payload")?;
        let data: Vec<f64> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if !names.insert(name.clone()) {
            return Err(FormatError::DuplicateSection(name));
        }
        sections.push(Section {
            name,
            dims,
            dtype,
            data,
        });
    }

    let body_len = cur.pos;
    let stored = cur.u32("checksum")?;
    if cur.remaining() != 0 {
        return Err(FormatError::Malformed(format!(
            "{} unexpected bytes after checksum",
            cur.remaining()
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    Ok(sections)
}

/// Writes via a sibling temp file and rename so readers never observe a
/// partial file.
pub fn write_tensor_file(path: &Path, sections: &[Section]) -> Result<()> {
    let bytes = encode(sections)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| FormatError::Malformed(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<Section>> {
    decode(&fs::read(path)?)
}
