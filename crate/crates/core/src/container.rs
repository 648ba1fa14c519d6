//! Reader and writer for the flat `SCT1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "SCT1"
//! version    u32      1
//! count      u32      number of entries
//! entry*     name_len u32, name (UTF-8), dtype u8, ndim u8, dims u32 × ndim,
//!            payload  product(dims) × element size bytes
//! ```
//!
//! dtype 0 is `f32` (4 bytes per element); dtype 1 is raw `u8`, used for
//! UTF-8 string tables. Entries keep their file order, so loading and
//! re-serializing a container reproduces it byte for byte.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const MAGIC: &[u8; 4] = b"SCT1";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl TensorEntry {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, TensorEntry)>,
    index: HashMap<String, usize>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        if entry.dims.len() > usize::from(u8::MAX) {
            return Err(Error::Format(format!("`{name}` has too many dimensions")));
        }
        if entry.element_count() != entry.data.len() {
            return Err(Error::Format(format!(
                "`{name}` declares {} elements but carries {}",
                entry.element_count(),
                entry.data.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, entry));
        Ok(())
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<()> {
        self.insert(
            name,
            TensorEntry {
                dims: dims.iter().map(|&d| d as u32).collect(),
                data: TensorData::F32(data),
            },
        )
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Tensor2D) -> Result<()> {
        self.insert_f32(name, &[m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f32) -> Result<()> {
        self.insert_f32(name, &[1], vec![v])
    }

    /// Stores strings as one newline-joined UTF-8 byte table.
    pub fn insert_strings(&mut self, name: impl Into<String>, items: &[String]) -> Result<()> {
        let name = name.into();
        if let Some(bad) = items.iter().find(|s| s.contains('\n')) {
            return Err(Error::Format(format!("`{name}`: string {bad:?} contains a newline")));
        }
        let bytes = items.join("\n").into_bytes();
        self.insert(
            name,
            TensorEntry {
                dims: vec![bytes.len() as u32],
                data: TensorData::U8(bytes),
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    /// The raw `f32` payload and dimensions of `name`.
    pub fn f32_data(&self, name: &str) -> Result<(&[u32], &[f32])> {
        let entry = self.require(name)?;
        match &entry.data {
            TensorData::F32(v) => Ok((&entry.dims, v)),
            TensorData::U8(_) => Err(Error::Format(format!("`{name}` is not an f32 tensor"))),
        }
    }

    /// Reads `name` as a vector of exactly `len` values (any shape with that many elements).
    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let (_, data) = self.f32_data(name)?;
        if data.len() != len {
            return Err(Error::Format(format!(
                "`{name}` has {} elements, expected {len}",
                data.len()
            )));
        }
        Ok(data.to_vec())
    }

    /// Reads `name` as a `rows × cols` matrix, flattening trailing dimensions.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor2D> {
        let data = self.vector(name, rows * cols)?;
        let (dims, _) = self.f32_data(name)?;
        if dims.first().map(|&d| d as usize) != Some(rows) {
            return Err(Error::Format(format!(
                "`{name}` has leading dimension {:?}, expected {rows}",
                dims.first()
            )));
        }
        Tensor2D::new(rows, cols, data)
    }

    /// Reads a 2-D tensor with whatever shape it declares.
    pub fn any_matrix(&self, name: &str) -> Result<Tensor2D> {
        let (dims, data) = self.f32_data(name)?;
        match dims {
            [r, c] => Tensor2D::new(*r as usize, *c as usize, data.to_vec()),
            _ => Err(Error::Format(format!("`{name}` is not 2-D (dims {dims:?})"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        Ok(self.vector(name, 1)?[0])
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let entry = self.require(name)?;
        let TensorData::U8(bytes) = &entry.data else {
            return Err(Error::Format(format!("`{name}` is not a byte table")));
        };
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Format(format!("`{name}` is not valid UTF-8: {e}")))?;
        if text.is_empty() {
            return Ok(Vec::new());
        }
        Ok(text.split('\n').map(str::to_owned).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dtype = match entry.data {
                TensorData::F32(_) => DTYPE_F32,
                TensorData::U8(_) => DTYPE_U8,
            };
            out.push(dtype);
            out.push(entry.dims.len() as u8);
            for d in &entry.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &entry.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected SCT1".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()?;
        let mut container = TensorContainer::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_owned();
            let dtype = cur.u8()?;
            let ndim = cur.u8()?;
            let dims = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().map(|&d| d as usize).product();
            let data = match dtype {
                DTYPE_F32 => {
                    let raw = cur.take(count.checked_mul(4).ok_or_else(|| {
                        Error::Format(format!("`{name}` is too large"))
                    })?)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                DTYPE_U8 => TensorData::U8(cur.take(count)?.to_vec()),
                other => {
                    return Err(Error::Format(format!("`{name}` has unknown dtype code {other}")))
                }
            };
            container.insert(name, TensorEntry { dims, data })?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - cur.pos
            )));
        }
        Ok(container)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes through a sibling temp file and renames it into place.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: wanted {n} bytes at offset {} of {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
