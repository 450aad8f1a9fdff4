//! `MSUA` array files: a small little-endian header followed by the raw
//! row-major payload.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "MSUA"
//! 4       4          version (u32) = 1
//! 8       1          dtype: 0 f32, 1 u8, 2 i32, 3 f64
//! 9       1          rank (<= 4)
//! 10      8 * rank   dims (u64 each)
//! ..      ..         payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"MSUA";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::U8(_) => 1,
            ArrayData::I32(_) => 2,
            ArrayData::F64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn item_size(code: u8) -> Option<usize> {
        match code {
            0 | 2 => Some(4),
            1 => Some(1),
            3 => Some(8),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::U8(_) => "u8",
            ArrayData::I32(_) => "i32",
            ArrayData::F64(_) => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::Dimension(format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!("dims {dims:?} hold {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: &[usize], v: Vec<f32>) -> Result<Self> {
        Self::new(dims.to_vec(), ArrayData::F32(v))
    }

    pub fn u8(dims: &[usize], v: Vec<u8>) -> Result<Self> {
        Self::new(dims.to_vec(), ArrayData::U8(v))
    }

    pub fn f64(dims: &[usize], v: Vec<f64>) -> Result<Self> {
        Self::new(dims.to_vec(), ArrayData::F64(v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let size = ArrayData::item_size(self.data.code()).expect("known dtype");
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + size * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses an encoded array; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format { path: path.to_path_buf(), offset, msg };
        if bytes.len() < 10 {
            return Err(fail(bytes.len(), format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version { path: path.to_path_buf(), found: version, expected: VERSION });
        }
        let code = bytes[8];
        let size = ArrayData::item_size(code).ok_or_else(|| fail(8, format!("unknown dtype code {code}")))?;
        let rank = bytes[9] as usize;
        if rank > MAX_RANK {
            return Err(fail(9, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let header = 10 + 8 * rank;
        if bytes.len() < header {
            return Err(fail(bytes.len(), "dims truncated".into()));
        }
        let dims: Vec<usize> =
            (0..rank).map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap()) as usize).collect();
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail(10, "dims overflow".into()))?;
        let payload = &bytes[header..];
        let expected = n.checked_mul(size).ok_or_else(|| fail(10, "dims overflow".into()))?;
        if payload.len() != expected {
            return Err(fail(header, format!("payload is {} bytes, dims require {expected}", payload.len())));
        }
        let data = match code {
            0 => ArrayData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => ArrayData::U8(payload.to_vec()),
            2 => ArrayData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { dims, data })
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            ArrayData::F32(v) => Ok(v),
            other => Err(Error::Other(format!("expected f32 array, found {}", other.type_name()))),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            ArrayData::U8(v) => Ok(v),
            other => Err(Error::Other(format!("expected u8 array, found {}", other.type_name()))),
        }
    }

    /// Widens any numeric payload to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

pub fn write_array(path: &Path, array: &Array) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, array.to_bytes()).at(path)
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).at(path)?;
    Array::from_bytes(&bytes, path)
}
