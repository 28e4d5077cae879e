//! Chunked named-array container: the on-disk format behind `.episode`
//! files and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"VSAF"
//! u32    format version
//! u32    array count
//! per array, in name order:
//!   u16         name length, then name bytes (utf-8)
//!   u8          dtype (0 = f32, 1 = u8, 2 = i64)
//!   u8          ndim
//!   u32 * ndim  dims
//!   u64         payload byte length
//!   bytes       payload
//! ```
//!
//! Arrays are held in a BTreeMap so writes are byte-identical for identical
//! contents regardless of insertion order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

const MAGIC: &[u8; 4] = b"VSAF";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn dtype_code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::U8(_) => 1,
            ArrayData::I64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray { shape, data: ArrayData::F32(data) }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray { shape, data: ArrayData::U8(data) }
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedArray { shape, data: ArrayData::I64(data) }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            ArrayData::I64(v) => Some(v),
            _ => None,
        }
    }
}

/// In-memory container; read/write round-trips are exact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    arrays: BTreeMap<String, NamedArray>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: NamedArray) {
        self.arrays.insert(name.to_string(), array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.get(name)
    }

    pub fn require(&self, name: &str, path: &str) -> Result<&NamedArray> {
        self.arrays.get(name).ok_or_else(|| Error::Format {
            path: path.to_string(),
            reason: format!("missing array {name:?}"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<NamedArray> {
        self.arrays.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(arr.data.dtype_code());
            out.push(arr.shape.len() as u8);
            for d in &arr.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            let payload: Vec<u8> = match &arr.data {
                ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                ArrayData::U8(v) => v.clone(),
                ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_string(), reason: reason.to_string() };
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "{path}: container format v{version}, expected v{FORMAT_VERSION}"
            )));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("array name is not utf-8"))?
                .to_string();
            let dtype = take(1)?[0];
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let byte_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let payload = take(byte_len)?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    if byte_len != n * 4 {
                        return Err(bad("f32 payload length mismatch"));
                    }
                    ArrayData::F32(
                        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                }
                1 => {
                    if byte_len != n {
                        return Err(bad("u8 payload length mismatch"));
                    }
                    ArrayData::U8(payload.to_vec())
                }
                2 => {
                    if byte_len != n * 8 {
                        return Err(bad("i64 payload length mismatch"));
                    }
                    ArrayData::I64(
                        payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                }
                other => return Err(bad(&format!("unknown dtype code {other}"))),
            };
            arrays.insert(name, NamedArray { shape, data });
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container { arrays })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut c = Container::new();
        c.insert("frames", NamedArray::u8(vec![2, 2, 3], vec![0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255]));
        c.insert("progress", NamedArray::f32(vec![3], vec![0.0, 0.5, 1.0]));
        c.insert("labels", NamedArray::i64(vec![2], vec![-1, 42]));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn byte_stable_regardless_of_insertion_order() {
        let mut a = Container::new();
        a.insert("b", NamedArray::f32(vec![1], vec![1.0]));
        a.insert("a", NamedArray::f32(vec![1], vec![2.0]));
        let mut b = Container::new();
        b.insert("a", NamedArray::f32(vec![1], vec![2.0]));
        b.insert("b", NamedArray::f32(vec![1], vec![1.0]));
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let mut c = Container::new();
        c.insert("x", NamedArray::f32(vec![1], vec![0.0]));
        let mut bytes = c.to_bytes();
        bytes[4] = 99; // corrupt the version field
        match Container::from_bytes(&bytes, "mem") {
            Err(Error::VersionMismatch(_)) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let mut c = Container::new();
        c.insert("x", NamedArray::f32(vec![4], vec![0.0; 4]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
    }
}
