//! Named-tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TNC1" | u32 version = 1 | u32 entry count
//! per entry: u32 name length | UTF-8 name | u32 rows | u32 cols | rows·cols × f32
//! ```
//!
//! A half-precision sibling with magic "TNH1" stores the payload as binary16;
//! it is the "full FP16 checkpoint" that delta artifacts are compared against.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use half::f16;
use half::slice::HalfFloatSliceExt;

use super::half::to_half_round;
use super::Matrix;

pub const CONTAINER_MAGIC: [u8; 4] = *b"TNC1";
pub const HALF_CONTAINER_MAGIC: [u8; 4] = *b"TNH1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorContainer {
    entries: Vec<(String, Matrix)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, matrix: Matrix) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push((name, matrix));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn entries(&self) -> &[(String, Matrix)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Matrix)> {
        self.entries
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

    /// Total number of scalar values across all entries.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|(n, m)| 12 + n.len() + 4 * m.len()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(&CONTAINER_MAGIC);
        put_u32(&mut out, CONTAINER_VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for (name, m) in &self.entries {
            put_entry_header(&mut out, name, m);
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        decode_with(bytes, CONTAINER_MAGIC, 4, |raw, out| {
            for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
                *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        })
    }

    /// Size in bytes of [`encode_half`](Self::encode_half)'s output.
    pub fn half_encoded_len(&self) -> usize {
        12 + self
            .entries
            .iter()
            .map(|(n, m)| 12 + n.len() + 2 * m.len())
            .sum::<usize>()
    }

    /// Encodes every entry with binary16 payloads.
    pub fn encode_half(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.half_encoded_len());
        out.extend_from_slice(&HALF_CONTAINER_MAGIC);
        put_u32(&mut out, CONTAINER_VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for (name, m) in &self.entries {
            put_entry_header(&mut out, name, m);
            for &v in m.data() {
                out.extend_from_slice(&to_half_round(v)?.bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode_half(bytes: &[u8]) -> Result<Self> {
        decode_with(bytes, HALF_CONTAINER_MAGIC, 2, |raw, out| {
            let halves: Vec<f16> = raw
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect();
            halves.convert_to_f32_slice(out);
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry_header(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
}

fn decode_with(
    bytes: &[u8],
    magic: [u8; 4],
    width: usize,
    convert: impl Fn(&[u8], &mut [f32]),
) -> Result<TensorContainer> {
    const WHAT: &str = "tensor container";
    let mut r = ByteReader::new(bytes, WHAT);
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::BadMagic {
            what: WHAT,
            expected: magic,
            found: found.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Version { what: WHAT, version });
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::with_capacity(count);
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Malformed {
            what: WHAT,
            detail: format!("shape {rows}x{cols} overflows"),
        })?;
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Malformed {
            what: WHAT,
            detail: format!("shape {rows}x{cols} overflows"),
        })?)?;
        let mut data = vec![0.0f32; n];
        convert(raw, &mut data);
        entries.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed {
            what: WHAT,
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(TensorContainer { entries })
}

pub fn write_container(path: impl AsRef<Path>, container: &TensorContainer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, container.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::decode(&bytes)
}

pub fn write_half_container(path: impl AsRef<Path>, container: &TensorContainer) -> Result<u64> {
    let path = path.as_ref();
    let bytes = container.encode_half()?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_half_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::decode_half(&bytes)
}

/// Bounds-checked little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                what: self.what,
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Malformed {
            what: self.what,
            detail: format!("name is not UTF-8: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_roundtrip() {
        let c = TensorContainer::new();
        let bytes = c.encode();
        assert_eq!(bytes.len(), 12);
        assert_eq!(TensorContainer::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn single_value_bit_exact() {
        let mut c = TensorContainer::new();
        c.push("w", Matrix::from_vec(1, 1, vec![-0.5]).unwrap()).unwrap();
        let back = TensorContainer::decode(&c.encode()).unwrap();
        assert_eq!(back.get("w").unwrap().data()[0].to_bits(), (-0.5f32).to_bits());
    }

    #[test]
    fn exact_layout() {
        let mut c = TensorContainer::new();
        c.push("ab", Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut expected = b"TNC1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(c.encode(), expected);
    }

    #[test]
    fn duplicate_push_rejected() {
        let mut c = TensorContainer::new();
        c.push("a", Matrix::zeros(1, 1)).unwrap();
        assert!(matches!(
            c.push("a", Matrix::zeros(2, 2)),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn parse_errors_are_distinct() {
        let mut c = TensorContainer::new();
        c.push("a", Matrix::zeros(2, 2)).unwrap();
        let good = c.encode();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            TensorContainer::decode(&bad),
            Err(Error::BadMagic { .. })
        ));

        assert!(matches!(
            TensorContainer::decode(&good[..good.len() - 3]),
            Err(Error::Truncated { .. })
        ));

        // Two entries both named "a".
        let mut dup = b"TNC1".to_vec();
        dup.extend_from_slice(&1u32.to_le_bytes());
        dup.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            dup.extend_from_slice(&1u32.to_le_bytes());
            dup.extend_from_slice(b"a");
            dup.extend_from_slice(&1u32.to_le_bytes());
            dup.extend_from_slice(&1u32.to_le_bytes());
            dup.extend_from_slice(&0f32.to_le_bytes());
        }
        assert!(matches!(
            TensorContainer::decode(&dup),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn half_container_rounds_values() {
        let mut c = TensorContainer::new();
        c.push("a", Matrix::from_vec(1, 3, vec![1.0, 0.1, -3.5]).unwrap())
            .unwrap();
        let bytes = c.encode_half().unwrap();
        assert_eq!(bytes.len(), 12 + 12 + 1 + 6);
        let back = TensorContainer::decode_half(&bytes).unwrap();
        let vals = back.get("a").unwrap().data();
        assert_eq!(vals[0], 1.0);
        assert_eq!(vals[2], -3.5);
        assert!((vals[1] - 0.1).abs() < 1e-4);
        assert!(TensorContainer::decode(&bytes).is_err());
    }
}
