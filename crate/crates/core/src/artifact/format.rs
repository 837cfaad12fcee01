//! Delta artifact files.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "DLT1" | u32 version = 1 | 32-byte base fingerprint | u32 record count
//! per record: u32 name length | UTF-8 name | u8 axis (0 row, 1 col)
//!             | u32 d_out | u32 d_in | d_out·ceil(d_in/8) mask bytes
//!             | scale vector as little-endian binary16
//! 32-byte SHA-256 over every byte after the magic
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{packed_row_bytes, Axis, AxisScaleVector, PackedSignMask};
use crate::error::{Error, Result};
use crate::tensor::container::ByteReader;
use crate::tensor::Half;

pub const ARTIFACT_MAGIC: [u8; 4] = *b"DLT1";
pub const ARTIFACT_VERSION: u32 = 1;
/// Magic, version, fingerprint and record count.
pub const ARTIFACT_HEADER_BYTES: usize = 4 + 4 + 32 + 4;
pub const ARTIFACT_CHECKSUM_BYTES: usize = 32;
/// Size of an artifact with no records.
pub const EMPTY_ARTIFACT_BYTES: usize = ARTIFACT_HEADER_BYTES + ARTIFACT_CHECKSUM_BYTES;

const WHAT: &str = "delta artifact";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeltaLayerRecord {
    pub name: String,
    pub mask: PackedSignMask,
    pub scale: AxisScaleVector,
}

impl DeltaLayerRecord {
    pub fn new(name: impl Into<String>, mask: PackedSignMask, scale: AxisScaleVector) -> Result<Self> {
        scale.check_len(mask.d_out(), mask.d_in())?;
        Ok(Self {
            name: name.into(),
            mask,
            scale,
        })
    }

    pub fn axis(&self) -> Axis {
        self.scale.axis
    }

    /// Mask plus vector bytes.
    pub fn payload_bytes(&self) -> usize {
        self.mask.as_bytes().len() + 2 * self.scale.len()
    }

    /// Bytes this record occupies in the file.
    pub fn encoded_len(&self) -> usize {
        4 + self.name.len() + 1 + 4 + 4 + self.payload_bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeltaArtifact {
    pub base_fingerprint: [u8; 32],
    pub records: Vec<DeltaLayerRecord>,
}

impl DeltaArtifact {
    pub fn new(base_fingerprint: [u8; 32], records: Vec<DeltaLayerRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.name.as_str()) {
                return Err(Error::DuplicateName(r.name.clone()));
            }
        }
        Ok(Self {
            base_fingerprint,
            records,
        })
    }

    pub fn record(&self, name: &str) -> Option<&DeltaLayerRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// File size from format arithmetic alone.
    pub fn expected_size(&self) -> usize {
        EMPTY_ARTIFACT_BYTES + self.records.iter().map(|r| r.encoded_len()).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.expected_size());
        out.extend_from_slice(&ARTIFACT_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.base_fingerprint);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.axis().to_byte());
            out.extend_from_slice(&(r.mask.d_out() as u32).to_le_bytes());
            out.extend_from_slice(&(r.mask.d_in() as u32).to_le_bytes());
            out.extend_from_slice(r.mask.as_bytes());
            for h in &r.scale.values {
                out.extend_from_slice(&h.bits().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out[4..]);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && bytes[..4] != ARTIFACT_MAGIC {
            return Err(Error::BadMagic {
                what: WHAT,
                expected: ARTIFACT_MAGIC,
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < EMPTY_ARTIFACT_BYTES {
            return Err(Error::Truncated {
                what: WHAT,
                offset: bytes.len(),
                needed: EMPTY_ARTIFACT_BYTES - bytes.len(),
            });
        }
        let (body, stored) = bytes.split_at(bytes.len() - ARTIFACT_CHECKSUM_BYTES);
        let computed = Sha256::digest(&body[4..]);
        if computed.as_slice() != stored {
            return Err(Error::Checksum {
                stored: hex(stored),
                computed: hex(&computed),
            });
        }

        let mut r = ByteReader::new(body, WHAT);
        r.take(4)?;
        let version = r.u32()?;
        if version != ARTIFACT_VERSION {
            return Err(Error::Version { what: WHAT, version });
        }
        let base_fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let axis = Axis::from_byte(r.u8()?)?;
            let d_out = r.u32()? as usize;
            let d_in = r.u32()? as usize;
            let mask_len = d_out
                .checked_mul(packed_row_bytes(d_in))
                .ok_or_else(|| Error::Malformed {
                    what: WHAT,
                    detail: format!("{name}: shape {d_out}x{d_in} overflows"),
                })?;
            let mask = PackedSignMask::from_bytes(d_out, d_in, r.take(mask_len)?.to_vec())?;
            let n = axis.len_for(d_out, d_in);
            let values = r
                .take(2 * n)?
                .chunks_exact(2)
                .map(|c| Half(u16::from_le_bytes([c[0], c[1]])))
                .collect();
            let scale = AxisScaleVector::new(axis, values)?;
            records.push(DeltaLayerRecord::new(name, mask, scale)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed {
                what: WHAT,
                detail: format!("{} trailing bytes before checksum", r.remaining()),
            });
        }
        Self::new(base_fingerprint, records)
    }
}

/// Writes the artifact and returns the number of bytes written.
pub fn save_artifact(path: impl AsRef<Path>, artifact: &DeltaArtifact) -> Result<u64> {
    let path = path.as_ref();
    let bytes = artifact.encode();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_artifact(path: impl AsRef<Path>) -> Result<DeltaArtifact> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DeltaArtifact::decode(&bytes)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
