//! Binary tensor blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   : 8 bytes, b"CORALF32" or b"CORALF64"
//! rank    : u64
//! dims    : rank x u64
//! payload : prod(dims) values, row-major, f32 or f64 per the magic
//! ```
//!
//! Checksums are not part of the blob itself; owners record the SHA-256 of
//! each blob file in their manifest and verify it on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoralError, Result};
use crate::tensor::{ParamTensors, Tensor};

pub const MAGIC_F32: &[u8; 8] = b"CORALF32";
pub const MAGIC_F64: &[u8; 8] = b"CORALF64";

/// Rank cap; keeps a corrupt header from requesting absurd allocations.
const MAX_RANK: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Manifest record for one blob file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(tensor: &Tensor, precision: Precision) -> Vec<u8> {
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(16 + 8 * tensor.shape.len() + width * tensor.len());
    out.extend_from_slice(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    });
    out.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in &tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let read_u64 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| CoralError::layout(path, "truncated header"))
    };
    let magic = bytes
        .get(..8)
        .ok_or_else(|| CoralError::layout(path, "truncated magic"))?;
    let precision = if magic == MAGIC_F32 {
        Precision::F32
    } else if magic == MAGIC_F64 {
        Precision::F64
    } else {
        return Err(CoralError::layout(path, "bad magic"));
    };
    let rank = read_u64(8)?;
    if rank > MAX_RANK {
        return Err(CoralError::layout(path, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for k in 0..rank as usize {
        let d = read_u64(16 + 8 * k)?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| CoralError::layout(path, "dimension overflow"))?;
        shape.push(d as usize);
    }
    let start = 16 + 8 * rank as usize;
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let expected = count
        .checked_mul(width)
        .and_then(|n| n.checked_add(start as u64))
        .ok_or_else(|| CoralError::layout(path, "payload size overflow"))?;
    if bytes.len() as u64 != expected {
        return Err(CoralError::layout(
            path,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let payload = &bytes[start..];
    let data = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor { shape, data })
}

/// Writes one blob and returns its checksum.
pub fn write(path: &Path, tensor: &Tensor, precision: Precision) -> Result<String> {
    let bytes = encode(tensor, precision);
    fs::write(path, &bytes).map_err(|e| CoralError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads one blob, verifying the checksum first when one is given.
pub fn read(path: &Path, sha256: Option<&str>) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CoralError::io(path, e))?;
    if let Some(expected) = sha256 {
        if sha256_hex(&bytes) != expected {
            return Err(CoralError::Checksum {
                path: path.to_path_buf(),
            });
        }
    }
    decode(&bytes, path)
}

fn qualified(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Writes every tensor of `params` as `{prefix}.{name}.bin` inside `dir`.
pub fn save_params<P: ParamTensors + ?Sized>(
    dir: &Path,
    prefix: &str,
    params: &P,
    precision: Precision,
) -> Result<Vec<BlobEntry>> {
    params
        .tensors()
        .into_iter()
        .map(|(name, tensor)| {
            let name = qualified(prefix, &name);
            let file = format!("{name}.bin");
            let sha256 = write(&dir.join(&file), tensor, precision)?;
            Ok(BlobEntry { name, file, sha256 })
        })
        .collect()
}

/// Fills `params` from blobs previously written by [`save_params`]. The
/// container must already have the right structure; shapes are checked.
pub fn load_params<P: ParamTensors + ?Sized>(
    dir: &Path,
    prefix: &str,
    entries: &[BlobEntry],
    params: &mut P,
) -> Result<()> {
    let names: Vec<String> = params
        .tensors()
        .into_iter()
        .map(|(n, _)| qualified(prefix, &n))
        .collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let entry = entries
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| CoralError::layout(dir, format!("missing blob {name}")))?;
        let path = dir.join(&entry.file);
        let tensor = read(&path, Some(&entry.sha256))?;
        if tensor.shape != slot.shape {
            return Err(CoralError::layout(
                &path,
                format!("shape {:?} but expected {:?}", tensor.shape, slot.shape),
            ));
        }
        *slot = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_blobs_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|k| ((k as u64 ^ seed) as f64).sin() * 1e3).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let back = decode(&encode(&t, Precision::F64), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn f32_blobs_round_trip_f32_values(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|k| ((k as u64).wrapping_mul(seed | 1) as f32).sqrt() as f64).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let back = decode(&encode(&t, Precision::F32), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t, Precision::F32);
        assert_eq!(&bytes[..8], b"CORALF32");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()), -2.0);
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn corrupt_inputs_are_layout_errors() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = encode(&t, Precision::F32);
        let p = Path::new("mem");
        assert!(matches!(decode(&bytes[..bytes.len() - 1], p), Err(CoralError::Layout { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p), Err(CoralError::Layout { .. })));
        assert!(matches!(decode(&[0u8; 4], p), Err(CoralError::Layout { .. })));
    }

    #[test]
    fn checksum_detects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let sha = write(&path, &t, Precision::F32).unwrap();
        assert_eq!(read(&path, Some(&sha)).unwrap(), t);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read(&path, Some(&sha)), Err(CoralError::Checksum { .. })));
    }
}
