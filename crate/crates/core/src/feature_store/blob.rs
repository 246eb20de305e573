//! HCFS tensor blobs: a small fixed preamble, little-endian `u32` dims, then a
//! C-order little-endian `f32` payload.
//!
//! ```text
//! magic "HCFS" | u8 version | u8 rank | u16 reserved | u32 dims[rank] | f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HCFS";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = 8;

/// Serializes `data` with the given shape into HCFS bytes.
pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(PREAMBLE + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dims.len() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses HCFS bytes. `record` and `path` only label errors.
pub fn decode(bytes: &[u8], record: &str, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            record: record.to_string(),
            path: path.to_path_buf(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            detail: format!("blob version {} (expected {VERSION})", bytes[4]),
        });
    }
    let rank = bytes[5] as usize;
    let header_len = PREAMBLE + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            record: record.to_string(),
            detail: format!("{}: header shorter than rank {rank}", path.display()),
        });
    }
    let dims: Vec<usize> = bytes[PREAMBLE..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != count * 4 {
        return Err(Error::dim(
            record,
            format!(
                "{}: header dims {:?} need {} payload bytes, found {}",
                path.display(),
                dims,
                count * 4,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    fs::write(path, encode(dims, data)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, record: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, record, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[2, 3], &[0.0; 6]);
        assert_eq!(&bytes[..4], b"HCFS");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn decode_round_trip() {
        let data = [1.5f32, -2.25, 3.0e-7, f32::MAX];
        let bytes = encode(&[4], &data);
        let (dims, back) = decode(&bytes, "r", Path::new("x")).unwrap();
        assert_eq!(dims, vec![4]);
        assert_eq!(back, data);
    }

    #[test]
    fn wrong_magic_and_short_payload() {
        let mut bytes = encode(&[2], &[1.0, 2.0]);
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, "r", Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = encode(&[2], &[1.0, 2.0]);
        bytes.truncate(bytes.len() - 4);
        match decode(&bytes, "rec7", Path::new("x")) {
            Err(Error::DimensionMismatch { record, .. }) => assert_eq!(record, "rec7"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
