//! Binary container shared by activation dumps and tensor files.
//!
//! Layout: the 5 magic bytes `FPRB1`, a compact UTF-8 JSON header object,
//! zero padding up to the next 8-byte file offset, then the payload. The
//! header always carries `payload_bytes` and `payload_crc32c`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"FPRB1";
const ALIGN: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct Framed<M> {
    #[serde(flatten)]
    meta: M,
    payload_bytes: u64,
    payload_crc32c: u32,
}

/// Serializes `meta` and `payload` into container bytes.
pub fn encode<M: Serialize>(meta: &M, payload: &[u8]) -> Result<Vec<u8>> {
    let framed = Framed {
        meta,
        payload_bytes: payload.len() as u64,
        payload_crc32c: crc32c::crc32c(payload),
    };
    let header =
        serde_json::to_vec(&framed).map_err(|e| Error::Internal(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + ALIGN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header);
    out.resize(out.len().next_multiple_of(ALIGN), 0);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Parses container bytes, verifying size and checksum.
pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, &[u8])> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::MalformedHeader("missing FPRB1 magic".into()));
    }
    let body = &bytes[MAGIC.len()..];
    let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<Framed<M>>();
    let framed = match stream.next() {
        Some(Ok(f)) => f,
        Some(Err(e)) => return Err(Error::MalformedHeader(e.to_string())),
        None => return Err(Error::MalformedHeader("empty header".into())),
    };
    let header_end = MAGIC.len() + stream.byte_offset();
    let payload_start = header_end.next_multiple_of(ALIGN);
    if payload_start > bytes.len() {
        return Err(Error::SizeMismatch {
            expected: payload_start as u64 + framed.payload_bytes,
            found: bytes.len() as u64,
        });
    }
    if bytes[header_end..payload_start].iter().any(|&b| b != 0) {
        return Err(Error::MalformedHeader("non-zero alignment padding".into()));
    }
    let payload = &bytes[payload_start..];
    if payload.len() as u64 != framed.payload_bytes {
        return Err(Error::SizeMismatch {
            expected: framed.payload_bytes,
            found: payload.len() as u64,
        });
    }
    let crc = crc32c::crc32c(payload);
    if crc != framed.payload_crc32c {
        return Err(Error::ChecksumMismatch {
            expected: framed.payload_crc32c,
            found: crc,
        });
    }
    Ok((framed.meta, payload))
}

pub fn write_file<M: Serialize>(path: &Path, meta: &M, payload: &[u8]) -> Result<()> {
    let bytes = encode(meta, payload)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn le_to_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Header of a standalone `rows x cols` f32 tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub kind: String,
    pub name: String,
    pub shape: Vec<usize>,
}

/// Writes a named f32 tensor (row-major) in container format.
pub fn write_tensor(path: &Path, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::shape(format!(
            "tensor {name}: shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tensor payload"));
    }
    let header = TensorHeader {
        kind: "tensor".into(),
        name: name.into(),
        shape: shape.to_vec(),
    };
    let mut payload = Vec::new();
    f32s_to_le(data, &mut payload);
    write_file(path, &header, &payload)
}

pub fn read_tensor(path: &Path) -> Result<(TensorHeader, Vec<f32>)> {
    let bytes = read_file(path)?;
    let (header, payload): (TensorHeader, _) = decode(&bytes)?;
    if header.kind != "tensor" {
        return Err(Error::MalformedHeader(format!(
            "expected tensor, found {}",
            header.kind
        )));
    }
    let expected = header.shape.iter().product::<usize>() as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len() as u64,
        });
    }
    Ok((header, le_to_f32s(payload)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Meta {
        name: String,
    }

    #[test]
    fn payload_starts_on_8_byte_boundary() {
        let meta = Meta { name: "x".into() };
        let bytes = encode(&meta, &[1, 2, 3, 4]).unwrap();
        assert_eq!((bytes.len() - 4) % 8, 0);
        let (back, payload): (Meta, _) = decode(&bytes).unwrap();
        assert_eq!(back, meta);
        assert_eq!(payload, &[1, 2, 3, 4]);
    }

    #[test]
    fn rejects_bad_magic_and_flipped_payload() {
        let meta = Meta { name: "x".into() };
        let mut bytes = encode(&meta, &[9; 16]).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            decode::<Meta>(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode::<Meta>(&bytes),
            Err(Error::MalformedHeader(_))
        ));
    }
}
