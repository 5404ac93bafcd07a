//! WDST distance-matrix files.
//!
//! ```text
//! "WDST" | version u32 | nq u32 | nc u32
//! nq × (len u32 | UTF-8 query id)
//! nc × (len u32 | UTF-8 candidate id)
//! nq·nc f32 distances, row-major
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use ndarray::Array2;

use super::DistanceMatrix;
use crate::error::{Error, Result};

pub const WDST_MAGIC: &[u8; 4] = b"WDST";
pub const WDST_VERSION: u32 = 1;

pub fn encode_distances(dm: &DistanceMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + dm.values.len() * 4);
    buf.extend_from_slice(WDST_MAGIC);
    buf.extend_from_slice(&WDST_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dm.query_ids.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dm.candidate_ids.len() as u32).to_le_bytes());
    for id in dm.query_ids.iter().chain(&dm.candidate_ids) {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for v in dm.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_distances(bytes: &[u8]) -> Result<DistanceMatrix> {
    if bytes.len() < 4 {
        return Err(Error::Corruption("distance file truncated in header".into()));
    }
    if &bytes[..4] != WDST_MAGIC {
        return Err(Error::Format("not a WDST distance file".into()));
    }
    decode_body(bytes)
}

fn decode_body(bytes: &[u8]) -> Result<DistanceMatrix> {
    let mut pos = 4usize;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| Error::Corruption(format!("distance file truncated at byte {pos}")))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let version = u32_at(&mut pos)?;
    if version != WDST_VERSION {
        return Err(Error::Format(format!("unsupported WDST version {version}")));
    }
    let nq = u32_at(&mut pos)? as usize;
    let nc = u32_at(&mut pos)? as usize;
    let mut ids = Vec::with_capacity(nq + nc);
    for _ in 0..nq + nc {
        let len = u32_at(&mut pos)? as usize;
        let raw = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Corruption("distance file truncated inside an id".into()))?;
        pos += len;
        ids.push(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::Format("track id is not UTF-8".into()))?,
        );
    }
    let payload = &bytes[pos..];
    if payload.len() != nq * nc * 4 {
        return Err(Error::Corruption(format!(
            "distance payload is {} bytes, expected {}",
            payload.len(),
            nq * nc * 4
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let candidate_ids = ids.split_off(nq);
    let values = Array2::from_shape_vec((nq, nc), values).expect("length checked");
    DistanceMatrix::new(ids, candidate_ids, values).map_err(|e| match e {
        Error::Validation(m) => Error::Corruption(m),
        other => other,
    })
}

pub fn write_distances(dm: &DistanceMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_distances(dm)).map_err(|e| Error::storage(path, e))
}

pub fn read_distances(path: impl AsRef<Path>) -> Result<DistanceMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_distances(&bytes)
}
