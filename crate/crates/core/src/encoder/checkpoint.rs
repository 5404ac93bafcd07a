//! WCKP checkpoint files.
//!
//! ```text
//! "WCKP" | version u32 | config_len u32 | config JSON
//! repeated until EOF:
//!   name_len u16 | name UTF-8 | rank u32 | dims u32 × rank | f32 payload
//! ```
//! All integers and floats little-endian.

use std::io::Write;
use std::path::Path;

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const WCKP_MAGIC: &[u8; 4] = b"WCKP";
pub const WCKP_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &EncoderParams<f32>, config: &EncoderConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WCKP_MAGIC);
    buf.extend_from_slice(&WCKP_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config).expect("config serializes");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, array) in params.tensors() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
        for &dim in array.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in array.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(
    params: &EncoderParams<f32>,
    config: &EncoderConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config);
    let mut file = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::storage(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EncoderParams<f32>, EncoderConfig)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != WCKP_MAGIC {
        return Err(Error::Format("not a WCKP checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != WCKP_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u32()? as usize;
    let config: EncoderConfig = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let mut params = EncoderParams::<f32>::zeros(&config);
    {
        let mut slots = params.tensors_mut();
        let mut filled = vec![false; slots.len()];
        while !cur.done() {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_owned();
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let idx = slots
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("unexpected array {name:?}")))?;
            let slot = &mut slots[idx].1;
            if slot.shape() != dims.as_slice() {
                return Err(Error::Format(format!(
                    "array {name:?} has shape {dims:?}, config implies {:?}",
                    slot.shape()
                )));
            }
            let count: usize = dims.iter().product();
            let payload = cur.take(count * 4)?;
            for (dst, c) in slot.iter_mut().zip(payload.chunks_exact(4)) {
                *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            filled[idx] = true;
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(Error::Format(format!("missing array {:?}", slots[missing].0)));
        }
    }
    Ok((params, config))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderParams<f32>, EncoderConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Pooling, Variant};

    fn small(variant: Variant, pooling: Pooling) -> EncoderConfig {
        EncoderConfig {
            d_in: 7,
            d_h: 6,
            n_blocks: 2,
            n_heads: 3,
            d_ffn: 5,
            d_e: 4,
            variant,
            pooling,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (v, p) in [
            (Variant::Transformer, Pooling::Gem),
            (Variant::Transformer, Pooling::Cls),
            (Variant::AvgMlp, Pooling::Gem),
        ] {
            let cfg = small(v, p);
            let params = init_params::<f32>(&cfg, 5).unwrap();
            let bytes = encode_checkpoint(&params, &cfg);
            let (back, cfg2) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(cfg, cfg2);
            for ((na, a), (nb, b)) in params.tensors().iter().zip(back.tensors().iter()) {
                assert_eq!(na, nb);
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(encode_checkpoint(&back, &cfg2), bytes);
        }
    }

    #[test]
    fn default_config_round_trip() {
        let cfg = EncoderConfig::default();
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let (back, _) = decode_checkpoint(&encode_checkpoint(&params, &cfg)).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let cfg = small(Variant::AvgMlp, Pooling::Gem);
        let mut bytes = encode_checkpoint(&init_params::<f32>(&cfg, 0).unwrap(), &cfg);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let cfg = small(Variant::AvgMlp, Pooling::Gem);
        let bytes = encode_checkpoint(&init_params::<f32>(&cfg, 0).unwrap(), &cfg);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
