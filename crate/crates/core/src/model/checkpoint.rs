//! Versioned binary checkpoint: magic `HFCK`, u32 version, the topology as
//! JSON, then every parameter as (group, name, dims, f32 data). All
//! integers little-endian.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::config::TopologyConfig;
use super::network::ModelState;
use super::params::{Group, Param, ParamStore};
use super::ModelError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HFCK";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(m: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(m.config()).expect("topology serializes");
    let w = &mut out;
    w.write_u32::<LittleEndian>(VERSION).unwrap();
    w.write_u32::<LittleEndian>(cfg.len() as u32).unwrap();
    w.write_all(&cfg).unwrap();
    w.write_u32::<LittleEndian>(m.store.len() as u32).unwrap();
    for p in m.store.iter() {
        w.write_u8(p.group.code()).unwrap();
        w.write_u32::<LittleEndian>(p.name.len() as u32).unwrap();
        w.write_all(p.name.as_bytes()).unwrap();
        w.write_u32::<LittleEndian>(p.value.shape().len() as u32).unwrap();
        for &d in p.value.shape() {
            w.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in p.value.data() {
            w.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn short(e: std::io::Error) -> ModelError {
    bad(format!("truncated: {e}"))
}

/// Decodes a checkpoint; with `expected`, rejects a stored topology that
/// differs from it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&TopologyConfig>) -> Result<ModelState, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut r = Cursor::new(&bytes[4..]);
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let mut js = vec![0u8; n];
    r.read_exact(&mut js).map_err(short)?;
    let cfg: TopologyConfig = serde_json::from_slice(&js).map_err(|e| bad(format!("topology: {e}")))?;
    if let Some(want) = expected {
        if want != &cfg {
            return Err(bad(format!("stored topology {} disagrees with requested {}", cfg.name(), want.name())));
        }
    }
    let count = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let code = r.read_u8().map_err(short)?;
        let group = Group::from_code(code).ok_or_else(|| bad(format!("unknown group code {code}")))?;
        let len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(short)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(short)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel * 4 > bytes.len() {
            return Err(bad(format!("parameter {name} larger than file")));
        }
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(short)?;
        store.push(Param { name, group, value: Tensor::from_vec(&shape, data)? });
    }
    if (r.position() as usize) != bytes.len() - 4 {
        return Err(bad("trailing bytes"));
    }
    ModelState::with_store(&cfg, store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, m: &ModelState) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(m))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&TopologyConfig>) -> Result<ModelState, ModelError> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_topology;

    #[test]
    fn round_trip_and_rejection() {
        let cfg = TopologyConfig::named("hf-2").unwrap();
        let m = build_topology(&cfg, 4).unwrap();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes, Some(&cfg)).unwrap();
        assert_eq!(back, m);
        let other = TopologyConfig::named("hf-3").unwrap();
        assert!(decode_checkpoint(&bytes, Some(&other)).unwrap_err().to_string().contains("disagrees"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], None).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong, None).unwrap_err().to_string().contains("magic"));
    }
}
