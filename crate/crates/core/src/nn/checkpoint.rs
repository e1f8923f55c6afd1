//! Binary weight checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "AMPCNET1"
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (network config, seed, ...)
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes
//!   rank     u32, dims u64 × rank
//!   values   f64 × prod(dims)
//! ```

use std::io::{Read, Write};

use super::ParamSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMPCNET1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    meta: &serde_json::Value,
    params: &ParamSet,
) -> Result<()> {
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_ELEMS: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a weight checkpoint (bad magic)".into()));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = serde_json::from_slice(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let count = read_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(r)?;
        if rank > 2 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1u64;
        for _ in 0..rank {
            let d = read_u64(r)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_ELEMS {
            return Err(Error::Format(format!("tensor {name} too large")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.push(name, Tensor::new(&shape, data)?);
    }
    Ok(Checkpoint { meta, params })
}
