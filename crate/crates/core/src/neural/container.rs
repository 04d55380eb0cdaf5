//! Named-tensor container: magic `RLCK`, u32 version, u32 tensor count, then
//! per tensor u16 name length, UTF-8 name, u8 rank, u32 dims, little-endian
//! f32 payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{RelicError, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"RLCK";
pub const CONTAINER_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn write_container<W: Write>(mut w: W, tensors: &[(String, &Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.rank() as u8])?;
        for d in t.dims() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| RelicError::Format(format!("truncated container while reading {what}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_container<R: Read>(mut r: R) -> Result<NamedTensors> {
    let magic = read_exact(&mut r, 4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(RelicError::Format(format!("bad container magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CONTAINER_VERSION {
        return Err(RelicError::Format(format!("unsupported container version {version}")));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nl = read_exact(&mut r, 2, "name length")?;
        let nl = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let name = String::from_utf8(read_exact(&mut r, nl, "name")?)
            .map_err(|_| RelicError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, "dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = read_exact(&mut r, n * 4, &name)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&dims, values)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| RelicError::Format(e.to_string()))? != 0 {
        return Err(RelicError::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}
