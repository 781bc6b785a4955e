//! `MCT1` raw tensor dumps: magic, little-endian `u32` rank and extents,
//! then little-endian `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"MCT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated MCT1 header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad MCT1 magic".into()));
    }
    let read_u32 = |c: &mut &[u8]| -> Result<u32> {
        let mut b = [0u8; 4];
        c.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated MCT1 data".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let rank = read_u32(&mut cursor)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible MCT1 rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut cursor).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if cursor.len() != 4 * n {
        return Err(Error::Format(format!(
            "MCT1 payload has {} bytes, shape {:?} needs {}",
            cursor.len(),
            shape,
            4 * n
        )));
    }
    let data = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
