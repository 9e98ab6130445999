//! Sparse debug dump: magic, `u64` row count, `u32` channels, `u32 x 4` dense
//! dims, coordinate rows (`4 x u32` each), then `f32` features. Little-endian.

use std::path::Path;

use super::{Coord, SparseTensor};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const SPARSE_DUMP_MAGIC: &[u8; 8] = b"SPTNSR\0\0";

pub fn write_sparse_dump<T: Real>(path: &Path, s: &SparseTensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(36 + s.nnz() * 16 + s.feats().len() * 4);
    buf.extend_from_slice(SPARSE_DUMP_MAGIC);
    buf.extend_from_slice(&(s.nnz() as u64).to_le_bytes());
    buf.extend_from_slice(&(s.channels() as u32).to_le_bytes());
    for d in s.dense_shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for c in s.coords() {
        for v in c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &v in s.feats() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_sparse_dump(path: &Path) -> Result<SparseTensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<SparseTensor<f32>> {
    let err = |offset: usize, msg: String| Error::Parse {
        what: "sparse dump",
        offset: offset as u64,
        msg,
    };
    let u32_at = |pos: usize| u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    if bytes.len() < 36 || &bytes[..8] != SPARSE_DUMP_MAGIC {
        return Err(err(0, "bad magic or short header".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let c = u32_at(16) as usize;
    let shape = [u32_at(20), u32_at(24), u32_at(28), u32_at(32)].map(|v| v as usize);
    let want = 36 + n * 16 + n * c * 4;
    if bytes.len() != want {
        return Err(err(
            36,
            format!("expected {want} bytes in total, found {}", bytes.len()),
        ));
    }
    let coords: Vec<Coord> = (0..n)
        .map(|r| {
            let p = 36 + r * 16;
            [u32_at(p), u32_at(p + 4), u32_at(p + 8), u32_at(p + 12)]
        })
        .collect();
    let feats = bytes[36 + n * 16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    SparseTensor::new(coords, feats, c, shape)
}
