//! Debug dump of a dense tensor: 8-byte magic, `u32` rank, `u64` dims, then
//! little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DenseTensor, Real};
use crate::error::{Error, Result};

pub const DENSE_DUMP_MAGIC: &[u8; 8] = b"DTNSR\0\0\0";

pub fn write_dense_dump<T: Real>(path: &Path, tensor: &DenseTensor<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(DENSE_DUMP_MAGIC)?;
    put(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        put(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for &v in tensor.data() {
        payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    put(&payload)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dense_dump(path: &Path) -> Result<DenseTensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_dense_dump(&bytes)
}

fn parse_dense_dump(bytes: &[u8]) -> Result<DenseTensor<f32>> {
    let err = |offset: usize, msg: String| Error::Parse {
        what: "dense dump",
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 12 || &bytes[..8] != DENSE_DUMP_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| err(pos, "truncated dims".into()))?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != n * 4 {
        return Err(err(
            pos,
            format!("expected {} payload bytes, found {}", n * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseTensor::new(shape, data)
}
