//! Checkpoint container.
//!
//! ```text
//! magic "SFCKPT\0\0" | u32 version
//! u32 length | UTF-8 config, one key=value per line (includes step=)
//! u32 record count
//! per record: u32 length | UTF-8 name | u32 rank | u64 dims[rank] | f32 values
//! ```
//!
//! A layer contributes a `<name>.weight` record with dims
//! `[kt, kh, kw, c_in, c_out]` and, when it has one, a `<name>.bias` record.
//! Everything is little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::KernelWeights;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f32]) {
    put_str(out, name);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &ModelState<f32>) -> Result<Vec<u8>> {
    state.validate()?;
    let mut config = String::new();
    for (k, v) in state.config.to_pairs() {
        config.push_str(&format!("{k}={v}\n"));
    }
    config.push_str(&format!("step={}\n", state.step));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &config);
    let records: usize = state.params.values().map(|w| 1 + w.bias.is_some() as usize).sum();
    out.extend_from_slice(&(records as u32).to_le_bytes());
    for (name, w) in &state.params {
        let s = w.spec;
        let dims = [s.kernel[0], s.kernel[1], s.kernel[2], s.in_channels, s.out_channels];
        put_record(&mut out, &format!("{name}.weight"), &dims, &w.weights);
        if let Some(b) = &w.bias {
            put_record(&mut out, &format!("{name}.bias"), &[b.len()], b);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: "checkpoint",
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("need {n} bytes, {} remain", self.bytes.len() - self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let bytes = self.take(n)?;
        std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            what: "checkpoint",
            offset: start as u64,
            msg: format!("invalid UTF-8: {e}"),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        cur.pos = 0;
        return Err(cur.err("bad magic"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let text = cur.string()?;
    let mut pairs = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cur.err(format!("config line without '=': {line:?}")))?;
        pairs.insert(k.to_owned(), v.to_owned());
    }
    let step = pairs
        .get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("config has no numeric step"))?;
    let config = ModelConfig::from_pairs(&pairs)?;

    let count = cur.u32()? as usize;
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name = cur.string()?.to_owned();
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = cur
            .take(n.checked_mul(4).ok_or_else(|| cur.err("record too large"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), (dims, values)).is_some() {
            return Err(cur.err(format!("duplicate record {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let mut params = BTreeMap::new();
    for (name, spec) in config.param_specs() {
        let (dims, weights) = records
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| Error::ModelMismatch(format!("checkpoint lacks {name}.weight")))?;
        let want = [
            spec.kernel[0],
            spec.kernel[1],
            spec.kernel[2],
            spec.in_channels,
            spec.out_channels,
        ];
        if dims != want {
            return Err(Error::ModelMismatch(format!(
                "{name}.weight has dims {dims:?}, expected {want:?}"
            )));
        }
        let bias = match records.remove(&format!("{name}.bias")) {
            Some((dims, b)) if spec.has_bias && dims == [spec.out_channels] => Some(b),
            None if !spec.has_bias => None,
            _ => return Err(Error::ModelMismatch(format!("{name}.bias does not match the layer"))),
        };
        params.insert(name, KernelWeights { spec, weights, bias });
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::ModelMismatch(format!(
            "checkpoint has unexpected record {extra}"
        )));
    }
    Ok(ModelState { config, params, step })
}

pub fn write_checkpoint(path: &Path, state: &ModelState<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
