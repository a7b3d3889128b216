//! AEUNET1 checkpoint.
//!
//! Little-endian: magic `AEUNET1\0`; config as u32 in_channels, u32
//! base_width, u32 depth, f64 dropout_rate, u8 norm_enabled, 3 zero bytes;
//! u32 count of learnable tensors followed by the tensors; u32 count of
//! running-statistics tensors followed by those. Each tensor is u32 name
//! length, UTF-8 name, u32 rank, rank x u32 dims, binary32 payload.

use std::fs;
use std::path::Path;

use super::config::UNetConfig;
use super::params::{NamedTensor, ParameterSet};
use crate::chipdata::format::decode_f32s;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"AEUNET1\0";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &NamedTensor<T>) {
    put_u32(out, t.name.len());
    out.extend_from_slice(t.name.as_bytes());
    put_u32(out, t.dims.len());
    for &d in &t.dims {
        put_u32(out, d);
    }
    for v in &t.data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Scalar>(params: &ParameterSet<T>) -> Vec<u8> {
    let c = params.config();
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, c.in_channels);
    put_u32(&mut out, c.base_width);
    put_u32(&mut out, c.depth);
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    out.push(u8::from(c.norm_enabled));
    out.extend_from_slice(&[0, 0, 0]);
    for list in [&params.tensors, &params.running] {
        put_u32(&mut out, list.len());
        for t in list {
            put_tensor(&mut out, t);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated {
            expected: self.at.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor<T: Scalar>(&mut self) -> Result<NamedTensor<T>> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Invariant("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = decode_f32s(self.take(count.saturating_mul(4))?)
            .into_iter()
            .map(|v| T::from_f64_lossy(f64::from(v)))
            .collect();
        Ok(NamedTensor { name, dims, data })
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParameterSet<T>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, at: 8 };
    let in_channels = r.u32()?;
    let base_width = r.u32()?;
    let depth = r.u32()?;
    let dropout_rate = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let norm_enabled = r.take(4)?[0] != 0;
    let config = UNetConfig {
        in_channels,
        base_width,
        depth,
        dropout_rate,
        norm_enabled,
    };
    let mut params = ParameterSet::zeros(config)?;
    let n = r.u32()?;
    let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let n = r.u32()?;
    let running = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    if r.at != bytes.len() {
        return Err(Error::DimensionMismatch("trailing bytes after checkpoint".into()));
    }
    params.load_records(tensors, running)?;
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(params)
}

pub fn write_checkpoint<T: Scalar>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ParameterSet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
