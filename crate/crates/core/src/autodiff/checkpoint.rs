//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `PTNCKPT1`, then records until end of file.
//! Each record is
//!
//! ```text
//! u64 LE   name length in bytes
//! [u8]     UTF-8 name
//! u64 LE   rank
//! u64 LE   extent, repeated rank times
//! f32 LE   data, product(extents) values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PTNCKPT1";

pub fn encode<T: Scalar>(records: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in records {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str, limit: usize) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        if v > limit as u64 {
            return Err(Error::Format {
                offset: at,
                message: format!("{what} {v} exceeds remaining input"),
            });
        }
        Ok(v as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a PTNCKPT1 checkpoint".into(),
        });
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let remaining = bytes.len() - r.pos;
        let len = r.count("name length", remaining)?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "record name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.count("rank", (bytes.len() - r.pos) / 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.count("extent", bytes.len())?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (bytes.len() - r.pos) / 4)
            .ok_or_else(|| Error::Format {
                offset: r.pos,
                message: format!("record {name:?} with shape {shape:?} exceeds remaining input"),
            })?;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn save<T: Scalar>(path: &Path, records: &[(String, Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
