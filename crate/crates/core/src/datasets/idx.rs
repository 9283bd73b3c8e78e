//! IDX containers of unsigned bytes.
//!
//! ```text
//! 0x00 0x00 0x08 rank
//! u32 BE extent, repeated rank times
//! u8 data, row-major
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Bytes scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        let data = self.data.iter().map(|&b| T::from_u8(b).unwrap() * scale).collect();
        Tensor::new(self.shape.clone(), data).unwrap()
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, "magic must start with two zero bytes"));
    }
    if bytes[2] != UBYTE {
        return Err(format_err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let b = bytes
            .get(at..at + 4)
            .ok_or_else(|| format_err(bytes.len(), format!("truncated extent {i}")))?;
        shape.push(u32::from_be_bytes(b.try_into().unwrap()) as usize);
    }
    let start = 4 + 4 * rank;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "extents overflow"))?;
    let have = bytes.len() - start;
    if have < numel {
        return Err(format_err(
            bytes.len(),
            format!("truncated data: {numel} bytes expected, {have} present"),
        ));
    }
    if have > numel {
        return Err(format_err(start + numel, format!("{} trailing bytes", have - numel)));
    }
    Ok(IdxArray {
        shape,
        data: bytes[start..].to_vec(),
    })
}

pub fn write_idx(array: &IdxArray) -> Result<Vec<u8>> {
    if array.shape.len() > u8::MAX as usize {
        return Err(Error::arg("IDX rank must fit in one byte"));
    }
    if array.shape.iter().product::<usize>() != array.data.len() {
        return Err(Error::shape("IDX shape does not match data length"));
    }
    let mut out = vec![0, 0, UBYTE, array.shape.len() as u8];
    for &d in &array.shape {
        let d = u32::try_from(d).map_err(|_| Error::arg("IDX extent exceeds u32"))?;
        out.extend(d.to_be_bytes());
    }
    out.extend(&array.data);
    Ok(out)
}
