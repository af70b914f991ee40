//! The `GBT1` binary tensor format.
//!
//! Layout, all little-endian with no padding: the 4-byte magic `GBT1`, a
//! `u32` order `N`, `N` `u64` extents, then the values as `f64` in row-major
//! order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"GBT1";

pub fn encode(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    "GBT1 tensor",
                    format!("truncated while reading {what} at byte {}", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<DenseTensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("GBT1 tensor", "bad magic"));
    }
    let n = u32::from_le_bytes(r.take(4, "order")?.try_into().unwrap()) as usize;
    if n == 0 {
        return Err(Error::format("GBT1 tensor", "order is zero"));
    }
    // Reject absurd orders before allocating.
    if n > bytes.len() / 8 {
        return Err(Error::format(
            "GBT1 tensor",
            format!("order {n} exceeds file size"),
        ));
    }
    let mut shape = Vec::with_capacity(n);
    for _ in 0..n {
        let d = u64::from_le_bytes(r.take(8, "extent")?.try_into().unwrap());
        shape.push(
            usize::try_from(d)
                .map_err(|_| Error::format("GBT1 tensor", "extent overflows usize"))?,
        );
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("GBT1 tensor", "element count overflows"))?;
    let remaining = bytes.len() - r.pos;
    if len.checked_mul(8) != Some(remaining) {
        return Err(Error::format(
            "GBT1 tensor",
            format!("shape {shape:?} needs {len} values but {remaining} bytes remain"),
        ));
    }
    let data = bytes[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseTensor::new(shape, data).map_err(|e| Error::format("GBT1 tensor", e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { what, reason } => Error::Format {
            what: format!("{what} {}", path.display()),
            reason,
        },
        other => other,
    })
}
