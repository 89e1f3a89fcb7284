//! Flat binary tensor record: `"SSAT"`, `u32` rank, `rank × u64` extents,
//! then the row-major payload as little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SSAT";

/// Appends the encoded record for `t` to `out`.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    encode_tensor(t, &mut out);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Decodes one record from the front of `bytes`. `base` is the absolute
/// offset of `bytes[0]` in the enclosing file, used in error messages.
/// Returns the tensor and the number of bytes consumed.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], base: u64) -> Result<(Tensor<T>, usize)> {
    let mut cur = Cursor { bytes, pos: 0, base };
    let magic = cur.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(base, format!("bad magic {magic:?}, expected \"SSAT\"")));
    }
    let rank = u32::from_le_bytes(cur.take(4, "rank")?.try_into().unwrap()) as usize;
    if rank > 16 {
        return Err(Error::format(base + 4, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.offset();
        let d = u64::from_le_bytes(cur.take(8, "extent")?.try_into().unwrap());
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::format(at, format!("invalid extent {d}")));
        }
        shape.push(d as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(base + 8, "element count overflows"))?;
    let payload = cur.take(n.saturating_mul(8), "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((Tensor::new(&shape, data)?, cur.pos))
}

/// Decodes a buffer holding exactly one record.
pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, used) = decode_tensor(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used as u64, "trailing bytes after tensor record"));
    }
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    tensor_from_bytes(&fs::read(path)?)
}
