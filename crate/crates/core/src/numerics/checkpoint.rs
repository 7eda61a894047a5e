//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "MFLOWCKP"
//! version u32      = 1
//! count   u32
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   rank u32, dims u64 × rank
//!   payload f64 × product(dims), little-endian
//! ```

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint(format!("`{name}` payload overflows"))
        })?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_tensors<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    std::fs::write(path, encode_tensors(entries)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_corrupt_headers() {
        assert!(decode_tensors(b"NOTACKPT\x01\0\0\0\0\0\0\0").is_err());
        let mut good = encode_tensors([("w", &Tensor::from_vec(vec![1.0, 2.0]))]);
        good.pop();
        assert!(decode_tensors(&good).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 0..40),
            name in "[a-z.]{1,12}",
        ) {
            let n = values.len();
            let t = Tensor::new(vec![n], values).unwrap();
            let scalar = Tensor::scalar(-0.0);
            let bytes = encode_tensors([(name.as_str(), &t), ("s", &scalar)]);
            let back = decode_tensors(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
            prop_assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
        }
    }
}
