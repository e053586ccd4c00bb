//! Binary tensor blobs: a small header with dtype and shape, little-endian
//! payload, and a trailing FNV-1a checksum of everything before it.
//!
//! ```text
//! magic "LDTB" | u32 version=1 | u32 dtype (0=f32, 1=f64) | u32 ndim
//! | u64 dims[ndim] | payload | u64 checksum
//! ```

use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LDTB";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape().len() + 8 * t.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    location: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::integrity(self.location, "truncated blob"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], location: &str) -> Result<(Tensor, DType)> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        location,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::integrity(location, "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::integrity(location, format!("unsupported version {version}")));
    }
    let dtype = match c.u32()? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::integrity(location, format!("unknown dtype {other}"))),
    };
    let ndim = c.u32()? as usize;
    if ndim > 8 {
        return Err(Error::integrity(location, format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let payload = c.take(n.checked_mul(width).ok_or_else(|| Error::integrity(location, "size overflow"))?)?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    let body_end = c.pos;
    let stored = c.u64()?;
    if stored != checksum(&bytes[..body_end]) {
        return Err(Error::integrity(location, "checksum mismatch"));
    }
    if c.pos != bytes.len() {
        return Err(Error::integrity(location, "trailing bytes"));
    }
    Ok((Tensor::new(shape, data), dtype))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode(t, dtype)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, &path.display().to_string()).map(|(t, _)| t)
}
