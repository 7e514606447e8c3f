//! `TNSR` binary tensor container.
//!
//! Layout (little-endian): magic `TNSR`, `u32` version, `u8` dtype code,
//! `u8` rank, `rank` x `u32` dims, row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

/// A tensor of any storable element type.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
            StoredTensor::I32 { .. } => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::I32 { shape, .. } => shape,
        }
    }

    /// Float payload converted to `f64`; integers are rejected.
    pub fn to_f64(&self) -> Result<Tensor<f64>> {
        match self {
            StoredTensor::F32(t) => Ok(t.cast()),
            StoredTensor::F64(t) => Ok(t.clone()),
            StoredTensor::I32 { .. } => Err(Error::Format("expected a float tensor, found i32".into())),
        }
    }

    pub fn encoded_len(&self) -> usize {
        let numel: usize = self.shape().iter().product();
        10 + 4 * self.shape().len() + numel * self.dtype().size()
    }
}

pub fn encode(t: &StoredTensor, out: &mut Vec<u8>) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", shape.len())));
    }
    out.reserve(t.encoded_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t {
        StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(StoredTensor, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let code = cur.take(1)?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let rank = cur.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = cur.take(
        numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("shape overflows".into()))?,
    )?;
    let t = match dtype {
        DType::F32 => StoredTensor::F32(Tensor::new(
            shape,
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
        DType::F64 => StoredTensor::F64(Tensor::new(
            shape,
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
        DType::I32 => StoredTensor::I32 {
            shape,
            data: payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
        },
    };
    Ok((t, cur.pos))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("truncated tensor record".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_to(mut w: impl Write, t: &StoredTensor) -> std::io::Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&buf)
}

pub fn read_from(mut r: impl Read) -> Result<StoredTensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<reader>", e))?;
    let (t, used) = decode(&buf)?;
    if used != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - used)));
    }
    Ok(t)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&buf)?;
    if used != buf.len() {
        return Err(Error::Format(format!("{}: {} trailing bytes", path.display(), buf.len() - used)));
    }
    Ok(t)
}
