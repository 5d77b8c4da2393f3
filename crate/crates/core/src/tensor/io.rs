//! Little-endian tensor dump format:
//! `"IMTN" | u32 version | u32 rank | u64 dims[rank] | f64 payload`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"IMTN";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

impl Tensor {
    /// Number of bytes [`Tensor::write_to`] emits for this tensor.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + 8 * self.rank() + 8 * self.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&TENSOR_MAGIC);
        buf.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in self.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u64(r)?;
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(shape, data)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
