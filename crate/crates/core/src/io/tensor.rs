//! The `MPF1` tensor container.
//!
//! Layout, all little-endian: magic `MPF1`, rank as u32 (at most 4), `rank`
//! u32 dims, then `product(dims)` IEEE-754 f32 values in row-major order.
//! Values are widened to f64 on load; the engine computes in 64-bit
//! throughout. Decoding failures report the byte offset they occurred at.

use std::fs;
use std::path::Path;

use crate::numerics::Matrix;
use crate::prototype::FeatureMap;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MPF1";
pub const MAX_RANK: u32 = 4;

/// In-memory tensor: dims plus row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK as usize {
            return Err(Error::shape(format!(
                "tensor rank {} outside 1..=4",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "dims {:?} imply {expected} values, got {}",
                dims,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.data),
            other => Err(Error::shape(format!("expected rank 2, got dims {other:?}"))),
        }
    }

    pub fn from_feature_map(f: &FeatureMap) -> Self {
        Tensor {
            dims: vec![f.height(), f.width(), f.dim()],
            data: f.values().to_vec(),
        }
    }

    pub fn into_feature_map(self) -> Result<FeatureMap> {
        match self.dims.as_slice() {
            &[h, w, d] => FeatureMap::from_values(h, w, d, self.data),
            other => Err(Error::shape(format!("expected rank 3, got dims {other:?}"))),
        }
    }

    pub fn into_vector(self) -> Result<Vec<f64>> {
        match self.dims.as_slice() {
            &[_] => Ok(self.data),
            other => Err(Error::shape(format!("expected rank 1, got dims {other:?}"))),
        }
    }
}

/// Serializes at 32-bit precision.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * tensor.dims.len() + 4 * tensor.data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads and validates a tensor file; the whole payload must be present and
/// nothing may trail it.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes)
}

fn take<'a>(bytes: &'a [u8], offset: &mut u64, len: usize, what: &str) -> Result<&'a [u8]> {
    let start = *offset as usize;
    if bytes.len() < start + len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated while reading {what} ({len} bytes needed at {offset})"),
        ));
    }
    *offset += len as u64;
    Ok(&bytes[start..start + len])
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut offset = 0u64;
    let magic = take(bytes, &mut offset, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let rank_bytes = take(bytes, &mut offset, 4, "rank")?;
    let rank = u32::from_le_bytes(rank_bytes.try_into().unwrap());
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(
            4,
            format!("rank {rank} outside 1..={MAX_RANK}"),
        ));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let at = offset;
        let d = take(bytes, &mut offset, 4, &format!("dim {i}"))?;
        let d = u32::from_le_bytes(d.try_into().unwrap());
        if d == 0 {
            return Err(Error::format(at, format!("dim {i} is zero")));
        }
        dims.push(d as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| {
            Error::format(8, format!("dims {dims:?} overflow the addressable payload"))
        })?;
    let payload = take(bytes, &mut offset, count * 4, "payload")?;
    if offset as usize != bytes.len() {
        return Err(Error::format(
            offset,
            format!(
                "{} trailing bytes after the payload",
                bytes.len() as u64 - offset
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(dims, data)
}
