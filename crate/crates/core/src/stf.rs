//! STF1 tensor container: `"STF1"` magic, u32 rank, rank u32 dims, then the
//! raw little-endian f32 payload. Round-trips are bit-exact.
//!
//! Only the byte-level encoding lives here; path-based read/write wrappers
//! are in the companion crate.

use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{Tensor2D, Tensor3D, TensorError};

pub const MAGIC: [u8; 4] = *b"STF1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StfError {
    /// Leading bytes are not `"STF1"`.
    BadMagic,
    /// Declared rank/dims disagree with the payload length, or rank is
    /// unsupported (only 2 and 3 are used).
    DimPayloadMismatch,
    /// Buffer ended before the declared content.
    Truncated,
    /// Decoded values violated a tensor invariant (e.g. non-finite).
    InvalidTensor(TensorError),
}

impl fmt::Display for StfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StfError::BadMagic => write!(f, "bad magic bytes (expected \"STF1\")"),
            StfError::DimPayloadMismatch => write!(f, "dims do not match payload length"),
            StfError::Truncated => write!(f, "buffer shorter than declared content"),
            StfError::InvalidTensor(e) => write!(f, "decoded tensor invalid: {e}"),
        }
    }
}

fn encode(dims: &[u32], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Header (rank + dims) and payload start offset.
fn decode_header(bytes: &[u8]) -> Result<(Vec<u32>, usize), StfError> {
    if bytes.len() < 4 {
        return Err(StfError::Truncated);
    }
    if bytes[0..4] != MAGIC {
        return Err(StfError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(StfError::Truncated);
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if !(2..=3).contains(&rank) {
        return Err(StfError::DimPayloadMismatch);
    }
    let header_len = 8 + 4 * rank;
    if bytes.len() < header_len {
        return Err(StfError::Truncated);
    }
    let dims: Vec<u32> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()))
        .collect();
    Ok((dims, header_len))
}

fn decode_payload(bytes: &[u8], offset: usize, count: usize) -> Result<Vec<f32>, StfError> {
    let expected = offset + 4 * count;
    if bytes.len() < expected {
        return Err(StfError::Truncated);
    }
    if bytes.len() != expected {
        return Err(StfError::DimPayloadMismatch);
    }
    Ok(bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_tensor2d(t: &Tensor2D) -> Vec<u8> {
    encode(&[t.height() as u32, t.width() as u32], t.data())
}

pub fn encode_tensor3d(t: &Tensor3D) -> Vec<u8> {
    encode(
        &[t.depth() as u32, t.height() as u32, t.width() as u32],
        t.data(),
    )
}

pub fn decode_tensor2d(bytes: &[u8]) -> Result<Tensor2D, StfError> {
    let (dims, offset) = decode_header(bytes)?;
    if dims.len() != 2 {
        return Err(StfError::DimPayloadMismatch);
    }
    let (h, w) = (dims[0] as usize, dims[1] as usize);
    let values = decode_payload(bytes, offset, h * w)?;
    Tensor2D::new(h, w, values).map_err(StfError::InvalidTensor)
}

pub fn decode_tensor3d(bytes: &[u8]) -> Result<Tensor3D, StfError> {
    let (dims, offset) = decode_header(bytes)?;
    if dims.len() != 3 {
        return Err(StfError::DimPayloadMismatch);
    }
    let (d, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let values = decode_payload(bytes, offset, d * h * w)?;
    Tensor3D::new(d, h, w, values).map_err(StfError::InvalidTensor)
}
