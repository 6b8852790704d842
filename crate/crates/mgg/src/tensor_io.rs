//! `MGGT` binary tensors: magic, `u32` rank, `u32` dims, little-endian `f64` data.

use mgg_core::Tensor;

pub const MAGIC: &[u8; 4] = b"MGGT";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("missing MGGT magic")]
    Magic,
    #[error("file ends early")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], DecodeError> {
    if bytes.len() < n {
        return Err(DecodeError::Truncated);
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<usize, DecodeError> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")) as usize)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor, DecodeError> {
    if take(&mut bytes, 4)? != MAGIC {
        return Err(DecodeError::Magic);
    }
    let rank = read_u32(&mut bytes)?;
    let shape = (0..rank).map(|_| read_u32(&mut bytes)).collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let payload = take(&mut bytes, n.checked_mul(8).ok_or(DecodeError::Truncated)?)?;
    if !bytes.is_empty() {
        return Err(DecodeError::Trailing(bytes.len()));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| DecodeError::Invalid(e.to_string()))
}
