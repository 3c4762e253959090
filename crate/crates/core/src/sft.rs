//! SFT1 single-tensor container.
//!
//! Layout: `"SFT1"`, `u32` LE header length, UTF-8 JSON header
//! `{"shape":[..],"dtype":"f32"|"f64"}`, little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SFT_MAGIC: &[u8; 4] = b"SFT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: DType,
}

pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        shape: t.shape().to_vec(),
        dtype,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + t.numel() * dtype.width());
    out.extend_from_slice(SFT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != SFT_MAGIC {
        return Err(Error::Format("not an SFT1 tensor file (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Format("truncated SFT1 header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("bad SFT1 header: {e}")))?;
    let n: usize = header.shape.iter().product();
    let payload = &bytes[8 + hlen..];
    let want = n * header.dtype.width();
    if payload.len() != want {
        return Err(Error::Format(format!(
            "SFT1 payload is {} bytes, shape {:?} as {:?} needs {want}",
            payload.len(),
            header.shape,
            header.dtype
        )));
    }
    let data = match header.dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(&header.shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode(t, dtype)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
