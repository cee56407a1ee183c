//! Container shared by every binary artifact: a little-endian `u32` header
//! length, a JSON header, then a raw little-endian payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let len = u32::try_from(h.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(4 + h.len() + payload.len());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format("file shorter than its length prefix".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let end = 4usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header = serde_json::from_slice(&bytes[4..end])?;
    Ok((header, &bytes[end..]))
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    std::fs::write(path, encode(header, payload)?)?;
    Ok(())
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", bytes.len(), expected * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}
