//! Binary container: a JSON header followed by a raw `f64` payload.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   b"MTAILOR\x01"
//! hlen    u64       header length in bytes
//! header  hlen      UTF-8 JSON
//! n       u64       number of payload values
//! payload n * 8     f64, little-endian
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTAILOR\x01";

pub fn encode<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(mut bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let mut magic = [0u8; 8];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let hlen = read_u64(&mut bytes)? as usize;
    if hlen > bytes.len() {
        return Err(Error::Format(format!("header length {hlen} exceeds file")));
    }
    let header = serde_json::from_slice(&bytes[..hlen])?;
    bytes = &bytes[hlen..];
    let n = read_u64(&mut bytes)? as usize;
    if bytes.len() != n * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            n * 8
        )));
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode(header, payload)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| Error::Format("truncated container".into()))
}

fn read_u64(src: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let payload = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI];
        let bytes = encode(&serde_json::json!({"version": 1}), &payload).unwrap();
        let (h, p): (serde_json::Value, Vec<f64>) = decode(&bytes).unwrap();
        assert_eq!(h["version"], 1);
        let bits: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        let expected: Vec<u64> = payload.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, expected);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&serde_json::json!({}), &[1.0, 2.0]).unwrap();
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<serde_json::Value>(&bad).is_err());
        assert!(decode::<serde_json::Value>(&bytes[..4]).is_err());
    }
}
