//! `GFEA` feature files: the 4-byte magic `GFEA`, then height, width and
//! channels as little-endian `u32`, then `height * width * channels`
//! little-endian `f32` values ordered (row, column, channel).

use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GFEA";
const HEADER_LEN: usize = 16;

pub fn write_features(map: &FeatureMap) -> Result<Vec<u8>> {
    let dims = [map.height, map.width, map.channels];
    let mut out = Vec::with_capacity(HEADER_LEN + map.data.len() * 4);
    out.extend_from_slice(MAGIC);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::FeatureFormat(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &map.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_features(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::FeatureFormat(format!(
            "expected at least {HEADER_LEN} header bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::FeatureFormat(format!(
            "bad magic {:?}, expected \"GFEA\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::FeatureFormat(format!(
            "dimensions must be positive, got {h}x{w}x{c}"
        )));
    }
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::FeatureFormat(format!("dimensions {h}x{w}x{c} overflow")))?;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() != expected {
        return Err(Error::FeatureFormat(format!(
            "{h}x{w}x{c} map needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::FeatureFormat(format!("non-finite value at index {i}")));
    }
    FeatureMap::from_vec(h, w, c, data)
}

pub fn export_features(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_features(map)?).map_err(|e| Error::io(path, e))
}

pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes)
}
