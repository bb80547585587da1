//! Array encoding and file helpers.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::Serialize;

use crate::error::{LabError, Result};

/// Base64 of the little-endian bytes of `values`.
pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text.trim())
        .map_err(|e| LabError::Parse(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(LabError::Parse("array length is not a multiple of 8 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))
}

/// Shortest round-trip form, so CSV values parse back to the same bits.
pub fn csv_float(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrays_round_trip_bitwise() {
        let v = vec![0.0, -0.0, 1.5, f64::MIN_POSITIVE, 1e300, -7.25e-12];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        assert_eq!(v.len(), back.len());
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_arrays_are_rejected() {
        assert!(decode_f64s(&STANDARD.encode([1u8, 2, 3])).is_err());
        assert!(decode_f64s("###").is_err());
    }

    #[test]
    fn csv_floats_parse_back() {
        for x in [0.1, 1.0 / 3.0, -2.5e-17] {
            assert_eq!(csv_float(x).parse::<f64>().unwrap(), x);
        }
    }
}
