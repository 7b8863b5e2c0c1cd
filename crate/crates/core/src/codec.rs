//! Base64 little-endian f64 blocks used by the JSON model files.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Error, Result};

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str, expected_len: usize, field: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::invalid(format!("{field}: bad base64: {e}")))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::invalid(format!(
            "{field}: {} bytes, expected {} values",
            bytes.len(),
            expected_len
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bit_exact_round_trip(bits in proptest::collection::vec(any::<u64>(), 0..64)) {
            let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let back = decode_f64(&encode_f64(&values), values.len(), "v").unwrap();
            let back_bits: Vec<u64> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back_bits, bits);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(decode_f64(&encode_f64(&[1.0, 2.0]), 3, "x").is_err());
        assert!(decode_f64("***", 0, "x").is_err());
    }
}
