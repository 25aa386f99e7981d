//! Bit payloads: dot-code images and (7,4) Hamming codes.

pub mod dotcode;
pub mod hamming;

pub use dotcode::{decode_chunks, dotcode_decode, dotcode_encode, encode_chunks, DotCodeLayout, BITS_PER_IMAGE, THRESHOLD};
pub use hamming::{hamming74_decode, hamming74_encode, HammingDecoded};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ecc {
    #[default]
    None,
    Hamming74,
}

/// Bytes to bits, most significant bit first.
pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1)).collect()
}

/// Bits to bytes, most significant bit first. A trailing partial byte is zero-padded.
pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b & 1) << (7 - i))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_bits_round_trip() {
        assert_eq!(bytes_to_bits(&[0b1010_0001]), vec![1, 0, 1, 0, 0, 0, 0, 1]);
        let data = b"MIT License".to_vec();
        assert_eq!(bits_to_bytes(&bytes_to_bits(&data)), data);
        assert_eq!(bits_to_bytes(&[1, 1]), vec![0b1100_0000]);
    }
}
