//! Hamming(7,4) with parity bits at codeword positions 1, 2 and 4.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HammingDecoded {
    pub data: Vec<u8>,
    /// Blocks in which a single-bit error was corrected.
    pub corrections: usize,
}

fn encode_block(d: [u8; 4]) -> [u8; 7] {
    let [d1, d2, d3, d4] = d;
    let p1 = d1 ^ d2 ^ d4;
    let p2 = d1 ^ d3 ^ d4;
    let p4 = d2 ^ d3 ^ d4;
    [p1, p2, d1, p4, d2, d3, d4]
}

/// Encodes `data`, zero-padding to a multiple of 4. Returns the code bits
/// and the number of padding bits added.
pub fn hamming74_encode(data: &[u8]) -> (Vec<u8>, usize) {
    let pad = (4 - data.len() % 4) % 4;
    let mut bits: Vec<u8> = data.iter().map(|b| b & 1).collect();
    bits.extend(std::iter::repeat_n(0, pad));
    let code = bits.chunks(4).flat_map(|c| encode_block([c[0], c[1], c[2], c[3]])).collect();
    (code, pad)
}

/// Decodes complete 7-bit blocks, correcting one flipped bit per block.
/// A trailing partial block is ignored.
pub fn hamming74_decode(code: &[u8]) -> HammingDecoded {
    let mut data = Vec::with_capacity(code.len() / 7 * 4);
    let mut corrections = 0;
    for block in code.chunks_exact(7) {
        let mut c: [u8; 7] = std::array::from_fn(|i| block[i] & 1);
        let s1 = c[0] ^ c[2] ^ c[4] ^ c[6];
        let s2 = c[1] ^ c[2] ^ c[5] ^ c[6];
        let s4 = c[3] ^ c[4] ^ c[5] ^ c[6];
        let pos = (s1 | s2 << 1 | s4 << 2) as usize;
        if pos != 0 {
            c[pos - 1] ^= 1;
            corrections += 1;
        }
        data.extend_from_slice(&[c[2], c[4], c[5], c[6]]);
    }
    HammingDecoded { data, corrections }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message(m: u8) -> Vec<u8> {
        (0..4).rev().map(|i| (m >> i) & 1).collect()
    }

    #[test]
    fn zero_message() {
        assert_eq!(hamming74_encode(&[0, 0, 0, 0]), (vec![0; 7], 0));
    }

    #[test]
    fn known_codeword() {
        // data 1011 -> p1 = 1^0^1 = 0, p2 = 1^1^1 = 1, p4 = 0^1^1 = 0
        assert_eq!(hamming74_encode(&[1, 0, 1, 1]).0, vec![0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn length_scaling() {
        let (code, pad) = hamming74_encode(&vec![1; 8544]);
        assert_eq!(pad, 0);
        assert_eq!(code.len(), 14_952);
        let (code, pad) = hamming74_encode(&[1; 5]);
        assert_eq!((code.len(), pad), (14, 3));
    }

    #[test]
    fn round_trip_all_messages() {
        for m in 0..16u8 {
            let d = message(m);
            let (code, _) = hamming74_encode(&d);
            assert_eq!(hamming74_decode(&code), HammingDecoded { data: d, corrections: 0 });
        }
    }

    #[test]
    fn every_single_bit_error_is_corrected() {
        let mut cases = 0;
        for m in 0..16u8 {
            let d = message(m);
            let (code, _) = hamming74_encode(&d);
            for flip in 0..7 {
                let mut bad = code.clone();
                bad[flip] ^= 1;
                let out = hamming74_decode(&bad);
                assert_eq!(out.data, d, "message {m:04b} flip {flip}");
                assert_eq!(out.corrections, 1);
                cases += 1;
            }
        }
        assert_eq!(cases, 112);
    }

    #[test]
    fn partial_block_ignored() {
        let (mut code, _) = hamming74_encode(&[1, 1, 0, 1]);
        code.extend_from_slice(&[1, 0, 1]);
        assert_eq!(hamming74_decode(&code).data, vec![1, 1, 0, 1]);
    }
}
