//! Dot codes: bits drawn as black (0) or white (1) square patches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels below this value read as black.
pub const THRESHOLD: f32 = 0.53;

/// Default chunk size for payloads spread over several images.
pub const BITS_PER_IMAGE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DotCodeLayout {
    pub n_bits: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    pub dims: [usize; 3],
}

impl DotCodeLayout {
    /// Squarest grid with `cols >= rows`, filled row-major from the top left.
    pub fn new(n_bits: usize, dims: [usize; 3]) -> Result<Self> {
        if n_bits == 0 {
            return Err(Error::invalid("empty dot-code payload"));
        }
        let [c, h, w] = dims;
        if c == 0 {
            return Err(Error::invalid("dot code needs at least one channel"));
        }
        let mut cols = (n_bits as f64).sqrt().floor() as usize;
        while cols * cols < n_bits {
            cols += 1;
        }
        let rows = n_bits.div_ceil(cols);
        let patch_px = (w / cols).min(h / rows);
        if patch_px == 0 {
            return Err(Error::invalid(format!("{n_bits} bits need a {rows}×{cols} grid, too large for {w}×{h} px")));
        }
        Ok(DotCodeLayout { n_bits, rows, cols, patch_px, dims })
    }

    fn cell_origin(&self, bit: usize) -> (usize, usize) {
        ((bit / self.cols) * self.patch_px, (bit % self.cols) * self.patch_px)
    }
}

fn dims_of(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::shape("dot code", format!("expected C×H×W, got {s:?}"))),
    }
}

/// Everything outside the used cells (spare cells and the border) is black.
pub fn dotcode_encode(bits: &[u8], dims: [usize; 3]) -> Result<Tensor> {
    let layout = DotCodeLayout::new(bits.len(), dims)?;
    let [c, h, w] = dims;
    let mut plane = vec![0.0f32; h * w];
    for (i, &b) in bits.iter().enumerate() {
        if b & 1 == 0 {
            continue;
        }
        let (y0, x0) = layout.cell_origin(i);
        for y in y0..y0 + layout.patch_px {
            plane[y * w + x0..y * w + x0 + layout.patch_px].fill(1.0);
        }
    }
    Ok(Tensor::from_vec(&dims, (0..c).flat_map(|_| plane.iter().copied()).collect()))
}

/// Thresholds every channel value at [`THRESHOLD`] and takes the majority per
/// patch. An exact tie decodes as 1.
pub fn dotcode_decode(image: &Tensor, n_bits: usize) -> Result<Vec<u8>> {
    let dims = dims_of(image)?;
    let layout = DotCodeLayout::new(n_bits, dims)?;
    let [c, h, w] = dims;
    let d = image.data();
    Ok((0..n_bits)
        .map(|i| {
            let (y0, x0) = layout.cell_origin(i);
            let mut white = 0usize;
            let mut total = 0usize;
            for ch in 0..c {
                for y in y0..y0 + layout.patch_px {
                    for x in x0..x0 + layout.patch_px {
                        white += (d[(ch * h + y) * w + x] >= THRESHOLD) as usize;
                        total += 1;
                    }
                }
            }
            (2 * white >= total) as u8
        })
        .collect())
}

/// Splits `bits` into images of `per_image` bits each; the last chunk is zero-padded.
pub fn encode_chunks(bits: &[u8], per_image: usize, dims: [usize; 3]) -> Result<Vec<Tensor>> {
    if bits.is_empty() || per_image == 0 {
        return Err(Error::invalid("empty dot-code payload"));
    }
    bits.chunks(per_image)
        .map(|c| {
            let mut chunk = c.to_vec();
            chunk.resize(per_image, 0);
            dotcode_encode(&chunk, dims)
        })
        .collect()
}

/// Inverse of [`encode_chunks`] for a payload of `n_bits` bits.
pub fn decode_chunks(images: &[Tensor], per_image: usize, n_bits: usize) -> Result<Vec<u8>> {
    if n_bits == 0 || per_image == 0 {
        return Err(Error::invalid("empty dot-code payload"));
    }
    let want = n_bits.div_ceil(per_image);
    if images.len() != want {
        return Err(Error::invalid(format!("{n_bits} bits need {want} images, got {}", images.len())));
    }
    let mut bits = Vec::with_capacity(want * per_image);
    for img in images {
        bits.extend(dotcode_decode(img, per_image)?);
    }
    bits.truncate(n_bits);
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    use super::*;

    const MNIST: [usize; 3] = [1, 28, 28];

    #[test]
    fn thirty_six_bits_on_mnist() {
        let l = DotCodeLayout::new(36, MNIST).unwrap();
        assert_eq!((l.rows, l.cols, l.patch_px), (6, 6, 4));
        let img = dotcode_encode(&[1; 36], MNIST).unwrap();
        let d = img.data();
        // 24×24 white grid, 4 px black border right and bottom
        assert!((0..24).all(|y| (0..24).all(|x| d[y * 28 + x] == 1.0)));
        assert!((0..28).all(|y| (24..28).all(|x| d[y * 28 + x] == 0.0)));
        assert!((24..28).all(|y| (0..28).all(|x| d[y * 28 + x] == 0.0)));
    }

    #[test]
    fn non_square_counts_use_wider_grids() {
        let l = DotCodeLayout::new(10, MNIST).unwrap();
        assert_eq!((l.rows, l.cols, l.patch_px), (3, 4, 7));
        let l = DotCodeLayout::new(100, MNIST).unwrap();
        assert_eq!((l.rows, l.cols, l.patch_px), (10, 10, 2));
        assert!(DotCodeLayout::new(900, MNIST).is_err());
        assert!(DotCodeLayout::new(0, MNIST).is_err());
    }

    #[test]
    fn random_payloads_round_trip() {
        for seed in 0..100 {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let bits: Vec<u8> = (0..36).map(|_| rng.random_range(0..2)).collect();
            let img = dotcode_encode(&bits, MNIST).unwrap();
            assert_eq!(dotcode_decode(&img, 36).unwrap(), bits);
        }
    }

    #[test]
    fn salt_and_pepper_noise_is_absorbed() {
        for seed in 0..50 {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let bits: Vec<u8> = (0..36).map(|_| rng.random_range(0..2)).collect();
            let mut img = dotcode_encode(&bits, MNIST).unwrap();
            // each pixel becomes salt or pepper with probability 0.1
            for v in img.data_mut().iter_mut() {
                if rng.random_bool(0.1) {
                    *v = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
                }
            }
            assert_eq!(dotcode_decode(&img, 36).unwrap(), bits, "seed {seed}");
        }
    }

    #[test]
    fn tie_decodes_as_one() {
        let mut img = dotcode_encode(&[0; 4], [1, 4, 4]).unwrap();
        // patch 2×2 at top left: two white, two black
        img.data_mut()[0] = 1.0;
        img.data_mut()[1] = 1.0;
        assert_eq!(dotcode_decode(&img, 4).unwrap(), vec![1, 0, 0, 0]);
    }

    #[test]
    fn threshold_boundary() {
        let mut img = dotcode_encode(&[0], [1, 2, 2]).unwrap();
        img.data_mut().fill(0.53);
        assert_eq!(dotcode_decode(&img, 1).unwrap(), vec![1]);
        img.data_mut().fill(0.5299);
        assert_eq!(dotcode_decode(&img, 1).unwrap(), vec![0]);
    }

    #[test]
    fn chunked_payloads() {
        let bits: Vec<u8> = (0..250).map(|i| (i * 7 % 3 == 0) as u8).collect();
        let imgs = encode_chunks(&bits, BITS_PER_IMAGE, MNIST).unwrap();
        assert_eq!(imgs.len(), 3);
        assert_eq!(decode_chunks(&imgs, BITS_PER_IMAGE, 250).unwrap(), bits);
        // the padded tail decodes as zeros
        assert_eq!(dotcode_decode(&imgs[2], 100).unwrap()[50..], [0; 50]);
        assert!(encode_chunks(&[], BITS_PER_IMAGE, MNIST).is_err());
        assert!(decode_chunks(&imgs[..2], BITS_PER_IMAGE, 250).is_err());
        assert_eq!(encode_chunks(&bits[..36], 36, MNIST).unwrap().len(), 1);
    }
}
