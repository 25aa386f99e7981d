use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records (label byte, then R, G and B planes of 32×32).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format {
            format: "cifar-10",
            offset: bytes.len() - bytes.len() % RECORD,
            msg: format!("size {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * (RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format { format: "cifar-10", offset: i * RECORD, msg: format!("label {} above 9", rec[0]) });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let (px, lb) = parse_cifar10(&fs::read(p.as_ref())?)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], pixels), labels, 10, split, "cifar10")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_planes_in_order() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 2048));
        let (px, lb) = parse_cifar10(&rec).unwrap();
        assert_eq!(lb, vec![7]);
        assert!(px[..1024].iter().all(|&v| v == 1.0));
        assert!(px[1024..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncated_batch_is_rejected() {
        let rec = vec![0u8; RECORD * 2 - 5];
        assert!(parse_cifar10(&rec).is_err());
    }

    #[test]
    fn loads_multiple_batches() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        fs::write(&a, vec![1u8; RECORD * 3]).unwrap();
        fs::write(&b, vec![2u8; RECORD]).unwrap();
        let ds = load_cifar10(&[a, b], Split::Train).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.images.shape(), &[4, 3, 32, 32]);
        assert_eq!(ds.labels, vec![1, 1, 1, 2]);
    }
}
