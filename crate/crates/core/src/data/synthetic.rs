use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classes are thresholded Gaussian-blob masks, one distinct mask per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// `[C, H, W]`
    pub dims: [usize; 3],
    pub seed: u64,
}

const BLOBS: usize = 2;
const NOISE_STD: f64 = 0.15;
const MAX_OVERLAP: f64 = 0.5;

fn blob_mask(rng: &mut SplitMix64, h: usize, w: usize) -> Vec<bool> {
    let sigma = h.min(w) as f64 / 7.0;
    let centers: Vec<(f64, f64)> = (0..BLOBS)
        .map(|_| (rng.random_range(0.2..0.8) * h as f64, rng.random_range(0.2..0.8) * w as f64))
        .collect();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = centers
                .iter()
                .map(|&(cy, cx)| (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * sigma * sigma)).exp())
                .fold(0.0, f64::max);
            mask[y * w + x] = v > 0.5;
        }
    }
    mask
}

fn overlap(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Deterministic separable dataset: each sample is its class mask shifted by
/// up to one pixel with additive Gaussian noise, clamped to `[0, 1]`.
pub fn make_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let [c, h, w] = spec.dims;
    if h < 8 || w < 8 || c == 0 {
        return Err(Error::invalid(format!("synthetic images need at least 8×8, got {:?}", spec.dims)));
    }
    if spec.n_classes == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one class"));
    }
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let mut masks: Vec<Vec<bool>> = Vec::new();
    while masks.len() < spec.n_classes {
        let mut attempts = 0;
        let m = loop {
            let m = blob_mask(&mut rng, h, w);
            attempts += 1;
            if masks.iter().all(|o| overlap(o, &m) < MAX_OVERLAP) || attempts > 200 {
                break m;
            }
        };
        masks.push(m);
    }
    // Test samples come from a different noise stream over the same masks.
    let mut rng = SplitMix64::seed_from_u64(spec.seed ^ if split == Split::Test { 0x7e57 } else { 0x7a1 });
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let n = spec.n_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.n_classes;
        let (dy, dx) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
        for _ in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    let on = sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 && masks[class][(sy as usize) * w + sx as usize];
                    let base = if on { 1.0 } else { 0.0 };
                    data.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data), labels, spec.n_classes, split, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec { n_classes: 10, samples_per_class: 100, dims: [1, 16, 16], seed: 9 }
    }

    #[test]
    fn sizes_and_determinism() {
        let a = make_synthetic(&spec(), Split::Train).unwrap();
        let b = make_synthetic(&spec(), Split::Train).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.images.data(), b.images.data());
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_small_is_rejected() {
        let mut s = spec();
        s.dims = [1, 4, 4];
        assert!(make_synthetic(&s, Split::Train).is_err());
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let train = make_synthetic(&spec(), Split::Train).unwrap();
        let test = make_synthetic(&spec(), Split::Test).unwrap();
        let d = 16 * 16;
        let mut centroids = vec![vec![0.0f64; d]; 10];
        for i in 0..train.len() {
            for (c, &v) in centroids[train.labels[i]].iter_mut().zip(train.images.row(i)) {
                *c += v as f64 / 100.0;
            }
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.images.row(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(x).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(x).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == test.labels[i]
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.8, "{correct}");
    }
}
