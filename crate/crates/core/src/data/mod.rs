//! Datasets and image files.

mod cifar;
mod idx;
pub mod netpbm;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use cifar::{load_cifar10, parse_cifar10};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images, `N×C×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split, source: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} images vs {} labels", images.shape()[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset { images, labels, classes, split, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `k` samples of every class, in original order.
    pub fn subset_per_class(&self, k: usize) -> Dataset {
        let mut seen = vec![0usize; self.classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                seen[c] += 1;
                seen[c] <= k
            })
            .collect();
        let (images, labels) = self.batch(&keep);
        Dataset { images, labels, classes: self.classes, split: self.split, source: self.source.clone() }
    }

    /// Samples whose label is below `classes`, relabelled to the smaller class count.
    pub fn restrict_classes(&self, classes: usize) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < classes).collect();
        let (images, labels) = self.batch(&keep);
        Dataset { images, labels, classes, split: self.split, source: self.source.clone() }
    }
}

/// Directory holding the MNIST IDX files: `$INKWM_MNIST_DIR`, else `data/mnist`
/// in the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("INKWM_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Loads an MNIST split from [`mnist_dir`].
pub fn load_mnist(split: Split) -> Result<Dataset> {
    let dir = mnist_dir();
    let (img, lbl) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let mut ds = load_idx(dir.join(img), dir.join(lbl), split)?;
    ds.source = "mnist".into();
    Ok(ds)
}
