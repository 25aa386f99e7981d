use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format { format: "idx", offset, msg: "truncated header".into() })
}

/// Parses an IDX3 image file into `N×1×H×W` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format { format: "idx", offset: 0, msg: format!("expected image magic 0x803, found {magic:#x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = n * h * w;
    if body.len() != need {
        return Err(Error::Format {
            format: "idx",
            offset: 16 + body.len().min(need),
            msg: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[n, 1, h, w], data))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format { format: "idx", offset: 0, msg: format!("expected label magic 0x801, found {magic:#x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            format: "idx",
            offset: 8 + body.len().min(n),
            msg: format!("expected {n} labels, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&fs::read(labels_path.as_ref())?)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, classes, split, "idx")
}
