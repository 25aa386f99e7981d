//! Watermark keys and their text file format.
//!
//! A keys file holds one key per line as comma- or whitespace-separated
//! floats. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys live in this closed interval.
pub const KEY_RANGE: (f32, f32) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkKey {
    vector: Vec<f32>,
    seed: Option<u64>,
}

impl WatermarkKey {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::invalid("empty watermark key"));
        }
        if let Some(v) = vector.iter().find(|v| !(KEY_RANGE.0..=KEY_RANGE.1).contains(*v)) {
            return Err(Error::invalid(format!("key value {v} outside [{}, {}]", KEY_RANGE.0, KEY_RANGE.1)));
        }
        Ok(WatermarkKey { vector, seed: None })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn width(&self) -> usize {
        self.vector.len()
    }

    /// Seed the key was drawn with, if it was generated.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// `n` keys of `width` i.i.d. uniform values in `[lo, hi]`.
pub fn generate_keys(n: usize, width: usize, lo: f32, hi: f32, seed: u64) -> Result<Vec<WatermarkKey>> {
    if n == 0 || width == 0 {
        return Err(Error::invalid("need at least one key of non-zero width"));
    }
    if !(lo < hi) || lo < KEY_RANGE.0 || hi > KEY_RANGE.1 {
        return Err(Error::invalid(format!("key range [{lo}, {hi}] must be increasing and inside [-10, 10]")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(lo, hi).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..n)
        .map(|_| WatermarkKey {
            vector: (0..width).map(|_| dist.sample(&mut rng)).collect(),
            seed: Some(seed),
        })
        .collect())
}

/// Stacks keys into an `N×width` batch.
pub fn keys_tensor(keys: &[WatermarkKey]) -> Result<Tensor> {
    let width = keys.first().ok_or_else(|| Error::invalid("no keys"))?.width();
    if keys.iter().any(|k| k.width() != width) {
        return Err(Error::invalid("keys differ in width"));
    }
    Ok(Tensor::from_vec(&[keys.len(), width], keys.iter().flat_map(|k| k.vector.iter().copied()).collect()))
}

pub fn parse_keys(text: &str) -> Result<Vec<WatermarkKey>> {
    let mut keys = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vector = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|e| Error::invalid(format!("keys line {}: {s:?}: {e}", ln + 1))))
            .collect::<Result<Vec<_>>>()?;
        keys.push(WatermarkKey::new(vector).map_err(|e| Error::invalid(format!("keys line {}: {e}", ln + 1)))?);
    }
    keys_tensor(&keys)?;
    Ok(keys)
}

pub fn format_keys(keys: &[WatermarkKey]) -> String {
    let mut out = String::new();
    for k in keys {
        let row: Vec<String> = k.vector.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(", "));
    }
    out
}

pub fn load_keys(path: impl AsRef<Path>) -> Result<Vec<WatermarkKey>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_keys(&text)
}

pub fn save_keys(keys: &[WatermarkKey], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_keys(keys)).map_err(|e| Error::io_at(path, e))
}
