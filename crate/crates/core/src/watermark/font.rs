//! Built-in 5×7 bitmap font and text secrets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

// Rows top to bottom, bit 4 is the leftmost column.
fn glyph(c: char) -> Option<[u8; 7]> {
    let g = match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        ' ' => [0; 7],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '!' => [0x04, 0x04, 0x04, 0x04, 0x04, 0x00, 0x04],
        '?' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
        _ => return None,
    };
    Some(g)
}

/// Whether `c` (case-insensitive) has a glyph.
pub fn is_renderable(c: char) -> bool {
    glyph(c.to_ascii_uppercase()).is_some()
}

/// Renders `text` as black glyphs (0.0) on white (1.0), centered and scaled
/// by the largest integer factor that fits. `\n` starts a new line.
/// Every channel of a multi-channel image gets the same pixels.
pub fn render_text(text: &str, dims: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = dims;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("empty secret dims {dims:?}")));
    }
    let mut img = vec![1.0f32; h * w];
    let lines: Vec<Vec<[u8; 7]>> = text
        .lines()
        .map(|l| {
            l.chars()
                .map(|ch| glyph(ch.to_ascii_uppercase()).ok_or_else(|| Error::Unsupported(format!("no glyph for {ch:?}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let cols = lines.iter().map(|l| l.len()).max().unwrap_or(0);
    if cols > 0 {
        let tw = cols * (GLYPH_W + 1) - 1;
        let th = lines.len() * (GLYPH_H + 1) - 1;
        let scale = (w / tw).min(h / th);
        if scale == 0 {
            return Err(Error::invalid(format!("{text:?} needs {tw}×{th} px, secret is {w}×{h}")));
        }
        let x0 = (w - tw * scale) / 2;
        let y0 = (h - th * scale) / 2;
        for (li, line) in lines.iter().enumerate() {
            for (gi, g) in line.iter().enumerate() {
                for (r, bits) in g.iter().enumerate() {
                    for col in 0..GLYPH_W {
                        if bits >> (GLYPH_W - 1 - col) & 1 == 0 {
                            continue;
                        }
                        let gx = x0 + (gi * (GLYPH_W + 1) + col) * scale;
                        let gy = y0 + (li * (GLYPH_H + 1) + r) * scale;
                        for dy in 0..scale {
                            for dx in 0..scale {
                                img[(gy + dy) * w + gx + dx] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
    let data = (0..c).flat_map(|_| img.iter().copied()).collect();
    Ok(Tensor::from_vec(&[c, h, w], data))
}

/// Eleven distinct four-character strings used as default secrets.
pub const DEFAULT_TEXTS: [&str; 11] = [
    "ABCD", "EFGH", "IJKL", "MNOP", "QRST", "UVWX", "YZ12", "3456", "7890", "WXYZ", "HKMN",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abcd_has_both_colors() {
        let t = render_text("ABCD", [1, 28, 28]).unwrap();
        assert!(t.data().contains(&0.0));
        assert!(t.data().contains(&1.0));
        assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn empty_text_is_white() {
        let t = render_text("", [1, 28, 28]).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic() {
        let a = render_text("HKMN", [1, 28, 28]).unwrap();
        let b = render_text("HKMN", [1, 28, 28]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn unsupported_glyph_and_overflow() {
        assert!(matches!(render_text("A~", [1, 28, 28]), Err(Error::Unsupported(_))));
        assert!(render_text("ABCDEFGHIJ", [1, 28, 28]).is_err());
    }

    #[test]
    fn single_glyph_scales_and_centers() {
        // 'I' at scale 4: 20×28 box centered in 28×28
        let t = render_text("I", [1, 28, 28]).unwrap();
        let px = |x: usize, y: usize| t.data()[y * 28 + x];
        assert_eq!(px(4 + 4, 0), 0.0);
        assert_eq!(px(4 + 8, 27), 0.0);
        assert_eq!(px(0, 0), 1.0);
        let black = t.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(black, (3 + 5 + 3) * 16);
    }

    #[test]
    fn rgb_channels_match() {
        let t = render_text("AB", [3, 16, 16]).unwrap();
        assert_eq!(t.data()[..256], t.data()[256..512]);
        assert_eq!(t.data()[..256], t.data()[512..]);
    }

    #[test]
    fn default_texts_are_distinct_and_fit() {
        let mut seen = std::collections::HashSet::new();
        for s in DEFAULT_TEXTS {
            assert!(seen.insert(s));
            render_text(s, [1, 28, 28]).unwrap();
        }
    }
}
