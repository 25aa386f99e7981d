//! Binary PGM ("P5") and PPM ("P6") images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `1×H×W` or `H×W` image as PGM, or a `3×H×W` image as PPM.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match *s {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(Error::shape("netpbm", format!("expected 1×H×W or 3×H×W, got {s:?}"))),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

fn header_fields(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    // magic, width, height, maxval separated by whitespace, comments allowed
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { format: "netpbm", offset: pos, msg: "truncated header".into() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte before the raster
    if pos >= bytes.len() {
        return Err(Error::Format { format: "netpbm", offset: pos, msg: "missing raster".into() });
    }
    Ok((fields, pos + 1))
}

/// Decodes P5 into `1×H×W` or P6 into `3×H×W`, values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (f, start) = header_fields(bytes)?;
    let c = match f[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format { format: "netpbm", offset: 0, msg: format!("unsupported magic {m:?}") }),
    };
    let num = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format { format: "netpbm", offset: 0, msg: format!("bad number {s:?}") })
    };
    let (w, h, max) = (num(&f[1])?, num(&f[2])?, num(&f[3])?);
    if max != 255 {
        return Err(Error::Format { format: "netpbm", offset: 0, msg: format!("only maxval 255 supported, got {max}") });
    }
    let raster = &bytes[start..];
    let plane = w * h;
    if raster.len() != plane * c {
        return Err(Error::Format {
            format: "netpbm",
            offset: start + raster.len().min(plane * c),
            msg: format!("expected {} raster bytes, found {}", plane * c, raster.len()),
        });
    }
    let mut data = vec![0.0f32; plane * c];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = raster[p * c + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[c, h, w], data))
}

pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if image.rank() == 3 && image.shape()[0] != 1 {
        return Err(Error::shape("write_pgm", format!("single channel expected, got {:?}", image.shape())));
    }
    fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let t = decode(&fs::read(path)?)?;
    if t.shape()[0] != 1 {
        return Err(Error::Format { format: "netpbm", offset: 0, msg: "expected a P5 image".into() });
    }
    Ok(t)
}

/// Writes PGM or PPM depending on the channel count.
pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Places `C×H×W` images side by side with a one-pixel white gap.
pub fn hstack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (c, h, w) = match *first.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("hstack", format!("expected C×H×W, got {s:?}"))),
    };
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::shape("hstack", "images differ in shape"));
    }
    let n = images.len();
    let total_w = n * w + (n - 1);
    let mut out = vec![1.0f32; c * h * total_w];
    for (k, img) in images.iter().enumerate() {
        let d = img.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * total_w + k * (w + 1) + x] = d[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[c, h, total_w], out))
}

/// Stacks equally wide `C×H×W` images vertically with a one-pixel white gap.
pub fn vstack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (c, w) = match *first.shape() {
        [c, _, w] => (c, w),
        ref s => return Err(Error::shape("vstack", format!("expected C×H×W, got {s:?}"))),
    };
    if images.iter().any(|i| i.rank() != 3 || i.shape()[0] != c || i.shape()[2] != w) {
        return Err(Error::shape("vstack", "images differ in channels or width"));
    }
    let total_h: usize = images.iter().map(|i| i.shape()[1]).sum::<usize>() + images.len() - 1;
    let mut out = vec![1.0f32; c * total_h * w];
    let mut y0 = 0;
    for img in images {
        let h = img.shape()[1];
        for ch in 0..c {
            for y in 0..h {
                let src = &img.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                out[(ch * total_h + y0 + y) * w..(ch * total_h + y0 + y + 1) * w].copy_from_slice(src);
            }
        }
        y0 += h + 1;
    }
    Ok(Tensor::from_vec(&[c, total_h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_length() {
        let bytes = encode(&Tensor::zeros(&[1, 28, 28])).unwrap();
        assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(bytes.len(), 13 + 784);
        assert!(bytes[13..].iter().all(|&b| b == 0));
    }

    #[test]
    fn round_trip_within_quantization() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let img = Tensor::from_vec(&[1, 3, 4], data);
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0);
    }

    #[test]
    fn ppm_round_trip_keeps_channel_order() {
        let mut data = vec![0.0f32; 3 * 4];
        data[..4].fill(1.0);
        let img = Tensor::from_vec(&[3, 2, 2], data);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(decode(&bytes).unwrap().data(), img.data());
    }

    #[test]
    fn malformed_headers_fail() {
        assert!(decode(b"P2\n2 2\n255\n0000").is_err());
        assert!(decode(b"P5\n2 2\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n000").is_err());
        assert!(decode(b"P5\n# c\n1 1\n255\n\x80").is_ok());
    }

    #[test]
    fn stacking_shapes() {
        let a = Tensor::zeros(&[1, 2, 3]);
        assert_eq!(hstack(&[a.clone(), a.clone()]).unwrap().shape(), &[1, 2, 7]);
        assert_eq!(vstack(&[a.clone(), a]).unwrap().shape(), &[1, 5, 3]);
    }
}
