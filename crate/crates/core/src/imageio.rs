//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image in `[0, 1]` (values are clamped).
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::InvalidArgument(format!("PPM needs a [3, H, W] image, got {s:?}"))),
    };
    let d = img.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Encodes `h × w` gray levels given row-major.
pub fn encode_pgm(pixels: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if pixels.len() != h * w {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            len: pixels.len(),
        });
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses `P5`/`P6` with maxval 255; returns `(channels, h, w, samples)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |why: &str| Error::Corrupt(format!("PNM: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != channels * h * w {
        return Err(bad("payload length does not match the header"));
    }
    Ok((channels, h, w, body.to_vec()))
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn write_pgm(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    fs::write(path, encode_pgm(pixels, h, w)?)?;
    Ok(())
}
