//! Binary PGM (P5) reading and writing, 8-bit samples only.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    /// Quantises values in `[0, 1]` to `round(255 * v)`.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Self {
        Self {
            width,
            height,
            pixels: values.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a P5 image. `maxval` may be anything up to 255; samples are
/// rescaled to the full 0..=255 range when it is smaller.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Gray8, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err("not a binary PGM (expected P5 magic)".into());
    }
    let mut number = |name: &str| -> std::result::Result<usize, String> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("malformed {name} in header"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (need 1..=255)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("raster truncated: need {n} bytes"))?;
    if bytes.len() > pos + n {
        return Err("trailing bytes after raster".into());
    }
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&p| ((usize::from(p.min(maxval as u8)) * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(Gray8 {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Gray8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn write_pgm(img: &Gray8, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
