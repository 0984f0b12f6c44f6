//! Bounding boxes, annotation files and box-level segmentation masks.

use std::fmt::Write as _;
use std::path::Path;

use super::PixelMask;
use crate::error::{Error, Result};

/// Axis-aligned box in full-resolution pixel units, covering `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxRect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 1.0 || h < 1.0 {
            return Err(Error::InvalidInput(format!(
                "box ({x}, {y}, {w}, {h}) must be finite with width and height at least 1"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    /// Intersection with the image, or `None` if it is empty.
    pub fn clamp(&self, image_h: usize, image_w: usize) -> Option<BoxRect> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(image_w as f64);
        let y1 = (self.y + self.h).min(image_h as f64);
        (x1 > x0 && y1 > y0).then_some(BoxRect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// All boxes of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub boxes: Vec<BoxRect>,
}

impl BoxAnnotation {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BoxRect>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes,
        }
    }

    /// One `x y w h` line per box.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.boxes {
            let _ = writeln!(out, "{} {} {} {}", b.x, b.y, b.w, b.h);
        }
        out
    }

    pub fn parse(image_id: &str, text: &str, origin: &Path) -> Result<Self> {
        let mut boxes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| Error::format(origin, format!("line {}: {e}", lineno + 1)))?;
            let [x, y, w, h] = fields[..] else {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected `x y w h`, got {line:?}", lineno + 1),
                ));
            };
            boxes.push(
                BoxRect::new(x, y, w, h)
                    .map_err(|e| Error::format(origin, format!("line {}: {e}", lineno + 1)))?,
            );
        }
        Ok(Self::new(image_id, boxes))
    }
}

pub fn read_annotation(path: &Path, image_id: &str) -> Result<BoxAnnotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BoxAnnotation::parse(image_id, &text, path)
}

pub fn write_annotation(ann: &BoxAnnotation, path: &Path) -> Result<()> {
    std::fs::write(path, ann.render()).map_err(|e| Error::io(path, e))
}

/// Marks every prediction cell whose centre, mapped back to image
/// coordinates, falls inside a box.
pub fn boxes_to_mask(
    ann: &BoxAnnotation,
    image_h: usize,
    image_w: usize,
    pred_h: usize,
    pred_w: usize,
) -> Result<PixelMask> {
    if pred_h == 0
        || pred_w == 0
        || !image_h.is_multiple_of(pred_h)
        || !image_w.is_multiple_of(pred_w)
    {
        return Err(Error::InvalidInput(format!(
            "prediction grid {pred_h}x{pred_w} does not evenly divide image {image_h}x{image_w}"
        )));
    }
    let sy = (image_h / pred_h) as f64;
    let sx = (image_w / pred_w) as f64;
    let mut mask = PixelMask::zeros(pred_h, pred_w);
    for b in &ann.boxes {
        let Some(b) = b.clamp(image_h, image_w) else {
            log::warn!(
                "{}: box {b:?} lies outside the {image_h}x{image_w} image, ignored",
                ann.image_id
            );
            continue;
        };
        // Only scan cells whose centres can fall inside the box.
        let y_lo = ((b.y / sy - 0.5).floor().max(0.0)) as usize;
        let y_hi = (((b.y + b.h) / sy).ceil() as usize).min(pred_h);
        let x_lo = ((b.x / sx - 0.5).floor().max(0.0)) as usize;
        let x_hi = (((b.x + b.w) / sx).ceil() as usize).min(pred_w);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                if b.contains((px as f64 + 0.5) * sx, (py as f64 + 0.5) * sy) {
                    mask.set(py, px, true);
                }
            }
        }
    }
    Ok(mask)
}
