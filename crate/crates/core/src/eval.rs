//! Pixel-level average precision, precision/recall export and heatmaps.
//!
//! Scores from every image are pooled before the threshold sweep. Pixels
//! with equal scores form one threshold group and enter the sweep together,
//! so the result does not depend on pixel order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::pgm::{write_pgm, Gray8};
use crate::data::{Dataset, ImagePair};
use crate::detector::{forward, upsample_prediction, DetectorParams};
use crate::error::{Error, Result};
use crate::labels::{boxes_to_mask, BoxAnnotation, PixelMask};
use crate::tensor::Tensor;

/// Precision and recall at every distinct score, highest threshold first.
#[derive(Clone, Debug, PartialEq)]
pub struct PRCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// AP over flat score/label arrays.
pub fn pixel_ap_flat(scores: &[f64], labels: &[bool]) -> Result<PRCurve> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = PRCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        ap: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut weighted = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let mut group_tp = 0;
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                group_tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += group_tp;
        let precision = tp as f64 / (tp + fp) as f64;
        weighted += group_tp as f64 * precision;
        curve.thresholds.push(threshold);
        curve.precision.push(precision);
        curve.recall.push(tp as f64 / positives as f64);
    }
    curve.ap = weighted / positives as f64;
    Ok(curve)
}

/// AP pooled over several score maps and their ground-truth masks.
pub fn pixel_ap(items: &[(&Tensor, &PixelMask)]) -> Result<PRCurve> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, gt) in items {
        let (c, h, w) = map.dims3()?;
        if c != 1 || gt.height() != h || gt.width() != w {
            return Err(Error::InvalidInput(format!(
                "score map {:?} does not match {}x{} ground truth",
                map.shape(),
                gt.height(),
                gt.width()
            )));
        }
        scores.extend_from_slice(map.data());
        labels.extend_from_slice(gt.bits());
    }
    pixel_ap_flat(&scores, &labels)
}

/// Writes `map` as an 8-bit PGM with `round(255 p)` per pixel.
pub fn emit_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = map.dims3()?;
    if c != 1 {
        return Err(Error::InvalidInput(format!(
            "heatmap needs one channel, got {c}"
        )));
    }
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!(
            "heatmap value {v} outside [0, 1]"
        )));
    }
    write_pgm(&Gray8::from_unit(h, w, map.data()), path)
}

/// Max box score over every pixel whose centre lies in the box, 0 elsewhere.
pub fn boxes_to_heatmap(ann: &BoxAnnotation, scores: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if scores.len() != ann.boxes.len() {
        return Err(Error::InvalidInput(format!(
            "{} boxes but {} scores",
            ann.boxes.len(),
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("box score {s} outside [0, 1]")));
    }
    let mut out = vec![0.0f64; h * w];
    for (b, &score) in ann.boxes.iter().zip(scores) {
        let single = BoxAnnotation::new(ann.image_id.clone(), vec![*b]);
        let mask = boxes_to_mask(&single, h, w, h, w)?;
        for (o, &inside) in out.iter_mut().zip(mask.bits()) {
            if inside {
                *o = o.max(score);
            }
        }
    }
    Tensor::from_map(h, w, out)
}

pub fn render_pr_csv(curve: &PRCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for i in 0..curve.thresholds.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            curve.thresholds[i], curve.precision[i], curve.recall[i]
        );
    }
    let _ = writeln!(out, "AP,{}", curve.ap);
    out
}

pub fn parse_pr_csv(text: &str, origin: &Path) -> Result<PRCurve> {
    let bad = |msg: String| Error::format(origin, msg);
    let mut lines = text.lines();
    if lines.next() != Some("threshold,precision,recall") {
        return Err(bad("missing `threshold,precision,recall` header".into()));
    }
    let mut curve = PRCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        ap: f64::NAN,
    };
    let mut saw_ap = false;
    for (n, line) in lines.enumerate() {
        if saw_ap {
            return Err(bad(format!("line {}: content after AP line", n + 2)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| bad(format!("line {}: {e}", n + 2)))
        };
        match line.split(',').collect::<Vec<_>>()[..] {
            ["AP", ap] => {
                curve.ap = num(ap)?;
                saw_ap = true;
            }
            [t, p, r] => {
                curve.thresholds.push(num(t)?);
                curve.precision.push(num(p)?);
                curve.recall.push(num(r)?);
            }
            _ => return Err(bad(format!("line {}: expected three columns", n + 2))),
        }
    }
    if !saw_ap {
        return Err(bad("missing final AP line".into()));
    }
    Ok(curve)
}

/// CSV with columns `threshold,precision,recall` and a final `AP,<value>` line.
pub fn emit_pr_csv(curve: &PRCurve, path: &Path) -> Result<()> {
    if curve.thresholds.is_empty() {
        return Err(Error::InvalidInput(
            "precision/recall curve is empty".into(),
        ));
    }
    std::fs::write(path, render_pr_csv(curve)).map_err(|e| Error::io(path, e))
}

/// Full-resolution fused-head probabilities and box masks for one image.
pub fn score_image(params: &DetectorParams, pair: &ImagePair) -> Result<(Tensor, PixelMask)> {
    let ann = pair.annotation.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "image {} has no annotation to evaluate against",
            pair.id()
        ))
    })?;
    let (h, w) = (pair.height(), pair.width());
    let pred = upsample_prediction(&forward(params, pair)?, h, w)?;
    let gt = boxes_to_mask(ann, h, w, h, w)?;
    Ok((pred.multispectral, gt))
}

/// Dataset-level result: pooled curve, AP per tag and the score map of every image.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub curve: PRCurve,
    /// `None` when a tag has no positive pixels.
    pub per_tag: BTreeMap<String, Option<f64>>,
    pub heatmaps: Vec<(String, Tensor)>,
}

impl EvalReport {
    /// `AP=<value>` followed by ` AP[<tag>]=<value>` for each tag.
    pub fn summary(&self) -> String {
        let mut line = format!("AP={}", self.curve.ap);
        for (tag, ap) in &self.per_tag {
            match ap {
                Some(ap) => {
                    let _ = write!(line, " AP[{tag}]={ap}");
                }
                None => {
                    let _ = write!(line, " AP[{tag}]=undefined");
                }
            }
        }
        line
    }
}

pub fn evaluate(params: &DetectorParams, dataset: &Dataset) -> Result<EvalReport> {
    let mut scored = Vec::with_capacity(dataset.len());
    for pair in dataset.iter() {
        scored.push(score_image(params, pair)?);
    }
    let items: Vec<(&Tensor, &PixelMask)> = scored.iter().map(|(s, g)| (s, g)).collect();
    let curve = pixel_ap(&items)?;

    let mut per_tag = BTreeMap::new();
    for tag in dataset.tags() {
        let subset: Vec<(&Tensor, &PixelMask)> = dataset
            .iter()
            .zip(&items)
            .filter(|(p, _)| p.tag.as_deref() == Some(tag))
            .map(|(_, &item)| item)
            .collect();
        let ap = match pixel_ap(&subset) {
            Ok(c) => Some(c.ap),
            Err(Error::UndefinedAp) => None,
            Err(e) => return Err(e),
        };
        per_tag.insert(tag.to_string(), ap);
    }
    let heatmaps = dataset
        .iter()
        .zip(scored)
        .map(|(p, (s, _))| (p.id().to_string(), s))
        .collect();
    Ok(EvalReport {
        curve,
        per_tag,
        heatmaps,
    })
}

/// Pooled AP of the fused head only.
pub fn dataset_ap(params: &DetectorParams, dataset: &Dataset) -> Result<f64> {
    let scored = dataset
        .iter()
        .map(|p| score_image(params, p))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&Tensor, &PixelMask)> = scored.iter().map(|(s, g)| (s, g)).collect();
    Ok(pixel_ap(&items)?.ap)
}
