//! Masked binary cross-entropy and the three-branch detection objectives.

use std::fmt;
use std::str::FromStr;

use crate::detector::{HeadGrads, Prediction};
use crate::error::{Error, Result};
use crate::labels::{
    fuse_complementarity, fuse_similarity, training_pixel_sets, PixelMask, PixelSet,
    PseudoLabelState, ThermalSetSubtrahend,
};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside the logs.
pub const PROB_FLOOR: f64 = 1e-7;

/// Whether the optimiser sees the summed loss or the per-pixel mean of each branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    Sum,
    Mean,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Sum => "sum",
            Normalization::Mean => "mean",
        })
    }
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "mean" => Ok(Normalization::Mean),
            other => Err(format!(
                "unknown loss normalization {other:?} (expected sum or mean)"
            )),
        }
    }
}

/// Summed cross-entropy over `pixels`, and its gradient with respect to `pred`.
///
/// Inside the clamp range the gradient is exact; outside it is evaluated at
/// the clamped probability so saturated pixels keep a bounded signal.
pub fn cross_entropy(
    pred: &Tensor,
    labels: &PixelMask,
    pixels: &PixelSet,
) -> Result<(f64, Tensor)> {
    let (c, h, w) = pred.dims3()?;
    if c != 1 || labels.height() != h || labels.width() != w {
        return Err(Error::InvalidInput(format!(
            "prediction {:?} does not match {}x{} labels",
            pred.shape(),
            labels.height(),
            labels.width()
        )));
    }
    labels.ensure_same_dims(pixels)?;
    let mut grad = Tensor::zeros(pred.shape());
    if pixels.count() == 0 {
        log::debug!("cross-entropy over an empty pixel set");
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let g = grad.data_mut();
    for (i, &p) in pred.data().iter().enumerate() {
        if !pixels.bits()[i] {
            continue;
        }
        let y = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        if labels.bits()[i] {
            loss -= y.ln();
            g[i] = -1.0 / y;
        } else {
            loss -= (1.0 - y).ln();
            g[i] = 1.0 / (1.0 - y);
        }
    }
    Ok((loss, grad))
}

/// Per-branch summed losses and the number of supervised pixels behind each.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub multispectral: f64,
    pub visible: f64,
    pub thermal: f64,
    pub pixels: [usize; 3],
}

impl LossReport {
    fn from_branches(branches: [(f64, usize); 3]) -> Self {
        let [(m, nm), (v, nv), (t, nt)] = branches;
        Self {
            total: m + v + t,
            multispectral: m,
            visible: v,
            thermal: t,
            pixels: [nm, nv, nt],
        }
    }

    /// Each branch divided by its pixel count, total re-summed.
    pub fn per_pixel(&self) -> LossReport {
        let mean = |loss: f64, n: usize| if n == 0 { 0.0 } else { loss / n as f64 };
        Self::from_branches([
            (mean(self.multispectral, self.pixels[0]), self.pixels[0]),
            (mean(self.visible, self.pixels[1]), self.pixels[1]),
            (mean(self.thermal, self.pixels[2]), self.pixels[2]),
        ])
    }

    /// The scalar the optimiser minimises under `norm`.
    pub fn objective(&self, norm: Normalization) -> f64 {
        match norm {
            Normalization::Sum => self.total,
            Normalization::Mean => self.per_pixel().total,
        }
    }

    /// Rescales summed-loss gradients to match [`Self::objective`].
    pub fn normalize_grads(&self, grads: &mut HeadGrads, norm: Normalization) {
        if norm == Normalization::Sum {
            return;
        }
        for (g, &n) in [
            &mut grads.multispectral,
            &mut grads.visible,
            &mut grads.thermal,
        ]
        .into_iter()
        .zip(&self.pixels)
        {
            if n > 0 {
                g.scale(1.0 / n as f64);
            }
        }
    }

    /// Sum of the three reports' fields.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.total += other.total;
        self.multispectral += other.multispectral;
        self.visible += other.visible;
        self.thermal += other.thermal;
        for (a, b) in self.pixels.iter_mut().zip(other.pixels) {
            *a += b;
        }
    }
}

fn three_branch(
    pred: &Prediction,
    branches: [(&PixelMask, &PixelSet); 3],
) -> Result<(LossReport, HeadGrads)> {
    let [(lm, im), (lv, iv), (lt, it)] = branches;
    let (m, gm) = cross_entropy(&pred.multispectral, lm, im)?;
    let (v, gv) = cross_entropy(&pred.visible, lv, iv)?;
    let (t, gt) = cross_entropy(&pred.thermal, lt, it)?;
    let report = LossReport::from_branches([(m, im.count()), (v, iv.count()), (t, it.count())]);
    Ok((
        report,
        HeadGrads {
            multispectral: gm,
            visible: gv,
            thermal: gt,
        },
    ))
}

/// Source objective: every head is trained on the same labels and pixels.
pub fn multi_detection_loss_source(
    pred: &Prediction,
    labels: &PixelMask,
    pixels: &PixelSet,
) -> Result<(LossReport, HeadGrads)> {
    three_branch(pred, [(labels, pixels), (labels, pixels), (labels, pixels)])
}

/// Adaptation objective with branch-specific labels and pixel sets.
#[allow(clippy::too_many_arguments)]
pub fn multi_detection_loss_adapt(
    pred: &Prediction,
    fused_labels: &PixelMask,
    visible_labels: &PixelMask,
    thermal_labels: &PixelMask,
    pixels: &PixelSet,
    visible_pixels: &PixelSet,
    thermal_pixels: &PixelSet,
) -> Result<(LossReport, HeadGrads)> {
    three_branch(
        pred,
        [
            (fused_labels, pixels),
            (visible_labels, visible_pixels),
            (thermal_labels, thermal_pixels),
        ],
    )
}

/// Labels and pixel sets derived from a pseudo-label state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptTargets {
    pub fused_labels: PixelMask,
    pub visible_labels: PixelMask,
    pub thermal_labels: PixelMask,
    pub pixels: PixelSet,
    pub visible_pixels: PixelSet,
    pub thermal_pixels: PixelSet,
}

impl AdaptTargets {
    pub fn from_state(state: &PseudoLabelState, subtrahend: ThermalSetSubtrahend) -> Result<Self> {
        let pixels = PixelSet::full(state.height(), state.width());
        let (visible_labels, thermal_labels) = fuse_similarity(state);
        let fused_labels = fuse_complementarity(state);
        let (visible_pixels, thermal_pixels) = training_pixel_sets(state, &pixels, subtrahend)?;
        Ok(Self {
            fused_labels,
            visible_labels,
            thermal_labels,
            pixels,
            visible_pixels,
            thermal_pixels,
        })
    }

    pub fn loss(&self, pred: &Prediction) -> Result<(LossReport, HeadGrads)> {
        multi_detection_loss_adapt(
            pred,
            &self.fused_labels,
            &self.visible_labels,
            &self.thermal_labels,
            &self.pixels,
            &self.visible_pixels,
            &self.thermal_pixels,
        )
    }
}
