//! Box masks, pseudo-label state and cross-modal label fusion.
//!
//! All masks live at prediction resolution. For one image the adaptation
//! step works with
//!
//! - `ŷ_V`, `ŷ_T`: accumulated visible/thermal pseudo positives,
//! - `ȳ_V = ȳ_T = ŷ_V ∩ ŷ_T`: labels for the supervision heads,
//! - `ȳ_M = ŷ_V ∪ ŷ_T`: labels for the fused head,
//! - `I_V = (I \ ŷ_V) ∪ ȳ_V` and `I_T = (I \ ŷ_s) ∪ ȳ_T`: the pixels each
//!   supervision head is trained on, where `ŷ_s` is selected by
//!   [`ThermalSetSubtrahend`].

mod boxes;
mod grid;
mod rle;

pub use boxes::{boxes_to_mask, read_annotation, write_annotation, BoxAnnotation, BoxRect};
pub use grid::{BinaryGrid, PixelMask, PixelSet};
pub use rle::{load_pseudo_states, parse_pseudo_states, render_pseudo_states, save_pseudo_states};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which pseudo set is removed from `I` when forming the thermal pixel set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ThermalSetSubtrahend {
    /// Subtract the visible pseudo positives.
    #[default]
    Visible,
    /// Subtract the thermal pseudo positives, mirroring the visible set.
    Thermal,
}

impl fmt::Display for ThermalSetSubtrahend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThermalSetSubtrahend::Visible => "visible",
            ThermalSetSubtrahend::Thermal => "thermal",
        })
    }
}

impl FromStr for ThermalSetSubtrahend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "visible" => Ok(ThermalSetSubtrahend::Visible),
            "thermal" => Ok(ThermalSetSubtrahend::Thermal),
            other => Err(format!("expected visible or thermal, got {other:?}")),
        }
    }
}

/// Accumulated pseudo annotations for one target image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelState {
    pub image_id: String,
    pub visible: PixelMask,
    pub thermal: PixelMask,
    /// Number of updates applied so far.
    pub iteration: usize,
    /// Value of `iteration` after the last update that added a positive.
    pub last_update: usize,
}

impl PseudoLabelState {
    pub fn empty(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            image_id: image_id.into(),
            visible: PixelMask::zeros(height, width),
            thermal: PixelMask::zeros(height, width),
            iteration: 0,
            last_update: 0,
        }
    }

    pub fn from_masks(
        image_id: impl Into<String>,
        visible: PixelMask,
        thermal: PixelMask,
    ) -> Result<Self> {
        visible.ensure_same_dims(&thermal)?;
        Ok(Self {
            image_id: image_id.into(),
            visible,
            thermal,
            iteration: 0,
            last_update: 0,
        })
    }

    pub fn height(&self) -> usize {
        self.visible.height()
    }

    pub fn width(&self) -> usize {
        self.visible.width()
    }
}

/// Pixels whose probability reaches `tau`.
///
/// Minimising per-pixel cross-entropy over binary labels marks exactly the
/// pixels with `p > 0.5`; restricting to `p >= tau` with `tau > 0.5` keeps
/// only the confident ones.
pub fn select_pseudo_positives(pred_map: &Tensor, tau: f64) -> Result<PixelMask> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(Error::Config(format!(
            "confidence threshold must lie in (0.5, 1), got {tau}"
        )));
    }
    let (c, h, w) = pred_map.dims3()?;
    if c != 1 {
        return Err(Error::InvalidInput(format!(
            "expected a single-channel map, got {c} channels"
        )));
    }
    Ok(PixelMask::from_bits(
        h,
        w,
        pred_map.data().iter().map(|&p| p >= tau).collect(),
    ))
}

/// Unions freshly selected positives into the state and advances its counter.
pub fn update_pseudo_annotations(
    state: &mut PseudoLabelState,
    new_visible: &PixelMask,
    new_thermal: &PixelMask,
) -> Result<()> {
    state.visible.ensure_same_dims(new_visible)?;
    state.thermal.ensure_same_dims(new_thermal)?;
    let visible = state.visible.union(new_visible);
    let thermal = state.thermal.union(new_thermal);
    state.iteration += 1;
    if visible != state.visible || thermal != state.thermal {
        state.last_update = state.iteration;
    }
    state.visible = visible;
    state.thermal = thermal;
    Ok(())
}

/// Similarity fusion: both supervision heads get `ŷ_V ∩ ŷ_T`.
pub fn fuse_similarity(state: &PseudoLabelState) -> (PixelMask, PixelMask) {
    let both = state.visible.intersection(&state.thermal);
    (both.clone(), both)
}

/// Complementarity fusion: the fused head gets `ŷ_V ∪ ŷ_T`.
pub fn fuse_complementarity(state: &PseudoLabelState) -> PixelMask {
    state.visible.union(&state.thermal)
}

/// `(I_V, I_T)`: unconfirmed pseudo positives are removed from the
/// supervised pixels, confirmed ones are kept.
pub fn training_pixel_sets(
    state: &PseudoLabelState,
    full: &PixelSet,
    subtrahend: ThermalSetSubtrahend,
) -> Result<(PixelSet, PixelSet)> {
    full.ensure_same_dims(&state.visible)?;
    let (fused_v, fused_t) = fuse_similarity(state);
    let visible = full.difference(&state.visible).union(&fused_v);
    let thermal_removed = match subtrahend {
        ThermalSetSubtrahend::Visible => &state.visible,
        ThermalSetSubtrahend::Thermal => &state.thermal,
    };
    let thermal = full.difference(thermal_removed).union(&fused_t);
    Ok((visible, thermal))
}

/// Clears 4-connected positive components smaller than `min_size` pixels.
pub fn remove_small_components(mask: &PixelMask, min_size: usize) -> PixelMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = mask.clone();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        component.clear();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (y, x) = (i / w, i % w);
            let neighbours = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for n in neighbours.into_iter().flatten() {
                if !seen[n] && mask.bits()[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        if component.len() < min_size {
            for &i in &component {
                out.set_index(i, false);
            }
        }
    }
    out
}
