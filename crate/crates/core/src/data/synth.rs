//! Deterministic synthetic visible/thermal scenes with a controllable domain shift.
//!
//! Each scene is a textured background with a few soft-edged elliptical
//! "pedestrians". In thermal they are always brighter than the background;
//! in visible their contrast is configurable. Every image is quantised to
//! 8 bits so that writing and re-reading a dataset is lossless.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pgm::quantize;
use super::{Dataset, ImagePair};
use crate::config::{KvMap, KvSection};
use crate::error::{Error, Result};
use crate::labels::{BoxAnnotation, BoxRect};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Modality {
    #[default]
    Visible,
    Thermal,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visible => "visible",
            Modality::Thermal => "thermal",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "visible" => Ok(Modality::Visible),
            "thermal" => Ok(Modality::Thermal),
            other => Err(format!(
                "unknown modality {other:?} (expected visible or thermal)"
            )),
        }
    }
}

/// Appearance changes between the source and target domains.
///
/// Brightness and contrast act on the visible channel only. The noise
/// multiplier scales sensor noise in both channels. Dropout makes a
/// pedestrian faint in `dropout_modality` with probability `dropout_prob`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub brightness: f64,
    pub contrast_scale: f64,
    pub noise_scale: f64,
    pub dropout_prob: f64,
    pub dropout_modality: Modality,
    /// Fraction of the normal contrast left on a dropped-out pedestrian.
    pub faint_factor: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast_scale: 1.0,
            noise_scale: 1.0,
            dropout_prob: 0.0,
            dropout_modality: Modality::Visible,
            faint_factor: 0.1,
        }
    }

    /// The reference source-to-target shift used by the benchmark.
    pub fn reference() -> Self {
        Self {
            brightness: -0.15,
            contrast_scale: 0.8,
            noise_scale: 2.0,
            dropout_prob: 0.3,
            ..Self::none()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0
            && self.contrast_scale == 1.0
            && self.noise_scale == 1.0
            && self.dropout_prob == 0.0
    }

    /// Applies `other` on top of `self`.
    pub fn then(&self, other: &DomainShift) -> DomainShift {
        if self.is_identity() {
            return other.clone();
        }
        if other.is_identity() {
            return self.clone();
        }
        DomainShift {
            brightness: self.brightness * other.contrast_scale + other.brightness,
            contrast_scale: self.contrast_scale * other.contrast_scale,
            noise_scale: self.noise_scale * other.noise_scale,
            dropout_prob: 1.0 - (1.0 - self.dropout_prob) * (1.0 - other.dropout_prob),
            dropout_modality: other.dropout_modality,
            faint_factor: other.faint_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.brightness,
            self.contrast_scale,
            self.noise_scale,
            self.faint_factor,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("domain shift knobs must be finite".into()));
        }
        if self.contrast_scale < 0.0 || self.noise_scale < 0.0 {
            return Err(Error::Config(
                "contrast and noise scales must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) || !(0.0..=1.0).contains(&self.faint_factor) {
            return Err(Error::Config(
                "dropout probability and faint factor must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::none()
    }
}

impl KvSection for DomainShift {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        out.set(format!("{prefix}brightness"), self.brightness);
        out.set(format!("{prefix}contrast_scale"), self.contrast_scale);
        out.set(format!("{prefix}noise_scale"), self.noise_scale);
        out.set(format!("{prefix}dropout_prob"), self.dropout_prob);
        out.set(format!("{prefix}dropout_modality"), self.dropout_modality);
        out.set(format!("{prefix}faint_factor"), self.faint_factor);
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        kv.take(&format!("{prefix}brightness"), &mut self.brightness)?;
        kv.take(&format!("{prefix}contrast_scale"), &mut self.contrast_scale)?;
        kv.take(&format!("{prefix}noise_scale"), &mut self.noise_scale)?;
        kv.take(&format!("{prefix}dropout_prob"), &mut self.dropout_prob)?;
        kv.take(
            &format!("{prefix}dropout_modality"),
            &mut self.dropout_modality,
        )?;
        kv.take(&format!("{prefix}faint_factor"), &mut self.faint_factor)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of pedestrians per image.
    pub pedestrians: (usize, usize),
    /// Inclusive range of blob widths in pixels.
    pub blob_width: (f64, f64),
    pub blob_height: (f64, f64),
    pub visible_background: f64,
    pub thermal_background: f64,
    /// Pedestrian minus background intensity.
    pub visible_contrast: f64,
    pub thermal_contrast: f64,
    pub visible_texture: f64,
    pub thermal_texture: f64,
    pub visible_noise: f64,
    pub thermal_noise: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            pedestrians: (1, 3),
            blob_width: (5.0, 9.0),
            blob_height: (12.0, 22.0),
            visible_background: 0.5,
            thermal_background: 0.25,
            visible_contrast: 0.3,
            thermal_contrast: 0.25,
            visible_texture: 0.02,
            thermal_texture: 0.05,
            visible_noise: 0.02,
            thermal_noise: 0.02,
            shift: DomainShift::none(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.height < 2 || self.width < 2 {
            return bad("image must be at least 2x2");
        }
        if self.pedestrians.0 > self.pedestrians.1 {
            return bad("pedestrian count range is empty");
        }
        for (name, (lo, hi), limit) in [
            ("blob width", self.blob_width, self.width),
            ("blob height", self.blob_height, self.height),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 1.0 || lo > hi {
                return bad(&format!("{name} range must satisfy 1 <= lo <= hi"));
            }
            if hi > limit as f64 {
                return bad(&format!("{name} up to {hi} does not fit the image"));
            }
        }
        let levels = [
            self.visible_background,
            self.thermal_background,
            self.visible_contrast,
            self.thermal_contrast,
            self.visible_texture,
            self.thermal_texture,
            self.visible_noise,
            self.thermal_noise,
        ];
        if !levels.iter().all(|v| v.is_finite()) {
            return bad("intensity parameters must be finite");
        }
        if self.visible_noise < 0.0
            || self.thermal_noise < 0.0
            || self.visible_texture < 0.0
            || self.thermal_texture < 0.0
        {
            return bad("noise and texture amplitudes must be non-negative");
        }
        if self.thermal_contrast <= 0.0 {
            return bad("thermal contrast must be positive");
        }
        self.shift.validate()
    }
}

impl KvSection for SynthConfig {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        out.set(format!("{prefix}height"), self.height);
        out.set(format!("{prefix}width"), self.width);
        out.set(format!("{prefix}pedestrians_min"), self.pedestrians.0);
        out.set(format!("{prefix}pedestrians_max"), self.pedestrians.1);
        out.set(format!("{prefix}blob_width_min"), self.blob_width.0);
        out.set(format!("{prefix}blob_width_max"), self.blob_width.1);
        out.set(format!("{prefix}blob_height_min"), self.blob_height.0);
        out.set(format!("{prefix}blob_height_max"), self.blob_height.1);
        out.set(
            format!("{prefix}visible_background"),
            self.visible_background,
        );
        out.set(
            format!("{prefix}thermal_background"),
            self.thermal_background,
        );
        out.set(format!("{prefix}visible_contrast"), self.visible_contrast);
        out.set(format!("{prefix}thermal_contrast"), self.thermal_contrast);
        out.set(format!("{prefix}visible_texture"), self.visible_texture);
        out.set(format!("{prefix}thermal_texture"), self.thermal_texture);
        out.set(format!("{prefix}visible_noise"), self.visible_noise);
        out.set(format!("{prefix}thermal_noise"), self.thermal_noise);
        out.set(format!("{prefix}seed"), self.seed);
        self.shift.write_kv(&format!("{prefix}shift."), out);
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        kv.take(&format!("{prefix}height"), &mut self.height)?;
        kv.take(&format!("{prefix}width"), &mut self.width)?;
        kv.take(&format!("{prefix}pedestrians_min"), &mut self.pedestrians.0)?;
        kv.take(&format!("{prefix}pedestrians_max"), &mut self.pedestrians.1)?;
        kv.take(&format!("{prefix}blob_width_min"), &mut self.blob_width.0)?;
        kv.take(&format!("{prefix}blob_width_max"), &mut self.blob_width.1)?;
        kv.take(&format!("{prefix}blob_height_min"), &mut self.blob_height.0)?;
        kv.take(&format!("{prefix}blob_height_max"), &mut self.blob_height.1)?;
        kv.take(
            &format!("{prefix}visible_background"),
            &mut self.visible_background,
        )?;
        kv.take(
            &format!("{prefix}thermal_background"),
            &mut self.thermal_background,
        )?;
        kv.take(
            &format!("{prefix}visible_contrast"),
            &mut self.visible_contrast,
        )?;
        kv.take(
            &format!("{prefix}thermal_contrast"),
            &mut self.thermal_contrast,
        )?;
        kv.take(
            &format!("{prefix}visible_texture"),
            &mut self.visible_texture,
        )?;
        kv.take(
            &format!("{prefix}thermal_texture"),
            &mut self.thermal_texture,
        )?;
        kv.take(&format!("{prefix}visible_noise"), &mut self.visible_noise)?;
        kv.take(&format!("{prefix}thermal_noise"), &mut self.thermal_noise)?;
        kv.take(&format!("{prefix}seed"), &mut self.seed)?;
        self.shift.take_kv(&format!("{prefix}shift."), kv)
    }
}

/// SplitMix64 finaliser over `(seed, stream)`; used to give every image and
/// every split its own independent RNG stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Source is `base` unchanged; target is `base` with `shift` applied on top.
pub fn make_shift_pair(base: &SynthConfig, shift: &DomainShift) -> (SynthConfig, SynthConfig) {
    let mut target = base.clone();
    target.shift = base.shift.then(shift);
    (base.clone(), target)
}

struct Pedestrian {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    faint: bool,
}

/// Profile values below this are treated as background, so every pixel in a
/// box's outer row and column is visibly part of the blob.
const MIN_WEIGHT: f64 = 0.05;

/// Flat top out to 90% of the radius, cosine roll-off to zero at the rim.
fn blob_profile(r: f64) -> f64 {
    const FLAT: f64 = 0.9;
    if r <= FLAT {
        1.0
    } else if r < 1.0 {
        0.5 * (1.0 + (std::f64::consts::PI * (r - FLAT) / (1.0 - FLAT)).cos())
    } else {
        0.0
    }
}

struct Texture {
    terms: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let terms = (0..3)
            .map(|_| {
                let freq = rng.random_range(0.05..0.35);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (freq * angle.cos(), freq * angle.sin(), phase)
            })
            .collect();
        Self { terms }
    }

    /// Roughly unit-amplitude value at `(y, x)`.
    fn at(&self, y: f64, x: f64) -> f64 {
        let n = self.terms.len() as f64;
        self.terms
            .iter()
            .map(|&(fx, fy, p)| (fx * x + fy * y + p).sin())
            .sum::<f64>()
            / n.sqrt()
    }
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let (h, w) = (cfg.height, cfg.width);
    let shift = &cfg.shift;

    let count = rng.random_range(cfg.pedestrians.0..=cfg.pedestrians.1);
    let mut peds = Vec::with_capacity(count);
    for _ in 0..count {
        let bw = rng.random_range(cfg.blob_width.0..=cfg.blob_width.1);
        let bh = rng.random_range(cfg.blob_height.0..=cfg.blob_height.1);
        let (rx, ry) = (bw / 2.0, bh / 2.0);
        let cx = rng.random_range(rx..=w as f64 - rx);
        let cy = rng.random_range(ry..=h as f64 - ry);
        let faint = rng.random::<f64>() < shift.dropout_prob;
        peds.push(Pedestrian {
            cx,
            cy,
            rx,
            ry,
            faint,
        });
    }
    let vis_tex = Texture::sample(&mut rng);
    let th_tex = Texture::sample(&mut rng);

    let vis_noise = Normal::new(0.0, cfg.visible_noise * shift.noise_scale)
        .map_err(|e| Error::Config(format!("visible noise: {e}")))?;
    let th_noise = Normal::new(0.0, cfg.thermal_noise * shift.noise_scale)
        .map_err(|e| Error::Config(format!("thermal noise: {e}")))?;

    let contrast_for = |p: &Pedestrian, modality: Modality, base: f64| {
        if p.faint && shift.dropout_modality == modality {
            base * shift.faint_factor
        } else {
            base
        }
    };

    let mut visible = Vec::with_capacity(h * w);
    let mut thermal = Vec::with_capacity(h * w);
    let mut box_extent: Vec<Option<(usize, usize, usize, usize)>> = vec![None; peds.len()];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v_fg: f64 = 0.0;
            let mut t_fg: f64 = 0.0;
            for (k, p) in peds.iter().enumerate() {
                let r = (((px - p.cx) / p.rx).powi(2) + ((py - p.cy) / p.ry).powi(2)).sqrt();
                let weight = blob_profile(r);
                if weight < MIN_WEIGHT {
                    continue;
                }
                let ext = box_extent[k].get_or_insert((y, y, x, x));
                ext.0 = ext.0.min(y);
                ext.1 = ext.1.max(y);
                ext.2 = ext.2.min(x);
                ext.3 = ext.3.max(x);
                let vc = weight * contrast_for(p, Modality::Visible, cfg.visible_contrast);
                if vc.abs() > v_fg.abs() {
                    v_fg = vc;
                }
                t_fg = t_fg.max(weight * contrast_for(p, Modality::Thermal, cfg.thermal_contrast));
            }
            let v_clean = cfg.visible_background + cfg.visible_texture * vis_tex.at(py, px) + v_fg;
            let v_shifted = cfg.visible_background
                + shift.brightness
                + shift.contrast_scale * (v_clean - cfg.visible_background);
            let t_clean = cfg.thermal_background + cfg.thermal_texture * th_tex.at(py, px) + t_fg;
            visible.push(f64::from(quantize(v_shifted + vis_noise.sample(&mut rng))) / 255.0);
            thermal.push(f64::from(quantize(t_clean + th_noise.sample(&mut rng))) / 255.0);
        }
    }

    let id = format!("img{index:04}");
    let boxes = box_extent
        .into_iter()
        .flatten()
        .map(|(y0, y1, x0, x1)| {
            BoxRect::new(
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pair = ImagePair::new(
        id.clone(),
        Tensor::from_map(h, w, visible)?,
        Tensor::from_map(h, w, thermal)?,
    )?;
    Ok(pair.with_annotation(BoxAnnotation::new(id, boxes)))
}

/// Generates `n` annotated pairs from `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    (0..n)
        .map(|i| generate_one(cfg, i))
        .collect::<Result<Vec<_>>>()
        .map(Dataset::new)
}

/// Sizes of the three benchmark splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub source: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source: 40,
            target_train: 40,
            target_test: 20,
        }
    }
}

impl KvSection for SplitSizes {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        out.set(format!("{prefix}source"), self.source);
        out.set(format!("{prefix}target_train"), self.target_train);
        out.set(format!("{prefix}target_test"), self.target_test);
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        kv.take(&format!("{prefix}source"), &mut self.source)?;
        kv.take(&format!("{prefix}target_train"), &mut self.target_train)?;
        kv.take(&format!("{prefix}target_test"), &mut self.target_test)?;
        Ok(())
    }
}

/// Labelled source images plus target train/test images of a shift pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Generates the three splits, each from its own seed derived from `base.seed`.
pub fn generate_benchmark(
    base: &SynthConfig,
    shift: &DomainShift,
    sizes: SplitSizes,
) -> Result<Benchmark> {
    let (source, target) = make_shift_pair(base, shift);
    let split = |cfg: &SynthConfig, stream: u64, n: usize| {
        let cfg = SynthConfig {
            seed: derive_seed(base.seed, stream),
            ..cfg.clone()
        };
        generate_synthetic(&cfg, n)
    };
    Ok(Benchmark {
        source: split(&source, 0, sizes.source)?,
        target_train: split(&target, 1, sizes.target_train)?,
        target_test: split(&target, 2, sizes.target_test)?,
    })
}
