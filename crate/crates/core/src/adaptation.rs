//! Source training and the iterative target adaptation loop.
//!
//! Adaptation alternates two phases per iteration:
//!
//! 1. with the parameters frozen, every target image is run forward and the
//!    confident visible/thermal pixels are unioned into its pseudo-label state;
//! 2. the fused labels and training pixel sets derived from those states drive
//!    a few epochs of clipped SGD over the target images.
//!
//! Phase 1 only ever borrows the parameters immutably; the parameter
//! fingerprint before and after it is recorded in the history as evidence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{join_list, KvMap, KvSection};
use crate::data::{derive_seed, Dataset, ImagePair};
use crate::detector::{
    backward, forward, forward_with_cache, init_detector, ArchConfig, DetectorParams,
};
use crate::error::{Error, Result};
use crate::eval::dataset_ap;
use crate::labels::{
    boxes_to_mask, remove_small_components, select_pseudo_positives, update_pseudo_annotations,
    PixelMask, PixelSet, PseudoLabelState, ThermalSetSubtrahend,
};
use crate::losses::{multi_detection_loss_source, AdaptTargets, LossReport, Normalization};
use crate::tensor::{clip_gradients, sgd_step};

/// Epoch stages for source training; stage `i` runs `epochs[i]` epochs at `learning_rates[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSchedule {
    pub epochs: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub clip_norm: f64,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for SourceSchedule {
    fn default() -> Self {
        Self {
            epochs: vec![40, 10],
            learning_rates: vec![5e-3, 5e-4],
            clip_norm: 10.0,
            seed: 0,
            normalization: Normalization::Sum,
        }
    }
}

impl SourceSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.len() != self.learning_rates.len() {
            return Err(Error::Config(format!(
                "source schedule has {} epoch stages but {} learning rates",
                self.epochs.len(),
                self.learning_rates.len()
            )));
        }
        if let Some(lr) = self
            .learning_rates
            .iter()
            .find(|lr| !(**lr > 0.0 && lr.is_finite()))
        {
            return Err(Error::Config(format!(
                "source learning rate must be positive, got {lr}"
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }

    /// Keeps the stage structure but sets the epoch count of the first stage
    /// to `epochs` and drops the rest; zero clears every stage.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = vec![epochs];
        self.learning_rates.truncate(1);
        self
    }
}

impl KvSection for SourceSchedule {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        out.set(format!("{prefix}epochs"), join_list(&self.epochs));
        out.set(
            format!("{prefix}learning_rates"),
            join_list(&self.learning_rates),
        );
        out.set(format!("{prefix}clip_norm"), self.clip_norm);
        out.set(format!("{prefix}seed"), self.seed);
        out.set(format!("{prefix}normalization"), self.normalization);
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        kv.take_list(&format!("{prefix}epochs"), &mut self.epochs)?;
        kv.take_list(&format!("{prefix}learning_rates"), &mut self.learning_rates)?;
        kv.take(&format!("{prefix}clip_norm"), &mut self.clip_norm)?;
        kv.take(&format!("{prefix}seed"), &mut self.seed)?;
        kv.take(&format!("{prefix}normalization"), &mut self.normalization)?;
        Ok(())
    }
}

/// Image visiting order for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        epoch as u64,
    )));
    order
}

/// Box masks at prediction resolution for every image; errors on the first unlabeled one.
pub fn source_labels(dataset: &Dataset, arch: &ArchConfig) -> Result<Vec<PixelMask>> {
    dataset
        .iter()
        .map(|pair| {
            let ann = pair.annotation.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("source image {} has no annotation", pair.id()))
            })?;
            let (ph, pw) = arch.prediction_size(pair.height(), pair.width())?;
            boxes_to_mask(ann, pair.height(), pair.width(), ph, pw)
        })
        .collect()
}

/// One clipped SGD step on a single image. Returns the summed-loss report.
fn train_step<F>(
    params: &mut DetectorParams,
    pair: &ImagePair,
    lr: f64,
    clip_norm: f64,
    norm: Normalization,
    loss: F,
) -> Result<LossReport>
where
    F: FnOnce(&crate::detector::Prediction) -> Result<(LossReport, crate::detector::HeadGrads)>,
{
    let cache = forward_with_cache(params, pair)?;
    let (report, mut head_grads) = loss(cache.prediction())?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", report.total)));
    }
    report.normalize_grads(&mut head_grads, norm);
    let mut grads = backward(params, &cache, &head_grads)?;
    clip_gradients(&mut grads, clip_norm)?;
    sgd_step(params, &mut grads, lr)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceRun {
    pub params: DetectorParams,
    /// Per-pixel mean loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Trains a freshly initialised detector (seeded by `arch.init_seed`) on `dataset`.
pub fn train_source(
    dataset: &Dataset,
    arch: &ArchConfig,
    schedule: &SourceSchedule,
) -> Result<SourceRun> {
    let params = init_detector(arch, arch.init_seed)?;
    train_source_from(params, dataset, schedule)
}

pub fn train_source_from(
    mut params: DetectorParams,
    dataset: &Dataset,
    schedule: &SourceSchedule,
) -> Result<SourceRun> {
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    let labels = source_labels(dataset, params.arch())?;
    let pixel_sets: Vec<PixelSet> = labels
        .iter()
        .map(|l| PixelSet::full(l.height(), l.width()))
        .collect();
    let mut losses = Vec::with_capacity(schedule.total_epochs() * dataset.len());
    let mut epoch = 0;
    for (&stage_epochs, &lr) in schedule.epochs.iter().zip(&schedule.learning_rates) {
        for _ in 0..stage_epochs {
            for i in epoch_order(dataset.len(), schedule.seed, epoch) {
                let step = losses.len();
                let report = train_step(
                    &mut params,
                    &dataset.pairs[i],
                    lr,
                    schedule.clip_norm,
                    schedule.normalization,
                    |pred| multi_detection_loss_source(pred, &labels[i], &pixel_sets[i]),
                )
                .map_err(|e| {
                    Error::Numeric(format!(
                        "source training step {step} (image {}): {e}",
                        dataset.pairs[i].id()
                    ))
                })?;
                losses.push(report.per_pixel().total);
            }
            log::info!(
                "source epoch {epoch}: mean loss {:.5}",
                losses[losses.len() - dataset.len()..].iter().sum::<f64>() / dataset.len() as f64
            );
            epoch += 1;
        }
    }
    Ok(SourceRun { params, losses })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Confidence threshold at the first and last iteration, linearly interpolated.
    pub tau_start: f64,
    pub tau_end: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eq7_subtrahend: ThermalSetSubtrahend,
    pub normalization: Normalization,
    /// Connected pseudo-positive regions smaller than this are discarded; 0 keeps all.
    pub min_component: usize,
    /// Write pseudo-label checkpoints every this many iterations; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            epochs: 1,
            lr: 5e-4,
            tau_start: 0.8,
            tau_end: 0.8,
            clip_norm: 10.0,
            seed: 0,
            eq7_subtrahend: ThermalSetSubtrahend::Visible,
            normalization: Normalization::Sum,
            min_component: 0,
            checkpoint_every: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(
                "adaptation needs at least one iteration".into(),
            ));
        }
        for tau in [self.tau_start, self.tau_end] {
            if !(tau > 0.5 && tau < 1.0) {
                return Err(Error::Config(format!(
                    "confidence threshold must lie in (0.5, 1), got {tau}"
                )));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    pub fn tau_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.tau_start;
        }
        let t = iteration as f64 / (self.iterations - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }

    pub fn is_checkpoint_iteration(&self, iteration: usize) -> bool {
        iteration + 1 == self.iterations
            || (self.checkpoint_every > 0 && (iteration + 1).is_multiple_of(self.checkpoint_every))
    }
}

impl KvSection for AdaptConfig {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        out.set(format!("{prefix}iterations"), self.iterations);
        out.set(format!("{prefix}epochs"), self.epochs);
        out.set(format!("{prefix}lr"), self.lr);
        out.set(format!("{prefix}tau_start"), self.tau_start);
        out.set(format!("{prefix}tau_end"), self.tau_end);
        out.set(format!("{prefix}clip_norm"), self.clip_norm);
        out.set(format!("{prefix}seed"), self.seed);
        out.set(format!("{prefix}eq7_subtrahend"), self.eq7_subtrahend);
        out.set(format!("{prefix}normalization"), self.normalization);
        out.set(format!("{prefix}min_component"), self.min_component);
        out.set(format!("{prefix}checkpoint_every"), self.checkpoint_every);
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        kv.take(&format!("{prefix}iterations"), &mut self.iterations)?;
        kv.take(&format!("{prefix}epochs"), &mut self.epochs)?;
        kv.take(&format!("{prefix}lr"), &mut self.lr)?;
        kv.take(&format!("{prefix}tau_start"), &mut self.tau_start)?;
        kv.take(&format!("{prefix}tau_end"), &mut self.tau_end)?;
        kv.take(&format!("{prefix}clip_norm"), &mut self.clip_norm)?;
        kv.take(&format!("{prefix}seed"), &mut self.seed)?;
        kv.take(&format!("{prefix}eq7_subtrahend"), &mut self.eq7_subtrahend)?;
        kv.take(&format!("{prefix}normalization"), &mut self.normalization)?;
        kv.take(&format!("{prefix}min_component"), &mut self.min_component)?;
        kv.take(
            &format!("{prefix}checkpoint_every"),
            &mut self.checkpoint_every,
        )?;
        Ok(())
    }
}

fn select_masks(
    params: &DetectorParams,
    pair: &ImagePair,
    tau: f64,
    min_component: usize,
) -> Result<(PixelMask, PixelMask)> {
    let pred = forward(params, pair)?;
    let mut visible = select_pseudo_positives(&pred.visible, tau)?;
    let mut thermal = select_pseudo_positives(&pred.thermal, tau)?;
    if min_component > 1 {
        visible = remove_small_components(&visible, min_component);
        thermal = remove_small_components(&thermal, min_component);
    }
    Ok((visible, thermal))
}

/// Initial pseudo-label states from the single-modality heads of `params`.
pub fn init_pseudo(
    params: &DetectorParams,
    dataset: &Dataset,
    tau: f64,
) -> Result<Vec<PseudoLabelState>> {
    init_pseudo_filtered(params, dataset, tau, 0)
}

fn init_pseudo_filtered(
    params: &DetectorParams,
    dataset: &Dataset,
    tau: f64,
    min_component: usize,
) -> Result<Vec<PseudoLabelState>> {
    dataset
        .iter()
        .map(|pair| {
            let (v, t) = select_masks(params, pair, tau, min_component)?;
            PseudoLabelState::from_masks(pair.id(), v, t)
        })
        .collect()
}

/// Summary of one completed adaptation iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub tau: f64,
    /// Per-pixel mean losses averaged over the iteration's steps.
    pub loss_total: f64,
    pub loss_multispectral: f64,
    pub loss_visible: f64,
    pub loss_thermal: f64,
    /// Pseudo-positive pixel totals over all target images after selection.
    pub pseudo_visible: usize,
    pub pseudo_thermal: usize,
    pub pseudo_fused: usize,
    pub hash_before_select: String,
    pub hash_after_select: String,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptRunState {
    pub params: DetectorParams,
    pub states: Vec<PseudoLabelState>,
    /// Completed iterations.
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

/// Progress notifications from [`adapt`].
pub enum AdaptEvent<'a> {
    Selected {
        iteration: usize,
        states: &'a [PseudoLabelState],
    },
    IterationDone {
        record: &'a IterationRecord,
        params: &'a DetectorParams,
        states: &'a [PseudoLabelState],
    },
}

/// An aborted run together with the last parameters and states that passed
/// every finiteness check.
#[derive(Debug, thiserror::Error)]
#[error("adaptation aborted in iteration {iteration}: {source}")]
pub struct AdaptFailure {
    pub iteration: usize,
    #[source]
    pub source: Error,
    pub last_good: Box<AdaptRunState>,
}

/// Runs the full adaptation loop starting from `source`.
///
/// `eval` (annotated target images) adds an AP column to the history.
pub fn adapt(
    source: &DetectorParams,
    target: &Dataset,
    cfg: &AdaptConfig,
    eval: Option<&Dataset>,
    observer: &mut dyn FnMut(AdaptEvent<'_>),
) -> std::result::Result<AdaptRunState, AdaptFailure> {
    let mut run = AdaptRunState {
        params: source.clone(),
        states: Vec::new(),
        iteration: 0,
        history: Vec::new(),
    };
    let fail = |run: &AdaptRunState, iteration, source| AdaptFailure {
        iteration,
        source,
        last_good: Box::new(run.clone()),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(&run, 0, e));
    }
    if target.is_empty() {
        return Err(fail(
            &run,
            0,
            Error::Config("target dataset is empty".into()),
        ));
    }

    for k in 0..cfg.iterations {
        match adapt_iteration(&mut run, target, cfg, eval, k, observer) {
            Ok(()) => {}
            Err(e) => return Err(fail(&run, k, e)),
        }
    }
    Ok(run)
}

fn adapt_iteration(
    run: &mut AdaptRunState,
    target: &Dataset,
    cfg: &AdaptConfig,
    eval: Option<&Dataset>,
    k: usize,
    observer: &mut dyn FnMut(AdaptEvent<'_>),
) -> Result<()> {
    let tau = cfg.tau_at(k);

    // Phase 1: selection with frozen parameters.
    let hash_before_select = run.params.fingerprint();
    let frozen: &DetectorParams = &run.params;
    if k == 0 {
        run.states = init_pseudo_filtered(frozen, target, tau, cfg.min_component)?;
    } else {
        for (state, pair) in run.states.iter_mut().zip(target.iter()) {
            let (v, t) = select_masks(frozen, pair, tau, cfg.min_component)?;
            update_pseudo_annotations(state, &v, &t)?;
        }
    }
    let hash_after_select = run.params.fingerprint();
    observer(AdaptEvent::Selected {
        iteration: k,
        states: &run.states,
    });

    // Phase 2: SGD on the fused objective.
    let targets = run
        .states
        .iter()
        .map(|s| AdaptTargets::from_state(s, cfg.eq7_subtrahend))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = LossReport::default();
    let mut steps = 0usize;
    for e in 0..cfg.epochs {
        for i in epoch_order(target.len(), cfg.seed, k * cfg.epochs + e) {
            let report = train_step(
                &mut run.params,
                &target.pairs[i],
                cfg.lr,
                cfg.clip_norm,
                cfg.normalization,
                |pred| targets[i].loss(pred),
            )
            .map_err(|err| {
                Error::Numeric(format!(
                    "step {steps} (image {}): {err}",
                    target.pairs[i].id()
                ))
            })?;
            sum.accumulate(&report.per_pixel());
            steps += 1;
        }
    }
    let mean = |v: f64| if steps == 0 { 0.0 } else { v / steps as f64 };
    let ap = match eval {
        Some(ds) => Some(dataset_ap(&run.params, ds)?),
        None => None,
    };
    let record = IterationRecord {
        iteration: k,
        tau,
        loss_total: mean(sum.total),
        loss_multispectral: mean(sum.multispectral),
        loss_visible: mean(sum.visible),
        loss_thermal: mean(sum.thermal),
        pseudo_visible: run.states.iter().map(|s| s.visible.count()).sum(),
        pseudo_thermal: run.states.iter().map(|s| s.thermal.count()).sum(),
        pseudo_fused: targets.iter().map(|t| t.fused_labels.count()).sum(),
        hash_before_select,
        hash_after_select,
        ap,
    };
    log::info!(
        "adapt iteration {k}: tau {tau:.3} loss {:.5} pseudo V/T/M {}/{}/{}{}",
        record.loss_total,
        record.pseudo_visible,
        record.pseudo_thermal,
        record.pseudo_fused,
        record
            .ap
            .map(|ap| format!(" AP {ap:.4}"))
            .unwrap_or_default()
    );
    run.history.push(record);
    run.iteration = k + 1;
    observer(AdaptEvent::IterationDone {
        record: run.history.last().expect("just pushed"),
        params: &run.params,
        states: &run.states,
    });
    Ok(())
}

const HISTORY_HEADER: &str = "iteration,tau,loss_total,loss_multispectral,loss_visible,loss_thermal,pseudo_visible,pseudo_thermal,pseudo_fused,hash_before_select,hash_after_select,ap";

pub fn render_history(history: &[IterationRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.tau,
            r.loss_total,
            r.loss_multispectral,
            r.loss_visible,
            r.loss_thermal,
            r.pseudo_visible,
            r.pseudo_thermal,
            r.pseudo_fused,
            r.hash_before_select,
            r.hash_after_select,
            r.ap.map(|ap| ap.to_string()).unwrap_or_default()
        );
    }
    out
}

pub fn parse_history(text: &str, origin: &Path) -> Result<Vec<IterationRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format(
            origin,
            "missing or unexpected history header",
        ));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad =
                |what: &str| Error::format(origin, format!("line {}: malformed {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(bad("row (expected 12 columns)"));
            }
            let int = |i: usize, what: &str| f[i].parse::<usize>().map_err(|_| bad(what));
            let real = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
            Ok(IterationRecord {
                iteration: int(0, "iteration")?,
                tau: real(1, "tau")?,
                loss_total: real(2, "loss_total")?,
                loss_multispectral: real(3, "loss_multispectral")?,
                loss_visible: real(4, "loss_visible")?,
                loss_thermal: real(5, "loss_thermal")?,
                pseudo_visible: int(6, "pseudo_visible")?,
                pseudo_thermal: int(7, "pseudo_thermal")?,
                pseudo_fused: int(8, "pseudo_fused")?,
                hash_before_select: f[9].to_string(),
                hash_after_select: f[10].to_string(),
                ap: if f[11].is_empty() {
                    None
                } else {
                    Some(real(11, "ap")?)
                },
            })
        })
        .collect()
}

pub fn emit_history(history: &[IterationRecord], path: &Path) -> Result<()> {
    std::fs::write(path, render_history(history)).map_err(|e| Error::io(path, e))
}

/// Per-step source losses as `step,loss` CSV.
pub fn render_source_losses(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::detector::DetectorParams;
    use crate::labels::BoxAnnotation;
    use crate::labels::BoxRect;
    use crate::tensor::{Parameterized, Tensor};

    fn arch() -> ArchConfig {
        ArchConfig {
            stream_channels: vec![4, 4],
            fusion_channels: 4,
            ..ArchConfig::default()
        }
    }

    /// A bright square in both modalities on a dark background.
    fn blob_pair(id: &str, size: usize) -> ImagePair {
        let mut v = vec![0.1; size * size];
        let (lo, hi) = (size / 4, size / 2 + size / 4);
        for y in lo..hi {
            for x in lo..hi {
                v[y * size + x] = 0.9;
            }
        }
        let t = Tensor::from_map(size, size, v).unwrap();
        let ann = BoxAnnotation::new(
            id,
            vec![BoxRect::new(lo as f64, lo as f64, (hi - lo) as f64, (hi - lo) as f64).unwrap()],
        );
        ImagePair::new(id, t.clone(), t)
            .unwrap()
            .with_annotation(ann)
    }

    fn small_synth(n: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            pedestrians: (1, 1),
            blob_width: (4.0, 6.0),
            blob_height: (6.0, 10.0),
            seed,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, n).unwrap()
    }

    /// Forces every head to output `p` regardless of input.
    fn constant_detector(p: f64) -> DetectorParams {
        let mut params = DetectorParams::zeros(&arch()).unwrap();
        let logit = (p / (1.0 - p)).ln();
        for head in [
            &mut params.head_multispectral,
            &mut params.head_visible,
            &mut params.head_thermal,
        ] {
            head.bias.data_mut()[0] = logit;
        }
        params
    }

    #[test]
    fn source_training_fits_a_separable_blob() {
        let ds = Dataset::new(vec![blob_pair("b", 16)]);
        let schedule = SourceSchedule {
            epochs: vec![200],
            learning_rates: vec![5e-3],
            ..SourceSchedule::default()
        };
        let run = train_source(&ds, &arch(), &schedule).unwrap();
        let first = run.losses[0];
        let last = *run.losses.last().unwrap();
        assert!(last <= 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let ds = small_synth(2, 1);
        let schedule = SourceSchedule::default().with_epochs(0);
        let run = train_source(&ds, &arch(), &schedule).unwrap();
        assert_eq!(
            run.params,
            init_detector(&arch(), arch().init_seed).unwrap()
        );
        assert!(run.losses.is_empty());
    }

    #[test]
    fn source_training_is_deterministic_and_validated() {
        let ds = small_synth(3, 2);
        let schedule = SourceSchedule::default().with_epochs(2);
        let a = train_source(&ds, &arch(), &schedule).unwrap();
        let b = train_source(&ds, &arch(), &schedule).unwrap();
        assert_eq!(a, b);

        assert!(train_source(&Dataset::default(), &arch(), &schedule).is_err());
        let mut unlabeled = ds.clone();
        unlabeled.pairs[1].annotation = None;
        let err = train_source(&unlabeled, &arch(), &schedule).unwrap_err();
        assert!(err.to_string().contains(unlabeled.pairs[1].id()), "{err}");
        let mismatched = SourceSchedule {
            epochs: vec![1, 1],
            learning_rates: vec![1e-3],
            ..SourceSchedule::default()
        };
        assert!(train_source(&ds, &arch(), &mismatched).is_err());
    }

    #[test]
    fn init_pseudo_saturation_cases() {
        let ds = small_synth(3, 3);
        let half = init_pseudo(&constant_detector(0.5), &ds, 0.8).unwrap();
        assert!(half
            .iter()
            .all(|s| s.visible.count() == 0 && s.thermal.count() == 0 && s.iteration == 0));
        let weak = init_pseudo(&constant_detector(0.9), &ds, 0.999).unwrap();
        assert!(weak.iter().all(|s| s.visible.count() == 0));
        let strong = init_pseudo(&constant_detector(0.9), &ds, 0.8).unwrap();
        assert!(strong.iter().all(|s| s.visible.count() == s.visible.len()));
    }

    #[test]
    fn init_pseudo_overlaps_blobs_after_source_training() {
        let ds = Dataset::new(vec![blob_pair("a", 16), blob_pair("b", 16)]);
        let schedule = SourceSchedule {
            epochs: vec![150],
            learning_rates: vec![5e-3],
            ..SourceSchedule::default()
        };
        let params = train_source(&ds, &arch(), &schedule).unwrap().params;
        let truth = source_labels(&ds, &arch()).unwrap();
        for (state, gt) in init_pseudo(&params, &ds, 0.8).unwrap().iter().zip(&truth) {
            for mask in [&state.visible, &state.thermal] {
                let inter = mask.intersection(gt).count() as f64;
                let union = mask.union(gt).count() as f64;
                assert!(inter / union >= 0.5, "IoU {}", inter / union);
            }
        }
    }

    #[test]
    fn degenerate_budget_populates_states_once() {
        let ds = small_synth(3, 4);
        let params = constant_detector(0.9);
        let cfg = AdaptConfig {
            iterations: 1,
            epochs: 0,
            ..AdaptConfig::default()
        };
        let run = adapt(&params, &ds, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(run.params, params);
        assert_eq!(run.history.len(), 1);
        assert!(run
            .states
            .iter()
            .all(|s| s.visible.count() == 64 && s.iteration == 0));
    }

    #[test]
    fn config_validation_and_schedule() {
        assert!(AdaptConfig {
            iterations: 0,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            tau_start: 0.5,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            tau_end: 1.0,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            lr: 0.0,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
        let cfg = AdaptConfig {
            iterations: 5,
            tau_start: 0.9,
            tau_end: 0.7,
            ..AdaptConfig::default()
        };
        assert_eq!(cfg.tau_at(0), 0.9);
        assert!((cfg.tau_at(2) - 0.8).abs() < 1e-15);
        assert_eq!(cfg.tau_at(4), 0.7);

        let mut kv = KvMap::new();
        cfg.write_kv("adapt.", &mut kv);
        let mut parsed = KvMap::parse(&kv.render()).unwrap();
        assert_eq!(AdaptConfig::from_kv("adapt.", &mut parsed).unwrap(), cfg);
        parsed.finish().unwrap();

        let s = SourceSchedule::default();
        let mut kv = KvMap::new();
        s.write_kv("source.", &mut kv);
        let mut parsed = KvMap::parse(&kv.render()).unwrap();
        assert_eq!(SourceSchedule::from_kv("source.", &mut parsed).unwrap(), s);
    }

    #[test]
    fn adaptation_is_deterministic_monotone_and_selection_is_read_only() {
        let source = small_synth(4, 5);
        let target = small_synth(4, 6);
        let schedule = SourceSchedule::default().with_epochs(3);
        let params = train_source(&source, &arch(), &schedule).unwrap().params;
        let cfg = AdaptConfig {
            iterations: 3,
            tau_start: 0.6,
            tau_end: 0.6,
            ..AdaptConfig::default()
        };
        let mut counts: Vec<Vec<(usize, usize)>> = Vec::new();
        let a = adapt(&params, &target, &cfg, Some(&target), &mut |ev| {
            if let AdaptEvent::Selected { states, .. } = ev {
                counts.push(
                    states
                        .iter()
                        .map(|s| (s.visible.count(), s.thermal.count()))
                        .collect(),
                );
            }
        })
        .unwrap();
        let b = adapt(&params, &target, &cfg, Some(&target), &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 3);
        for r in &a.history {
            assert_eq!(r.hash_before_select, r.hash_after_select);
            assert!(r.ap.is_some());
        }
        for w in counts.windows(2) {
            for (before, after) in w[0].iter().zip(&w[1]) {
                assert!(after.0 >= before.0 && after.1 >= before.1);
            }
        }
        assert_ne!(a.params, params);
    }

    #[test]
    fn empty_pseudo_states_equal_negative_only_fine_tuning() {
        let target = small_synth(3, 7);
        let params = init_detector(&arch(), 3).unwrap();
        let cfg = AdaptConfig {
            iterations: 2,
            epochs: 2,
            tau_start: 0.999_999,
            tau_end: 0.999_999,
            ..AdaptConfig::default()
        };
        let run = adapt(&params, &target, &cfg, None, &mut |_| {}).unwrap();
        assert!(run
            .states
            .iter()
            .all(|s| s.visible.count() == 0 && s.thermal.count() == 0));

        // Explicit negative-only fine-tune with the same visiting order.
        let mut manual = params.clone();
        for k in 0..cfg.iterations {
            for e in 0..cfg.epochs {
                for i in epoch_order(target.len(), cfg.seed, k * cfg.epochs + e) {
                    let pair = &target.pairs[i];
                    let (ph, pw) = arch().prediction_size(pair.height(), pair.width()).unwrap();
                    let none = PixelMask::zeros(ph, pw);
                    let all = PixelSet::full(ph, pw);
                    train_step(
                        &mut manual,
                        pair,
                        cfg.lr,
                        cfg.clip_norm,
                        cfg.normalization,
                        |pred| multi_detection_loss_source(pred, &none, &all),
                    )
                    .unwrap();
                }
            }
        }
        assert_eq!(run.params, manual);

        // Negative-only training can only push pedestrian pixels down.
        let truth = source_labels(&target, &arch()).unwrap();
        let blob_mean = |p: &DetectorParams| {
            let mut sum = 0.0;
            let mut n = 0.0;
            for (pair, gt) in target.iter().zip(&truth) {
                let pred = forward(p, pair).unwrap();
                for (v, &b) in pred.multispectral.data().iter().zip(gt.bits()) {
                    if b {
                        sum += v;
                        n += 1.0;
                    }
                }
            }
            sum / n
        };
        assert!(blob_mean(&run.params) <= blob_mean(&params));
    }

    #[test]
    fn numeric_failure_keeps_last_good_state() {
        let target = small_synth(2, 8);
        let mut params = init_detector(&arch(), 0).unwrap();
        params.parameters_mut()[0].data_mut()[0] = f64::NAN;
        let err = adapt(&params, &target, &AdaptConfig::default(), None, &mut |_| {}).unwrap_err();
        assert_eq!(err.iteration, 0);
        assert_eq!(err.last_good.iteration, 0);
        assert!(err.to_string().contains("iteration 0"));
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        emit_history(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);

        let record = |k: usize, ap: Option<f64>| IterationRecord {
            iteration: k,
            tau: 0.8,
            loss_total: 0.1 + 0.2 * k as f64,
            loss_multispectral: 1.0 / 3.0,
            loss_visible: 2.0f64.sqrt(),
            loss_thermal: 1e-17,
            pseudo_visible: 10 * k,
            pseudo_thermal: 7,
            pseudo_fused: 12,
            hash_before_select: "ab12".into(),
            hash_after_select: "ab12".into(),
            ap,
        };
        let history = vec![
            record(0, None),
            record(1, Some(0.75)),
            record(2, Some(0.123456789)),
        ];
        emit_history(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(parse_history(&text, &path).unwrap(), history);
        assert!(parse_history("nope\n", &path).is_err());
    }
}
