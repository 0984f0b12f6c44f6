//! Command-line entry points.
//!
//! Every command reads an optional `key = value` config file, applies flag
//! overrides on top, and writes the fully resolved result to
//! `<out>/resolved.cfg`. Passing that file back with `--config` (and a new
//! `--out`) reproduces the run's checkpoints and CSVs byte for byte.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adaptation::{
    adapt, emit_history, render_source_losses, train_source, AdaptConfig, AdaptEvent,
    SourceSchedule,
};
use crate::config::{KvMap, KvSection};
use crate::data::{
    generate_benchmark, load_dataset, save_dataset, DomainShift, SplitSizes, SynthConfig,
};
use crate::detector::{load_checkpoint, save_checkpoint, ArchConfig};
use crate::error::{Error, Result};
use crate::eval::{emit_heatmap, emit_pr_csv, evaluate, EvalReport};
use crate::labels::{save_pseudo_states, ThermalSetSubtrahend};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Debug, Parser)]
#[command(
    name = "umda",
    version,
    about = "Visible/thermal pedestrian detection with unsupervised domain adaptation"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source, target-train and target-test datasets.
    Synth(CommonArgs),
    /// Train a detector on an annotated source dataset.
    TrainSource(TrainArgs),
    /// Adapt a source checkpoint to an unannotated target dataset.
    Adapt(AdaptArgs),
    /// Pixel AP, precision/recall CSV and heatmaps on an annotated dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for data generation, initialisation and visiting order.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Annotated dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Replace the schedule with a single stage of this many epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate for every stage.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Target dataset directory; annotations, if any, are ignored.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Source detector checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Annotated dataset scored after every iteration.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Epochs per iteration.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Confidence threshold for every iteration.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, value_parser = parse_subtrahend)]
    pub eq7_subtrahend: Option<ThermalSetSubtrahend>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Annotated dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_subtrahend(s: &str) -> std::result::Result<ThermalSetSubtrahend, String> {
    s.parse()
}

/// Paths a command reads; stored in the resolved config as absolute paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl KvSection for Inputs {
    fn write_kv(&self, prefix: &str, out: &mut KvMap) {
        for (key, value) in [
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("eval_data", &self.eval_data),
        ] {
            if let Some(path) = value {
                out.set(format!("{prefix}{key}"), path.display());
            }
        }
    }

    fn take_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<()> {
        for (key, slot) in [
            ("data", &mut self.data),
            ("checkpoint", &mut self.checkpoint),
            ("eval_data", &mut self.eval_data),
        ] {
            let mut raw = String::new();
            kv.take(&format!("{prefix}{key}"), &mut raw)?;
            if !raw.is_empty() {
                *slot = Some(PathBuf::from(raw));
            }
        }
        Ok(())
    }
}

/// Every setting of every command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Shift applied to the target splits.
    pub shift: DomainShift,
    pub splits: SplitSizes,
    pub arch: ArchConfig,
    pub source: SourceSchedule,
    pub adapt: AdaptConfig,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            shift: DomainShift::reference(),
            splits: SplitSizes::default(),
            arch: ArchConfig::default(),
            source: SourceSchedule::default(),
            adapt: AdaptConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.synth.write_kv("synth.", &mut kv);
        self.shift.write_kv("shift.", &mut kv);
        self.splits.write_kv("splits.", &mut kv);
        self.arch.write_kv("arch.", &mut kv);
        self.source.write_kv("source.", &mut kv);
        self.adapt.write_kv("adapt.", &mut kv);
        self.inputs.write_kv("input.", &mut kv);
        kv
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.synth.take_kv("synth.", &mut kv)?;
        cfg.shift.take_kv("shift.", &mut kv)?;
        cfg.splits.take_kv("splits.", &mut kv)?;
        cfg.arch.take_kv("arch.", &mut kv)?;
        cfg.source.take_kv("source.", &mut kv)?;
        cfg.adapt.take_kv("adapt.", &mut kv)?;
        cfg.inputs.take_kv("input.", &mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvMap::load(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    /// One seed for generation, initialisation and both training loops.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.arch.init_seed = seed;
        self.source.seed = seed;
        self.adapt.seed = seed;
    }

    pub fn write_resolved(&self, out: &Path) -> Result<()> {
        let path = out.join(RESOLVED_CONFIG);
        let text = format!("# umda resolved configuration\n{}", self.to_kv().render());
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn required(slot: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    slot.clone()
        .ok_or_else(|| Error::Config(format!("missing {flag} (flag or input.* key in --config)")))
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = flag {
        *slot = Some(p.clone());
    }
    if let Some(p) = slot.as_ref() {
        *slot = Some(absolute(p)?);
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `source/`, `target-train/` and `target-test/` under `out`.
/// Target-train images are written without annotations.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut bench = generate_benchmark(&cfg.synth, &cfg.shift, cfg.splits)?;
    for pair in &mut bench.target_train.pairs {
        pair.annotation = None;
    }
    for (name, ds) in [
        ("source", &bench.source),
        ("target-train", &bench.target_train),
        ("target-test", &bench.target_test),
    ] {
        let dir = out.join(name);
        create_dir(&dir)?;
        save_dataset(ds, &dir)?;
        log::info!("wrote {} pairs to {}", ds.len(), dir.display());
    }
    cfg.write_resolved(out)
}

/// Writes `source.ckpt` and `source_losses.csv`.
pub fn cmd_train_source(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = required(&cfg.inputs.data, "--data")?;
    create_dir(out)?;
    let dataset = load_dataset(&data)?;
    if let Some(unlabeled) = dataset.first_unlabeled() {
        return Err(Error::InvalidInput(format!(
            "source image {} in {} has no annotation",
            unlabeled.id(),
            data.display()
        )));
    }
    let run = train_source(&dataset, &cfg.arch, &cfg.source)?;
    save_checkpoint(&run.params, &out.join("source.ckpt"))?;
    write_text(
        &out.join("source_losses.csv"),
        &render_source_losses(&run.losses),
    )?;
    cfg.write_resolved(out)
}

/// Writes `adapted.ckpt`, `history.csv` and `pseudo/iter_<k>.rle` per the
/// checkpoint cadence. On failure the last good state goes to `last_good.*`.
pub fn cmd_adapt(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = required(&cfg.inputs.data, "--data")?;
    let checkpoint = required(&cfg.inputs.checkpoint, "--checkpoint")?;
    cfg.adapt.validate()?;
    create_dir(out)?;
    let pseudo_dir = out.join("pseudo");
    create_dir(&pseudo_dir)?;

    let source = load_checkpoint(&checkpoint)?;
    let target = load_dataset(&data)?;
    let eval = cfg
        .inputs
        .eval_data
        .as_deref()
        .map(load_dataset)
        .transpose()?;

    let mut write_error = None;
    let mut observer = |event: AdaptEvent<'_>| {
        if let AdaptEvent::IterationDone { record, states, .. } = event {
            if cfg.adapt.is_checkpoint_iteration(record.iteration) && write_error.is_none() {
                let path = pseudo_dir.join(format!("iter_{:03}.rle", record.iteration));
                if let Err(e) = save_pseudo_states(states, &path) {
                    write_error = Some(e);
                }
            }
        }
    };
    let result = adapt(&source, &target, &cfg.adapt, eval.as_ref(), &mut observer);
    if let Some(e) = write_error {
        return Err(e);
    }
    match result {
        Ok(run) => {
            save_checkpoint(&run.params, &out.join("adapted.ckpt"))?;
            emit_history(&run.history, &out.join("history.csv"))?;
            cfg.write_resolved(out)
        }
        Err(failure) => {
            save_checkpoint(&failure.last_good.params, &out.join("last_good.ckpt"))?;
            save_pseudo_states(&failure.last_good.states, &pseudo_dir.join("last_good.rle"))?;
            emit_history(&failure.last_good.history, &out.join("history.csv"))?;
            Err(Error::Numeric(failure.to_string()))
        }
    }
}

/// Writes `pr.csv`, `heatmaps/<id>.pgm` and `summary.txt`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let data = required(&cfg.inputs.data, "--data")?;
    let checkpoint = required(&cfg.inputs.checkpoint, "--checkpoint")?;
    create_dir(out)?;
    let params = load_checkpoint(&checkpoint)?;
    let dataset = load_dataset(&data)?;
    let report = evaluate(&params, &dataset)?;
    emit_pr_csv(&report.curve, &out.join("pr.csv"))?;
    let heat_dir = out.join("heatmaps");
    create_dir(&heat_dir)?;
    for (id, map) in &report.heatmaps {
        emit_heatmap(map, &heat_dir.join(format!("{id}.pgm")))?;
    }
    write_text(&out.join("summary.txt"), &format!("{}\n", report.summary()))?;
    cfg.write_resolved(out)?;
    Ok(report)
}

fn set<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Resolves flags against the config file and runs the command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = base_config(&args)?;
            cmd_synth(&cfg, &args.out)
        }
        Command::TrainSource(args) => {
            let mut cfg = base_config(&args.common)?;
            override_path(&mut cfg.inputs.data, &args.data)?;
            if let Some(epochs) = args.epochs {
                cfg.source = cfg.source.with_epochs(epochs);
            }
            if let Some(lr) = args.lr {
                cfg.source.learning_rates.iter_mut().for_each(|l| *l = lr);
            }
            set(&mut cfg.source.clip_norm, args.clip_norm);
            cmd_train_source(&cfg, &args.common.out)
        }
        Command::Adapt(args) => {
            let mut cfg = base_config(&args.common)?;
            override_path(&mut cfg.inputs.data, &args.data)?;
            override_path(&mut cfg.inputs.checkpoint, &args.checkpoint)?;
            override_path(&mut cfg.inputs.eval_data, &args.eval_data)?;
            set(&mut cfg.adapt.iterations, args.iterations);
            set(&mut cfg.adapt.epochs, args.epochs);
            set(&mut cfg.adapt.tau_start, args.tau);
            set(&mut cfg.adapt.tau_end, args.tau);
            set(&mut cfg.adapt.lr, args.lr);
            set(&mut cfg.adapt.clip_norm, args.clip_norm);
            set(&mut cfg.adapt.eq7_subtrahend, args.eq7_subtrahend);
            cmd_adapt(&cfg, &args.common.out)
        }
        Command::Eval(args) => {
            let mut cfg = base_config(&args.common)?;
            override_path(&mut cfg.inputs.data, &args.data)?;
            override_path(&mut cfg.inputs.checkpoint, &args.checkpoint)?;
            let report = cmd_eval(&cfg, &args.common.out)?;
            println!("{}", report.summary());
            Ok(())
        }
    }
}
