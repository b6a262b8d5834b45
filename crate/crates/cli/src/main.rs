//! `stentviz` — one executable for the whole workflow: phantom dataset
//! generation, classifier training, evaluation, saliency map generation,
//! cartesian rendering, and a finite-difference gradient self-check.
//!
//! Conventions shared by every subcommand:
//! - parameters resolve in three layers: built-in preset defaults, then an
//!   optional `--config` key-value file, then explicit flags (later wins);
//! - every run that produces artifacts writes the fully resolved parameter
//!   set as `run_config.txt` next to them; feeding that snapshot back through
//!   `--config` reproduces the run bitwise in single-threaded mode;
//! - progress goes to standard output as line-oriented `key=value` pairs;
//! - exit codes: 0 success, 2 usage/config/file problems, 3 numerical
//!   failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use stentviz_core::classifier::{
    evaluate, load_checkpoint, save_checkpoint, train, ClassLabel, InputMode, Precision,
    PredictionScheme, TrainConfig,
};
use stentviz_core::config::KvFile;
use stentviz_core::geometry::{overlay, overlay_to_rgb8, polar_to_cartesian, render_stack};
use stentviz_core::gradcheck::run_full_suite;
use stentviz_core::phantom::{
    generate_dataset, load_dataset, load_polar_slice, save_dataset, split_by_pullback, PhantomSpec,
    PolarImage,
};
use stentviz_core::saliency::{
    load_saliency, normalize_for_display, save_preview_png, save_saliency, shifted_saliency,
    sign_select, SaliencyMap, SignMode, DEFAULT_SHIFTS,
};
use stentviz_core::{Error, Result};

/// Default pullback count for `phantom-gen`: 18 splits 12/6 at the default
/// train fraction with all three classes on both sides.
const DEFAULT_PULLBACKS: usize = 18;
const DEFAULT_TRAIN_FRACTION: f64 = 2.0 / 3.0;
const DEFAULT_TRAIN_SEED: u64 = 7;
const DEFAULT_SPLIT_SEED: u64 = 17;
const DEFAULT_GRADCHECK_SEED: u64 = 2024;
const DEFAULT_GRADCHECK_INSTANCES: usize = 20;

#[derive(Parser)]
#[command(
    name = "stentviz",
    version,
    about = "Synthetic OCT phantoms, a weakly supervised strut classifier, and saliency rendering"
)]
struct Cli {
    /// Worker threads for the parallel stages (evaluation, per-slice
    /// saliency). Results do not depend on this value; 1 is fully serial.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic polar OCT dataset with ground-truth strut masks.
    PhantomGen(PhantomGenArgs),
    /// Train the three-class slice classifier on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Produce shift-averaged guided-backprop saliency maps.
    Saliency(SaliencyArgs),
    /// Resample saliency maps and slices to cartesian overlay images.
    Render(RenderArgs),
    /// Check every autodiff op against central finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code().clamp(0, 255) as u8;
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    match cli.command {
        Command::PhantomGen(args) => cmd_phantom_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Saliency(args) => cmd_saliency(args),
        Command::Render(args) => cmd_render(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ---------------------------------------------------------------- presets --

/// Built-in parameter sets. `desk` is small enough to train in minutes on
/// one CPU core; `paper` is the full-scale geometry and published schedule
/// (224-pixel crops, learning rate 1e-4, batches of 40, 400 epochs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

/// Training defaults contributed by a preset (lowest resolution layer).
struct TrainDefaults {
    input_mode: InputMode,
    crop_size: usize,
    channels_base: usize,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
}

impl Preset {
    fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    fn phantom_spec(self) -> PhantomSpec {
        match self {
            Preset::Desk => PhantomSpec::desk(),
            Preset::Paper => PhantomSpec::paper(),
        }
    }

    fn train_defaults(self) -> TrainDefaults {
        match self {
            Preset::Desk => TrainDefaults {
                input_mode: InputMode::Patch,
                crop_size: 64,
                channels_base: 8,
                learning_rate: 1.5e-3,
                batch_size: 8,
                epochs: 30,
            },
            Preset::Paper => TrainDefaults {
                input_mode: InputMode::Patch,
                crop_size: 224,
                channels_base: 16,
                learning_rate: 1e-4,
                batch_size: 40,
                epochs: 400,
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk|paper)"))),
        }
    }
}

// ----------------------------------------------------- config resolution --

/// The optional `--config` layer between preset defaults and explicit flags.
struct ConfigLayer {
    kv: Option<KvFile>,
}

impl ConfigLayer {
    fn load(path: Option<&Path>) -> Result<Self> {
        Ok(ConfigLayer { kv: path.map(KvFile::load).transpose()? })
    }

    fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match &self.kv {
            Some(kv) => kv.get_parsed(key),
            None => Ok(None),
        }
    }

    /// Resolution order: explicit flag, then config value, then `default`.
    fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    /// Like `pick` for parameters that have no sensible default.
    fn pick_required<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        self.get_parsed(key)?
            .ok_or_else(|| Error::Config(format!("`--{key}` is required (flag or config entry)")))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("{}: cannot derive a name", path.display())))
}

// -------------------------------------------------------------- phantom --

#[derive(Args)]
struct PhantomGenArgs {
    /// Output dataset directory (created if needed).
    #[arg(long)]
    out: PathBuf,
    /// Generator parameter file (`key = value`); keys missing from it fall
    /// back to the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Run-config snapshot to start from; flags still override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in parameter set used for unspecified values.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Number of pullbacks; labels cycle through the class mix.
    #[arg(long)]
    pullbacks: Option<usize>,
    /// Generator seed; overrides the spec file and preset.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_phantom_gen(args: PhantomGenArgs) -> Result<()> {
    let layer = ConfigLayer::load(args.config.as_deref())?;
    let preset = layer.pick("preset", args.preset, Preset::Desk)?;

    // A run-config snapshot carries every generator key, so reading it as a
    // spec overlay restores the exact parameter set.
    let mut spec = match &layer.kv {
        Some(kv) => PhantomSpec::from_kv(kv, &preset.phantom_spec())?,
        None => preset.phantom_spec(),
    };
    if let Some(path) = &args.spec {
        spec = PhantomSpec::from_kv(&KvFile::load(path)?, &spec)?;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let pullbacks = layer.pick("pullbacks", args.pullbacks, DEFAULT_PULLBACKS)?;

    let started = Instant::now();
    let dataset = generate_dataset(&spec, pullbacks)?;
    save_dataset(&dataset, &spec, &args.out)?;

    let mut rc = KvFile::new();
    rc.set("command", "phantom-gen");
    rc.set("preset", preset);
    rc.set("pullbacks", pullbacks);
    for (k, v) in spec.to_kv().entries() {
        rc.set(k.clone(), v);
    }
    rc.save(&args.out.join("run_config.txt"))?;

    let counts = dataset.class_counts();
    println!(
        "pullbacks={} slices={} metal_stent={} bvs={} no_device={} seconds={:.2} out={}",
        pullbacks,
        dataset.slice_count(),
        counts[0],
        counts[1],
        counts[2],
        started.elapsed().as_secs_f64(),
        args.out.display(),
    );
    Ok(())
}

// ---------------------------------------------------------------- train --

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by phantom-gen.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint.ckpt and run_config.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// patch | full_image_resized
    #[arg(long)]
    input_mode: Option<String>,
    /// Square crop and network input size, in pixels.
    #[arg(long)]
    crop: Option<usize>,
    /// Stem width of the residual network.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed (weight init, batch order, crop positions).
    #[arg(long)]
    seed: Option<u64>,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
    /// Fraction of slices assigned to the training side of the split.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Seed of the pullback shuffle behind the split.
    #[arg(long)]
    split_seed: Option<u64>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let layer = ConfigLayer::load(args.config.as_deref())?;
    let preset = layer.pick("preset", args.preset, Preset::Desk)?;
    let d = preset.train_defaults();

    let data = layer.pick_required::<PathBuf>("data", args.data)?;
    let config = TrainConfig {
        input_mode: layer
            .pick("input_mode", args.input_mode, d.input_mode.as_str().to_string())?
            .parse()?,
        crop_size: layer.pick("crop_size", args.crop, d.crop_size)?,
        channels_base: layer.pick("channels_base", args.channels, d.channels_base)?,
        learning_rate: layer.pick("learning_rate", args.lr, d.learning_rate)?,
        batch_size: layer.pick("batch_size", args.batch, d.batch_size)?,
        epochs: layer.pick("epochs", args.epochs, d.epochs)?,
        seed: layer.pick("seed", args.seed, DEFAULT_TRAIN_SEED)?,
        precision: layer
            .pick("precision", args.precision, Precision::F32.as_str().to_string())?
            .parse()?,
    };
    config.validate()?;
    let train_fraction =
        layer.pick("train_fraction", args.train_fraction, DEFAULT_TRAIN_FRACTION)?;
    let split_seed = layer.pick("split_seed", args.split_seed, DEFAULT_SPLIT_SEED)?;

    let (dataset, _) = load_dataset(&data)?;
    let (train_set, val_set) = split_by_pullback(dataset, train_fraction, split_seed)?;
    println!(
        "train_pullbacks={} val_pullbacks={} train_slices={} val_slices={}",
        train_set.pullbacks.len(),
        val_set.pullbacks.len(),
        train_set.slice_count(),
        val_set.slice_count(),
    );

    let mut rc = KvFile::new();
    rc.set("command", "train");
    rc.set("preset", preset);
    rc.set("data", data.display());
    rc.set("input_mode", config.input_mode.as_str());
    rc.set("crop_size", config.crop_size);
    rc.set("channels_base", config.channels_base);
    rc.set("learning_rate", config.learning_rate);
    rc.set("batch_size", config.batch_size);
    rc.set("epochs", config.epochs);
    rc.set("seed", config.seed);
    rc.set("precision", config.precision.as_str());
    rc.set("train_fraction", train_fraction);
    rc.set("split_seed", split_seed);

    let started = Instant::now();
    let outcome = train(&train_set, &val_set, &config, |s| {
        println!(
            "epoch={} loss={:.6} val_accuracy={:.6}",
            s.epoch, s.train_loss, s.val_accuracy
        );
    })?;

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let ckpt_path = args.out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &outcome.model, &rc)?;
    rc.save(&args.out.join("run_config.txt"))?;
    println!(
        "best_epoch={} best_accuracy={:.6} seconds={:.2} checkpoint={}",
        outcome.best_epoch,
        outcome.best_accuracy,
        started.elapsed().as_secs_f64(),
        ckpt_path.display(),
    );
    Ok(())
}

// ----------------------------------------------------------------- eval --

/// Which side of the pullback split to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Train,
    Val,
    All,
}

impl Side {
    fn as_str(self) -> &'static str {
        match self {
            Side::Train => "train",
            Side::Val => "val",
            Side::All => "all",
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Side::Train),
            "val" | "test" => Ok(Side::Val),
            "all" => Ok(Side::All),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train|val|all)"))),
        }
    }
}

fn parse_scheme(s: &str) -> Result<PredictionScheme> {
    match s {
        "patch" | "patch_averaged" => Ok(PredictionScheme::PatchAveraged),
        "full" | "full_image_resized" => Ok(PredictionScheme::FullImageResized),
        other => Err(Error::Config(format!("unknown scheme {other:?} (expected patch|full)"))),
    }
}

fn scheme_str(scheme: PredictionScheme) -> &'static str {
    match scheme {
        PredictionScheme::PatchAveraged => "patch_averaged",
        PredictionScheme::FullImageResized => "full_image_resized",
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; defaults to the path recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// train | val | all; split parameters default to the checkpoint's, so
    /// `val` scores the pullbacks the model never trained on.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// patch | full; defaults to the checkpoint's input mode.
    #[arg(long)]
    scheme: Option<String>,
    /// Optional directory for metrics.txt and run_config.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag, then `--config`, then the checkpoint's recorded config, then the
/// static default.
fn layered<T: FromStr>(
    flag: Option<T>,
    layer: &ConfigLayer,
    ck: &KvFile,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = layer.get_parsed(key)? {
        return Ok(v);
    }
    Ok(ck.get_parsed(key)?.unwrap_or(default))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let layer = ConfigLayer::load(args.config.as_deref())?;
    let ckpt_path = layer.pick_required::<PathBuf>("checkpoint", args.checkpoint)?;
    let (model, ck) = load_checkpoint(&ckpt_path)?;

    let data = match args.data {
        Some(d) => d,
        None => match layer.get_parsed("data")? {
            Some(d) => d,
            None => ck.get_parsed::<PathBuf>("data")?.ok_or_else(|| {
                Error::Config("`--data` not given and not recorded in the checkpoint".into())
            })?,
        },
    };
    let train_fraction = layered(
        args.train_fraction,
        &layer,
        &ck,
        "train_fraction",
        DEFAULT_TRAIN_FRACTION,
    )?;
    let split_seed = layered(args.split_seed, &layer, &ck, "split_seed", DEFAULT_SPLIT_SEED)?;
    let side: Side = layer.pick("split", args.split, Side::Val.as_str().to_string())?.parse()?;
    let scheme = match layer.pick("scheme", args.scheme, String::new())? {
        s if s.is_empty() => PredictionScheme::for_input_mode(model.arch().input_mode),
        s => parse_scheme(&s)?,
    };

    let (dataset, _) = load_dataset(&data)?;
    let subset = match side {
        Side::All => dataset,
        Side::Train => split_by_pullback(dataset, train_fraction, split_seed)?.0,
        Side::Val => split_by_pullback(dataset, train_fraction, split_seed)?.1,
    };

    let started = Instant::now();
    let report = evaluate(&model, &subset, scheme)?;

    let mut lines = vec![
        format!("checkpoint={}", ckpt_path.display()),
        format!("split={}", side.as_str()),
        format!("scheme={}", scheme_str(scheme)),
        format!("slices={}", report.slice_count),
        format!("accuracy={:.6}", report.accuracy),
        format!("macro_f1={:.6}", report.macro_f1),
    ];
    for c in ClassLabel::ALL {
        if let Some(auc) = report.per_class_auc[c.index()] {
            lines.push(format!("auc.{c}={auc:.6}"));
        }
    }
    if let Some(auc) = report.mean_auc {
        lines.push(format!("mean_auc={auc:.6}"));
    }
    for c in ClassLabel::ALL {
        let row = report.confusion[c.index()];
        lines.push(format!("confusion.{c}={},{},{}", row[0], row[1], row[2]));
    }
    lines.push(format!("seconds={:.2}", started.elapsed().as_secs_f64()));
    for line in &lines {
        println!("{line}");
    }

    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let mut rc = KvFile::new();
        rc.set("command", "eval");
        rc.set("checkpoint", ckpt_path.display());
        rc.set("data", data.display());
        rc.set("split", side.as_str());
        rc.set("train_fraction", train_fraction);
        rc.set("split_seed", split_seed);
        rc.set("scheme", scheme_str(scheme));
        rc.save(&out.join("run_config.txt"))?;
        let mpath = out.join("metrics.txt");
        fs::write(&mpath, lines.join("\n") + "\n").map_err(|e| io_err(&mpath, e))?;
    }
    Ok(())
}

// ------------------------------------------------------------- saliency --

/// `--mode` values: a fixed sign, or `auto` to pick per slice from the
/// predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SignChoice {
    Auto,
    Fixed(SignMode),
}

impl SignChoice {
    fn as_str(self) -> &'static str {
        match self {
            SignChoice::Auto => "auto",
            SignChoice::Fixed(m) => m.as_str(),
        }
    }
}

impl FromStr for SignChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(SignChoice::Auto);
        }
        Ok(SignChoice::Fixed(s.parse()?))
    }
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A single polar slice PNG, a pullback directory, or a whole dataset
    /// directory (every slice, mirrored into per-pullback subdirectories).
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Tile size; must match the checkpoint's input size.
    #[arg(long)]
    patch: Option<usize>,
    /// Number of angular shifts averaged per map.
    #[arg(long)]
    k: Option<usize>,
    /// neg | pos | auto
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Expands `--in` into (subdirectory, file stem, image) triples.
///
/// Accepted shapes:
/// - a single PNG file, used as-is (assumed already at working depth);
/// - a dataset directory containing `manifest.txt`: every slice, with the
///   manifest's depth trim applied, grouped by pullback id;
/// - a pullback directory inside a dataset (the parent manifest supplies the
///   trim);
/// - any other directory: each `*.png` except `mask_*` files, in name order,
///   used as-is.
fn collect_slices(input: &Path) -> Result<Vec<(String, String, PolarImage)>> {
    if input.is_file() {
        return Ok(vec![(String::new(), stem_of(input)?, load_polar_slice(input)?)]);
    }
    if !input.is_dir() {
        return Err(Error::Config(format!("{}: no such file or directory", input.display())));
    }
    if input.join("manifest.txt").is_file() {
        let (dataset, _) = load_dataset(input)?;
        let mut out = Vec::new();
        for pb in dataset.pullbacks {
            for (z, slice) in pb.slices.into_iter().enumerate() {
                out.push((pb.id.clone(), format!("slice_{z:03}"), slice));
            }
        }
        return Ok(out);
    }
    if let Some(parent) = input.parent() {
        if parent.join("manifest.txt").is_file() {
            let id = stem_of(input)?;
            let (dataset, _) = load_dataset(parent)?;
            let pb = dataset
                .pullbacks
                .into_iter()
                .find(|p| p.id == id)
                .ok_or_else(|| {
                    Error::Dataset(format!("pullback {id:?} not listed in the parent manifest"))
                })?;
            return Ok(pb
                .slices
                .into_iter()
                .enumerate()
                .map(|(z, s)| (String::new(), format!("slice_{z:03}"), s))
                .collect());
        }
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| io_err(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_none_or(|n| !n.starts_with("mask_"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| Ok((String::new(), stem_of(&p)?, load_polar_slice(&p)?)))
        .collect()
}

fn cmd_saliency(args: SaliencyArgs) -> Result<()> {
    let layer = ConfigLayer::load(args.config.as_deref())?;
    let ckpt_path = layer.pick_required::<PathBuf>("checkpoint", args.checkpoint)?;
    let input = layer.pick_required::<PathBuf>("in", args.input)?;
    let (model, _) = load_checkpoint(&ckpt_path)?;
    let patch = layer.pick("patch", args.patch, model.arch().input_size)?;
    if patch != model.arch().input_size {
        return Err(Error::Config(format!(
            "--patch {patch} does not match the checkpoint input size {}",
            model.arch().input_size
        )));
    }
    let k = layer.pick("k", args.k, DEFAULT_SHIFTS)?;
    let mode: SignChoice = layer.pick("mode", args.mode, SignChoice::Auto.as_str().to_string())?.parse()?;

    let slices = collect_slices(&input)?;
    if slices.is_empty() {
        return Err(Error::Dataset(format!("{}: no slices found", input.display())));
    }

    let started = Instant::now();
    // Slices are independent; maps are deterministic regardless of thread
    // count and are written in input order.
    let maps = slices
        .par_iter()
        .map(|(_, _, image)| shifted_saliency(&model, image, k))
        .collect::<Result<Vec<SaliencyMap>>>()?;

    for ((subdir, stem, _), map) in slices.iter().zip(&maps) {
        let dir = if subdir.is_empty() { args.out.clone() } else { args.out.join(subdir) };
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let sign = match mode {
            SignChoice::Auto => SignMode::for_class(map.source_class),
            SignChoice::Fixed(m) => m,
        };
        save_saliency(&dir.join(format!("{stem}.sal")), map, patch, sign)?;
        save_preview_png(&dir.join(format!("{stem}_preview.png")), map, sign)?;
        let name =
            if subdir.is_empty() { stem.clone() } else { format!("{subdir}/{stem}") };
        println!(
            "slice={name} class={} sign={} empty={}",
            map.source_class,
            sign.as_str(),
            map.empty
        );
    }

    let mut rc = KvFile::new();
    rc.set("command", "saliency");
    rc.set("checkpoint", ckpt_path.display());
    rc.set("in", input.display());
    rc.set("patch", patch);
    rc.set("k", k);
    rc.set("mode", mode.as_str());
    rc.save(&args.out.join("run_config.txt"))?;

    println!(
        "slices={} seconds={:.2} out={}",
        slices.len(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- render --

#[derive(Args)]
struct RenderArgs {
    /// Directory of .sal maps written by the saliency subcommand.
    #[arg(long)]
    saliency_dir: Option<PathBuf>,
    /// Directory with the matching polar slice PNGs (same file stems).
    #[arg(long)]
    oct_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Cartesian output size in pixels (even).
    #[arg(long)]
    size: Option<usize>,
    /// Also export the saliency stack as a cartesian volume under out/volume.
    #[arg(long)]
    volume: bool,
    /// Slice spacing recorded in the volume sidecar, in pixel units.
    #[arg(long)]
    slice_spacing: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let layer = ConfigLayer::load(args.config.as_deref())?;
    let sal_dir = layer.pick_required::<PathBuf>("saliency_dir", args.saliency_dir)?;
    let oct_dir = layer.pick_required::<PathBuf>("oct_dir", args.oct_dir)?;
    let size = layer.pick("size", args.size, 512usize)?;
    let volume = args.volume || layer.get_parsed("volume")?.unwrap_or(false);
    let slice_spacing = layer.pick("slice_spacing", args.slice_spacing, 1.0)?;

    let mut sal_files: Vec<PathBuf> = fs::read_dir(&sal_dir)
        .map_err(|e| io_err(&sal_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sal"))
        .collect();
    sal_files.sort();
    if sal_files.is_empty() {
        return Err(Error::Config(format!("{}: no .sal files", sal_dir.display())));
    }

    let started = Instant::now();
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut sal_stack = Vec::new();
    for sal_path in &sal_files {
        let stem = stem_of(sal_path)?;
        let (header, values) = load_saliency(sal_path)?;
        let oct_path = oct_dir.join(format!("{stem}.png"));
        let oct = load_polar_slice(&oct_path)?;
        if oct.h_a != header.rows || oct.w_d < header.cols {
            return Err(Error::ShapeMismatch {
                op: "render",
                details: format!(
                    "{}: slice is {}x{} but the map is {}x{}",
                    oct_path.display(),
                    oct.h_a,
                    oct.w_d,
                    header.rows,
                    header.cols
                ),
            });
        }
        // Slices are stored untrimmed; drop the far columns the map excludes.
        let oct_trimmed: Vec<f32> = (0..header.rows)
            .flat_map(|r| oct.pixels[r * oct.w_d..r * oct.w_d + header.cols].iter().copied())
            .collect();

        let map = SaliencyMap {
            h: header.rows,
            w: header.cols,
            values,
            contribution_count: Vec::new(),
            source_class: header.class,
            k_shifts: header.k_shifts,
            empty: false,
        };
        let display = normalize_for_display(&sign_select(&map, header.sign_mode).values);
        let sal_cart = polar_to_cartesian(&display, header.rows, header.cols, size)?;
        let oct_cart = polar_to_cartesian(&oct_trimmed, header.rows, header.cols, size)?;
        let pixels = overlay(&oct_cart, &sal_cart)?;
        let out_path = args.out.join(format!("{stem}_overlay.png"));
        overlay_to_rgb8(size, &pixels)
            .save(&out_path)
            .map_err(|e| Error::Image { path: out_path.clone(), source: e })?;
        println!("slice={stem} overlay={}", out_path.display());
        if volume {
            sal_stack.push(sal_cart);
        }
    }

    if volume {
        let vdir = args.out.join("volume");
        let meta = render_stack(&sal_stack, slice_spacing, &vdir)?;
        println!("volume={} depth={} size={}", vdir.display(), meta.depth, meta.height);
    }

    let mut rc = KvFile::new();
    rc.set("command", "render");
    rc.set("saliency_dir", sal_dir.display());
    rc.set("oct_dir", oct_dir.display());
    rc.set("size", size);
    rc.set("volume", volume);
    rc.set("slice_spacing", slice_spacing);
    rc.save(&args.out.join("run_config.txt"))?;

    println!(
        "slices={} seconds={:.2} out={}",
        sal_files.len(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------ gradcheck --

#[derive(Args)]
struct GradcheckArgs {
    /// Base seed of the random instances.
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per op.
    #[arg(long)]
    instances: Option<usize>,
    /// Optional directory for report.txt and run_config.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let layer = ConfigLayer::load(args.config.as_deref())?;
    let seed = layer.pick("seed", args.seed, DEFAULT_GRADCHECK_SEED)?;
    let instances = layer.pick("instances", args.instances, DEFAULT_GRADCHECK_INSTANCES)?;

    let started = Instant::now();
    let reports = run_full_suite(seed, instances)?;
    let mut lines: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "op={} instances={} coords={} max_rel_err={:.3e} pass={}",
                r.op,
                r.instances,
                r.coords_checked,
                r.max_rel_err,
                r.passed()
            )
        })
        .collect();
    let failed: Vec<&str> =
        reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    lines.push(format!(
        "ops={} failed={} seconds={:.2}",
        reports.len(),
        failed.len(),
        started.elapsed().as_secs_f64()
    ));
    for line in &lines {
        println!("{line}");
    }

    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let mut rc = KvFile::new();
        rc.set("command", "gradcheck");
        rc.set("seed", seed);
        rc.set("instances", instances);
        rc.save(&out.join("run_config.txt"))?;
        let rpath = out.join("report.txt");
        fs::write(&rpath, lines.join("\n") + "\n").map_err(|e| io_err(&rpath, e))?;
    }

    if !failed.is_empty() {
        return Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
