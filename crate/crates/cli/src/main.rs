use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use slotfeat::data::{generate_synthetic_dataset, load_dataset, SceneSample, Split, SynthConfig};
use slotfeat::eval::{
    evaluate_block_baseline, evaluate_model, hard_labels_at, predict_masks, prepare_samples,
    EvalSettings, Task,
};
use slotfeat::features::Provider;
use slotfeat::masks::{write_overlay_png, DecoderKind, MaskSource};
use slotfeat::training::{
    load_checkpoint, train_until_done, DataDims, InputSource, StepStats, TrainConfig, TrainState,
};
use slotfeat::{Error, Result};

/// Object discovery by reconstructing frozen patch features.
///
/// Set SLOTFEAT_VERBOSITY to 0 (quiet), 1 (summaries, default) or 2
/// (per-step progress).
#[derive(Parser, Debug)]
#[command(name = "slotfeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic rectangle-scene dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Evaluate the model-free block-pattern baseline.
    BaselineBlocks(BaselineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Trailing samples tagged for evaluation (default: n/11).
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long)]
    max_size: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Skip writing the RGB renderings.
    #[arg(long)]
    no_images: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size model (ViT-B/16 feature scale, 500k steps).
    Full,
    /// Small model for the synthetic dataset on a CPU.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with (partial) training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Continue from the checkpoint in --out; only --steps may change.
    #[arg(long)]
    resume: bool,
    /// Loss log (JSON lines); defaults to <out>/train_log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    half_life: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// mlp, transformer or pixel.
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    target_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// features or trainable-conv.
    #[arg(long)]
    input: Option<String>,
    /// precomputed or toy-frozen.
    #[arg(long)]
    target_provider: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// discovery, localization or segmentation.
    #[arg(long)]
    task: String,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// mlp-alpha, decoder-attention or slot-attention.
    #[arg(long)]
    mask_source: Option<String>,
    #[arg(long, default_value_t = 27)]
    clusters: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Also write color-coded hard masks of every sample here.
    #[arg(long)]
    overlays: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of blocks.
    #[arg(long)]
    masks: usize,
    #[arg(long, default_value = "discovery")]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 27)]
    clusters: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
}

fn verbosity() -> u8 {
    std::env::var("SLOTFEAT_VERBOSITY")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

fn say(msg: impl AsRef<str>) {
    if verbosity() >= 1 {
        println!("{}", msg.as_ref());
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

/// Recursively overwrites `base` with the entries of `patch`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn with_file<T: serde::Serialize + serde::de::DeserializeOwned>(
    defaults: T,
    file: Option<&Path>,
) -> Result<T> {
    let Some(path) = file else {
        return Ok(defaults);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut value = serde_json::to_value(defaults).expect("settings serialize");
    merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| Error::Argument(format!("invalid value {value:?} for --{flag}")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = with_file(SynthConfig::default(), a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n {
        cfg.n_samples = v;
        cfg.n_eval = v / 11;
    }
    if let Some(v) = a.n_eval {
        cfg.n_eval = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = a.classes {
        cfg.n_classes = v;
    }
    if let Some(v) = a.min_objects {
        cfg.objects.0 = v;
    }
    if let Some(v) = a.max_objects {
        cfg.objects.1 = v;
    }
    if let Some(v) = a.min_size {
        cfg.object_size.0 = v;
    }
    if let Some(v) = a.max_size {
        cfg.object_size.1 = v;
    }
    if let Some(v) = a.image_size {
        cfg.image_size = (v, v);
    }
    if let Some(v) = a.patch_size {
        cfg.patch_size = v;
    }
    if a.no_images {
        cfg.write_images = false;
    }
    let m = generate_synthetic_dataset(&cfg, &a.out)?;
    let n_eval = m.samples.iter().filter(|s| s.split == Split::Eval).count();
    say(format!(
        "wrote {} samples ({} train, {} eval) to {}: {}x{} images, grid {}x{}, feature dim {}, {} classes + background",
        m.n_samples,
        m.n_samples - n_eval,
        n_eval,
        a.out.display(),
        m.image_size.0,
        m.image_size.1,
        m.grid.0,
        m.grid.1,
        m.feature_dim,
        m.classes.len() - 1
    ));
    Ok(())
}

fn load_samples(data: &Path, split: SplitArg) -> Result<Vec<SceneSample>> {
    let ds = load_dataset(data)?;
    match split {
        SplitArg::Train => ds.load_split(Split::Train),
        SplitArg::Eval => ds.load_split(Split::Eval),
        SplitArg::All => ds.iter().collect(),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let preset = match a.preset {
        Preset::Full => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    let mut cfg = with_file(preset, a.config.as_deref())?;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.steps, cfg.steps);
    set!(a.batch_size, cfg.batch_size);
    set!(a.lr, cfg.peak_lr);
    set!(a.warmup, cfg.warmup_steps);
    set!(a.half_life, cfg.decay_half_life);
    set!(a.clip, cfg.grad_clip_norm);
    set!(a.slots, cfg.num_slots);
    set!(a.iterations, cfg.iterations);
    set!(a.target_scale, cfg.target_scale);
    set!(a.seed, cfg.seed);
    set!(a.checkpoint_every, cfg.checkpoint_every);
    if let Some(d) = &a.decoder {
        cfg.decoder = parse_enum::<DecoderKind>("decoder", d)?;
    }
    if let Some(i) = &a.input {
        cfg.architecture.input = parse_enum::<InputSource>("input", i)?;
    }
    if let Some(p) = &a.target_provider {
        cfg.architecture.target = parse_enum::<Provider>("target-provider", p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (config, resumed) = if a.resume {
        let overridden = a.config.is_some()
            || a.batch_size.is_some()
            || a.lr.is_some()
            || a.warmup.is_some()
            || a.half_life.is_some()
            || a.clip.is_some()
            || a.slots.is_some()
            || a.iterations.is_some()
            || a.decoder.is_some()
            || a.target_scale.is_some()
            || a.seed.is_some()
            || a.checkpoint_every.is_some()
            || a.input.is_some()
            || a.target_provider.is_some();
        if overridden {
            return Err(Error::Config(
                "--resume continues the stored configuration; only --steps may be given".into(),
            ));
        }
        let mut s = load_checkpoint(&a.out)?;
        if let Some(steps) = a.steps {
            s.config.steps = steps;
        }
        (s.config.clone(), Some(s))
    } else {
        (train_config(&a)?, None)
    };
    let mut samples = load_samples(&a.data, a.split)?;
    prepare_samples(&mut samples, &config)?;
    let train: Vec<_> = samples.iter().map(SceneSample::to_train_sample).collect();
    let fresh = resumed.is_none();
    let dims = DataDims::of(&train)?;
    let mut state = match resumed {
        Some(s) if s.model.dims != dims => {
            return Err(Error::Data(format!(
                "dataset shapes {dims:?} do not match the checkpoint's {:?}",
                s.model.dims
            )))
        }
        Some(s) => s,
        None => TrainState::new(config, dims)?,
    };

    let c = &state.config;
    say(format!(
        "training {} decoder from step {} to {}: batch_size={} peak_lr={} warmup_steps={} decay_half_life={} grad_clip_norm={} slots={} iterations={} params={}",
        c.decoder,
        state.step,
        c.steps,
        c.batch_size,
        c.peak_lr,
        c.warmup_steps,
        c.decay_half_life,
        c.grad_clip_norm,
        c.num_slots,
        c.iterations,
        state.model.store.num_scalars()
    ));

    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.out.join("train_log.jsonl"));
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let mut log = BufWriter::new(file);
    let verbose = verbosity() >= 2;
    let mut on_step = |s: &StepStats| -> Result<()> {
        let line = serde_json::json!({"step": s.step, "lr": s.lr, "loss": s.loss, "grad_norm": s.grad_norm});
        writeln!(log, "{line}").map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if verbose && s.step.is_multiple_of(100) {
            eprintln!("step {} lr {:.3e} loss {:.6}", s.step, s.lr, s.loss);
        }
        Ok(())
    };
    let result = train_until_done(&mut state, &train, Some(&a.out), &mut on_step);
    log.flush().map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    result?;
    say(format!(
        "checkpoint at step {} written to {}",
        state.step,
        a.out.display()
    ));
    Ok(())
}

fn mask_source(arg: Option<&str>) -> Result<Option<MaskSource>> {
    arg.map(|s| s.parse()).transpose()
}

fn write_report(report: &slotfeat::metrics::MetricsReport, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    report.save(out)?;
    let values: Vec<String> = report
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    say(format!(
        "{}: {} -> {}",
        report.task,
        values.join(" "),
        out.display()
    ));
    Ok(())
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Eval => "eval",
        SplitArg::All => "all",
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let state = load_checkpoint(&a.checkpoint)?;
    let mut samples = load_samples(&a.data, a.split)?;
    prepare_samples(&mut samples, &state.config)?;
    let settings = EvalSettings {
        task,
        mask_source: mask_source(a.mask_source.as_deref())?,
        clusters: a.clusters,
        restarts: a.restarts,
        repeats: a.repeats,
        threshold: a.threshold,
        seed: a.seed,
    };
    let mut report = evaluate_model(&state.model, &samples, &settings)?;
    report
        .setting("checkpoint", a.checkpoint.display().to_string())
        .setting("checkpoint_step", state.step)
        .setting("dataset", a.data.display().to_string())
        .setting("split", split_name(a.split));
    write_report(&report, &a.out)?;
    if let Some(dir) = &a.overlays {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let source = settings
            .mask_source
            .unwrap_or_else(|| state.model.kind().default_source());
        let masks = predict_masks(&state.model, &samples, source, a.seed)?;
        for (m, s) in masks.iter().zip(&samples) {
            let labels = hard_labels_at(m, s.instances.height(), s.instances.width())?;
            write_overlay_png(&dir.join(format!("{}.png", s.id)), &labels)?;
        }
    }
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let samples = load_samples(&a.data, a.split)?;
    let settings = EvalSettings {
        task,
        mask_source: None,
        clusters: a.clusters,
        restarts: a.restarts,
        repeats: a.repeats,
        threshold: a.threshold,
        seed: a.seed,
    };
    let mut report = evaluate_block_baseline(&samples, a.masks, &settings)?;
    report
        .setting("dataset", a.data.display().to_string())
        .setting("split", split_name(a.split));
    write_report(&report, &a.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BaselineBlocks(a) => cmd_baseline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
