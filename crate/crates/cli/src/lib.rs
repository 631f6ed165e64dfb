//! `dfn` command-line driver: training, evaluation, single-image inference,
//! super-resolution dataset synthesis and model inspection.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use dfn_core::data::{
    crop, layout, load_paired_dataset, load_png, make_sr_pair, pad_to_multiple, save_png, BlurSpec, DatasetSpec,
    ImagePair, Split,
};
use dfn_core::model::load_checkpoint;
use dfn_core::train::{evaluate, TrainConfig, Trainer};
use dfn_core::{DfnModel, MetricRecord, ModelConfig, Rng, Scalar, SsimConfig, Variant};

/// Spatial dims the network accepts must be multiples of this.
const SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "dfn", version, about = "DeepFusionNet low-light enhancement and 2x super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split directory and print a metrics row.
    Eval(EvalArgs),
    /// Enhance a single low-light PNG (output keeps the input size).
    Enhance(InferArgs),
    /// Upscale a single PNG by 2x.
    Sr(InferArgs),
    /// Print the per-tensor parameter table of a checkpoint or preset.
    Inspect(InspectArgs),
    /// Synthesize blurred low-resolution inputs from a folder of PNGs.
    MakeSrDataset(MakeSrArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Enhancement,
    #[value(alias = "super_resolution", alias = "sr")]
    SuperResolution,
}

impl From<Task> for Variant {
    fn from(t: Task) -> Self {
        match t {
            Task::Enhancement => Variant::Enhancement,
            Task::SuperResolution => Variant::SuperResolution,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Dataset root holding `train/` and optionally `val/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metrics.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to 200 for enhancement and 400 for super-resolution.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_ssim: Option<f64>,
    /// Write ckpt_epoch{N}.dfnc every N epochs (0: final checkpoint only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub cbam_reduction: Option<usize>,
    /// JSON file `{"model": {...}, "train": {...}}` overriding preset fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run into `--out`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Split directory, e.g. `<root>/val`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = dfn_core::metrics::DEFAULT_LAMBDA_SSIM)]
    pub lambda_ssim: f64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["ckpt", "preset"]))]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Task>,
    /// Preset overrides; only with `--preset`.
    #[arg(long, requires = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "preset")]
    pub cbam_reduction: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MakeSrArgs {
    /// Folder of high-resolution PNGs with even width and height.
    #[arg(long)]
    pub src: PathBuf,
    /// Dataset root; pairs land in `<dst>/<split>/{lowres_blurred,highres}`.
    #[arg(long)]
    pub dst: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    pub kernels: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(a),
            Precision::F64 => train::<f64>(a),
        },
        Command::Eval(a) => match a.precision {
            Precision::F32 => eval::<f32>(a),
            Precision::F64 => eval::<f64>(a),
        },
        Command::Enhance(a) => match a.precision {
            Precision::F32 => infer::<f32>(a, Variant::Enhancement),
            Precision::F64 => infer::<f64>(a, Variant::Enhancement),
        },
        Command::Sr(a) => match a.precision {
            Precision::F32 => infer::<f32>(a, Variant::SuperResolution),
            Precision::F64 => infer::<f64>(a, Variant::SuperResolution),
        },
        Command::Inspect(a) => inspect(a),
        Command::MakeSrDataset(a) => make_sr_dataset(a),
    }
}

fn print_resolved(command: &str, value: Value) {
    eprintln!("resolved config: {}", json!({ "command": command, "config": value }));
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize to JSON")
}

/// Overlays `patch` onto `base`, rejecting keys `base` does not have.
fn merge_object(base: &mut Value, patch: &Value, section: &str) -> Result<()> {
    let (Some(base), Some(patch)) = (base.as_object_mut(), patch.as_object()) else {
        bail!("config section `{section}` must be a JSON object");
    };
    for (k, v) in patch {
        match base.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => bail!("unknown field `{k}` in config section `{section}`"),
        }
    }
    Ok(())
}

fn read_overrides(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let Value::Object(map) = value else {
        bail!("{}: expected a JSON object", path.display());
    };
    if let Some(k) = map.keys().find(|k| *k != "model" && *k != "train") {
        bail!("{}: unknown top-level key `{k}` (expected `model` and/or `train`)", path.display());
    }
    Ok(map)
}

/// Preset for `task`, then config-file overrides, then `--cbam-reduction`.
fn resolve_model(task: Variant, overrides: Option<&Map<String, Value>>, cbam_reduction: Option<usize>) -> Result<ModelConfig> {
    let mut value = to_value(&ModelConfig::preset(task));
    if let Some(patch) = overrides.and_then(|m| m.get("model")) {
        merge_object(&mut value, patch, "model")?;
    }
    let mut cfg: ModelConfig = serde_json::from_value(value).context("invalid model config")?;
    if cfg.variant != task {
        bail!("config sets model variant {:?} but the task is {:?}", cfg.variant, task);
    }
    if let Some(r) = cbam_reduction {
        cfg.cbam_reduction = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_train(a: &TrainArgs, overrides: Option<&Map<String, Value>>) -> Result<TrainConfig> {
    let task = Variant::from(a.task);
    let mut value = to_value(&TrainConfig::for_task(task));
    if let Some(patch) = overrides.and_then(|m| m.get("train")) {
        merge_object(&mut value, patch, "train")?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).context("invalid train config")?;
    if cfg.task != task {
        bail!("config sets train task {:?} but --task is {:?}", cfg.task, task);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lambda_ssim {
        cfg.lambda_ssim = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.out_dir = Some(a.out.clone());
    cfg.deterministic = a.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn load_split<T: Scalar>(root: &Path, task: Variant, split: Split) -> Result<Vec<ImagePair<T>>> {
    let spec = DatasetSpec {
        root: root.to_path_buf(),
        variant: task,
        split: Some(split),
    };
    load_paired_dataset(&spec).with_context(|| format!("loading {}", spec.dir().display()))
}

fn train<T: Scalar>(a: TrainArgs) -> Result<()> {
    let overrides = a.config.as_deref().map(read_overrides).transpose()?;
    let task = Variant::from(a.task);
    let cfg = resolve_train(&a, overrides.as_ref())?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            if overrides.as_ref().is_some_and(|m| m.contains_key("model")) || a.cbam_reduction.is_some() {
                bail!("model overrides cannot be combined with --resume; the checkpoint fixes the architecture");
            }
            Trainer::<T>::resume(ckpt, cfg)?
        }
        None => {
            let model_cfg = resolve_model(task, overrides.as_ref(), a.cbam_reduction)?;
            let model = DfnModel::<T>::build(model_cfg, &mut Rng::new(cfg.seed))?;
            Trainer::new(model, cfg)?
        }
    };
    print_resolved(
        "train",
        json!({
            "model": to_value(trainer.model.config()),
            "train": to_value(&trainer.cfg),
            "data": a.data,
            "resume": a.resume,
            "precision": a.precision,
        }),
    );
    let train_pairs = load_split::<T>(&a.data, task, Split::Train)?;
    let val_pairs = if a.data.join(Split::Val.dir_name()).is_dir() {
        load_split::<T>(&a.data, task, Split::Val)?
    } else {
        log::warn!("no {} split under {}; logging train metrics only", Split::Val.dir_name(), a.data.display());
        Vec::new()
    };
    let logs = trainer.run(&train_pairs, &val_pairs)?;
    if let Some(last) = logs.last() {
        println!("{}", MetricRecord::CSV_HEADER);
        println!("{}", last.train.csv_row(last.epoch, "train"));
        if let Some(v) = &last.val {
            println!("{}", v.csv_row(last.epoch, "val"));
        }
    }
    Ok(())
}

fn eval<T: Scalar>(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint::<T>(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let task = ckpt.model.variant();
    print_resolved(
        "eval",
        json!({
            "ckpt": a.ckpt,
            "data": a.data,
            "task": task,
            "lambda_ssim": a.lambda_ssim,
            "precision": a.precision,
        }),
    );
    let spec = DatasetSpec {
        root: a.data.clone(),
        variant: task,
        split: None,
    };
    let pairs = load_paired_dataset::<T>(&spec).with_context(|| format!("loading {}", a.data.display()))?;
    let rec = evaluate(&ckpt.model, &pairs, a.lambda_ssim, &SsimConfig::default())?;
    println!("psnr,ssim,mse,mae,hybrid");
    println!("{rec}");
    Ok(())
}

fn infer<T: Scalar>(a: InferArgs, expected: Variant) -> Result<()> {
    let ckpt = load_checkpoint::<T>(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let model = ckpt.model;
    if model.variant() != expected {
        bail!("{} holds a {:?} model, expected {:?}", a.ckpt.display(), model.variant(), expected);
    }
    print_resolved(
        if expected == Variant::Enhancement { "enhance" } else { "sr" },
        json!({ "ckpt": a.ckpt, "in": a.input, "out": a.output, "precision": a.precision }),
    );
    let img = load_png::<T>(&a.input)?;
    let s = img.shape();
    let padded = pad_to_multiple(&img, SIZE_MULTIPLE)?;
    let out = model.infer(&padded)?;
    let k = expected.scale();
    let out = crop(&out, s.h * k, s.w * k)?;
    if model.clamped_inputs() > 0 {
        log::warn!("{} input values were outside [0, 1] and clamped", model.clamped_inputs());
    }
    save_png(&out, &a.output)?;
    eprintln!("wrote {} ({}x{})", a.output.display(), s.w * k, s.h * k);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let model = match (&a.ckpt, a.preset) {
        (Some(path), _) => {
            print_resolved("inspect", json!({ "ckpt": path }));
            let ck = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(e) = ck.epoch {
                println!("checkpoint epoch: {e}");
            }
            ck.model
        }
        (None, Some(task)) => {
            let overrides = a.config.as_deref().map(read_overrides).transpose()?;
            let cfg = resolve_model(task.into(), overrides.as_ref(), a.cbam_reduction)?;
            print_resolved("inspect", json!({ "model": to_value(&cfg) }));
            DfnModel::<f32>::build(cfg, &mut Rng::new(0))?
        }
        (None, None) => unreachable!("clap requires --ckpt or --preset"),
    };
    println!("variant: {:?}", model.variant());
    println!("{}", model.count_parameters());
    Ok(())
}

fn make_sr_dataset(a: MakeSrArgs) -> Result<()> {
    let spec = BlurSpec::new(a.kernels.clone(), a.seed)?;
    let split = Split::from(a.split);
    print_resolved(
        "make-sr-dataset",
        json!({ "src": a.src, "dst": a.dst, "split": split, "kernels": spec.kernel_sizes, "seed": spec.seed }),
    );
    let mut sources: Vec<PathBuf> = fs::read_dir(&a.src)
        .with_context(|| format!("reading {}", a.src.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    sources.sort();
    if sources.is_empty() {
        bail!("no PNG files in {}", a.src.display());
    }
    let (low_name, high_name) = layout(Variant::SuperResolution);
    let split_dir = a.dst.join(split.dir_name());
    let (low_dir, high_dir) = (split_dir.join(low_name), split_dir.join(high_name));
    fs::create_dir_all(&low_dir)?;
    fs::create_dir_all(&high_dir)?;
    let mut rng = Rng::new(spec.seed);
    for path in &sources {
        let stem = path.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?;
        let high = load_png::<f32>(path)?;
        let pair = make_sr_pair(stem, &high, &spec, &mut rng).with_context(|| format!("processing {}", path.display()))?;
        save_png(&pair.input, &low_dir.join(format!("{stem}.png")))?;
        save_png(&pair.target, &high_dir.join(format!("{stem}.png")))?;
    }
    eprintln!("wrote {} pairs under {}", sources.len(), split_dir.display());
    Ok(())
}
