//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (missing or malformed inputs), 4 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    assert_disjoint, generate_synthetic, list_images, load_dataset, load_image, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{evaluate, Ablation, ModelConfig, Segmenter};
use crate::report::{continuous_image, mask_image, overlay, tensor_to_rgb, write_score_plots};
use crate::sampler::{SamplerConfig, SamplerMethod};
use crate::trainer::{run_training, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "DIFFSEG_OUTPUT_ROOT";
pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Digest of the crate sources, computed at build time.
pub const SOURCE_HASH: &str = env!("DIFFSEG_SOURCE_HASH");

#[derive(Debug, Parser)]
#[command(name = "diffseg", version, about = "Diffusion-based binary image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image/mask corpus.
    PrepareSynthetic(PrepareArgs),
    /// Train a model (resumes if the output directory holds a checkpoint).
    Train(TrainArgs),
    /// Segment one image or a directory of images.
    Segment(SegmentArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate the full model and its reduced variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, default_value_t = 250)]
    pub count: usize,
    /// HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOverrides {
    /// TOML file with `[model]`, `[train]` and `[data]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resize every sample to HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplerArgs {
    /// Denoiser evaluations per patch.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// `ode` or `ancestral`.
    #[arg(long, default_value = "ode")]
    pub sampler: SamplerMethod,
    #[arg(long, default_value_t = 16)]
    pub patch_batch: usize,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            method: self.sampler,
            num_steps: self.steps,
            seed: Some(self.seed),
            threshold: self.threshold,
            patch_batch: self.patch_batch,
        }
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<(usize, usize)>,
    /// Seed of the random split used when the corpus has none.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of full,A1,A2,A3.
    #[arg(long, value_delimiter = ',', default_values_t = Ablation::ALL.to_vec())]
    pub variants: Vec<Ablation>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err(format!("size `{s}` must be positive"));
    }
    Ok((h, w))
}

/// Dataset options of a run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `[height, width]` samples are resized to.
    pub resize: Option<[usize; 2]>,
    /// Seed of the random train/test split used when the corpus has none.
    pub split_seed: u64,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// The file (if any) with command-line overrides applied on top.
    pub fn resolve(overrides: &TrainOverrides) -> Result<Self> {
        let mut config = match &overrides.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config file {}: {e}", path.display()))
                })?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let t = &mut config.train;
        if let Some(a) = overrides.ablation {
            t.ablation = a;
        }
        if let Some(v) = overrides.max_steps {
            t.max_steps = v;
        }
        if let Some(v) = overrides.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = overrides.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = overrides.checkpoint_every {
            t.checkpoint_every = v;
        }
        if let Some(v) = overrides.seed {
            t.seed = v;
        }
        if let Some((h, w)) = overrides.resize {
            config.data.resize = Some([h, w]);
        }
        config.model.ablation = config.train.ablation;
        config.train.validate()?;
        config.model.validate()?;
        Ok(config)
    }

    pub fn target_size(&self) -> Option<(usize, usize)> {
        self.data.resize.map(|[h, w]| (h, w))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Hash of the sources and the resolved configuration of a run.
pub fn content_hash(config_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(SOURCE_HASH.as_bytes());
    h.update([0]);
    h.update(config_text.as_bytes());
    format!("{:x}", h.finalize())
}

/// Record of one command invocation, written to every output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: String,
    pub content_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand={}", self.subcommand);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "source_hash={SOURCE_HASH}");
        let _ = writeln!(s, "content_hash={}", self.content_hash);
        let _ = writeln!(s, "started_unix={}", self.started_unix);
        let _ = writeln!(s, "finished_unix={}", self.finished_unix);
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        for line in self.config.lines() {
            let _ = writeln!(s, "config={line}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        std::fs::write(&path, self.to_key_values()).map_err(|e| Error::io(&path, e))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn output_dir(out: &Option<PathBuf>, subcommand: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(subcommand)
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn finish(subcommand: &str, config: String, started: u64, dir: &Path, mut outputs: Vec<PathBuf>) -> Result<()> {
    outputs.sort();
    RunManifest {
        subcommand: subcommand.into(),
        content_hash: content_hash(&config),
        config,
        started_unix: started,
        finished_unix: unix_now(),
        outputs,
    }
    .write(dir)
}

/// Class of an error for the exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Shape(_) | Error::Range(_) => EXIT_DATA,
        Error::Checkpoint(_) | Error::NonFiniteLoss { .. } | Error::Tensor(_) => EXIT_RUNTIME,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::PrepareSynthetic(a) => prepare_synthetic(a).map(|_| ()),
        Command::Train(a) => train(a).map(|_| ()),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a).map(|_| ()),
        Command::Ablate(a) => ablate(a),
    }
}

pub fn prepare_synthetic(args: &PrepareArgs) -> Result<PathBuf> {
    let started = unix_now();
    let dir = output_dir(&args.out, "prepare-synthetic")?;
    let (h, w) = args.size;
    generate_synthetic(&dir, args.count, (h, w), args.seed)?;
    let config = format!("count={}\nsize={h}x{w}\nseed={}\n", args.count, args.seed);
    finish("prepare-synthetic", config, started, &dir, vec![dir.join("images"), dir.join("masks")])?;
    info!("wrote {} samples to {}", args.count, dir.display());
    Ok(dir)
}

/// Trains into `dir` and returns the final checkpoint.
fn train_into(config: &RunConfig, data: &Path, dir: &Path) -> Result<PathBuf> {
    let started = unix_now();
    let text = config.to_toml()?;
    let snapshot = dir.join(RESOLVED_CONFIG);
    std::fs::write(&snapshot, &text).map_err(|e| Error::io(&snapshot, e))?;
    let train = DatasetManifest::discover(data, Split::Train, config.target_size(), config.data.split_seed)?;
    if let Ok(test) = DatasetManifest::discover(data, Split::Test, config.target_size(), config.data.split_seed) {
        assert_disjoint(&train, &test)?;
    }
    train.write(&dir.join("train_manifest.txt"))?;
    let outcome = run_training(&config.model, &config.train, &train, dir)?;
    finish(
        "train",
        text,
        started,
        dir,
        vec![outcome.checkpoint.clone(), outcome.log.clone(), snapshot],
    )?;
    println!("checkpoint={}", outcome.checkpoint.display());
    Ok(outcome.checkpoint)
}

pub fn train(args: &TrainArgs) -> Result<PathBuf> {
    let config = RunConfig::resolve(&args.overrides)?;
    let dir = output_dir(&args.out, "train")?;
    train_into(&config, &args.data, &dir)
}

fn load_model(path: &Path) -> Result<Segmenter> {
    Checkpoint::load(path)?.segmenter(DType::F32)
}

fn image_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let found: Vec<(String, PathBuf)> = list_images(input)?.into_iter().collect();
        if found.is_empty() {
            return Err(Error::Data(format!("no images in {}", input.display())));
        }
        Ok(found)
    } else if input.is_file() {
        let id = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("cannot name output for {}", input.display())))?;
        Ok(vec![(id.to_string(), input.to_path_buf())])
    } else {
        Err(Error::Data(format!("{} does not exist", input.display())))
    }
}

pub fn segment(args: &SegmentArgs) -> Result<()> {
    let started = unix_now();
    let model = load_model(&args.checkpoint)?;
    let dir = output_dir(&args.out, "segment")?;
    let sampler = args.sampler.config();
    let mut outputs = Vec::new();
    let mut timings = String::new();
    for (id, path) in image_inputs(&args.input)? {
        let image = load_image(&path, args.resize)?;
        let clock = Instant::now();
        let seg = model.segment(&image, &sampler)?;
        let seconds = clock.elapsed().as_secs_f64();
        let _ = writeln!(timings, "{id}={seconds:.4}");
        info!("{id}: {seconds:.3} s");
        let files = [
            (format!("{id}_mask.png"), image::DynamicImage::from(mask_image(&seg.binary))),
            (format!("{id}_continuous.png"), continuous_image(&seg.continuous)?.into()),
            (format!("{id}_overlay.png"), overlay(&tensor_to_rgb(&image)?, &seg.binary)?.into()),
        ];
        for (name, img) in files {
            let p = dir.join(name);
            img.save(&p).map_err(|e| Error::image(&p, e))?;
            outputs.push(p);
        }
    }
    let timing_path = dir.join("timings.txt");
    std::fs::write(&timing_path, timings).map_err(|e| Error::io(&timing_path, e))?;
    let config = format!(
        "checkpoint={}\ninput={}\nsampler={:?}\n",
        args.checkpoint.display(),
        args.input.display(),
        sampler
    );
    finish("segment", config, started, &dir, outputs)
}

fn eval_into(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    resize: Option<(usize, usize)>,
    split_seed: u64,
    sampler: &SamplerConfig,
    dir: &Path,
) -> Result<MetricsReport> {
    let started = unix_now();
    let model = load_model(checkpoint)?;
    let manifest = DatasetManifest::discover(data, split, resize, split_seed)?;
    if manifest.files.is_empty() {
        return Err(Error::Data(format!("the {} split of {} is empty", split.as_str(), data.display())));
    }
    let samples = load_dataset(&manifest)?;
    let report = evaluate(&model, &samples, sampler)?;
    report.write(dir)?;
    write_score_plots(&report, dir)?;
    let config = format!(
        "checkpoint={}\ndata={}\nsplit={}\nsampler={sampler:?}\n",
        checkpoint.display(),
        data.display(),
        split.as_str()
    );
    finish(
        "eval",
        config,
        started,
        dir,
        ["metrics.txt", "metrics_table.txt", "iou_histogram.png", "f1_histogram.png"]
            .iter()
            .map(|f| dir.join(f))
            .collect(),
    )?;
    print!("{}", report.to_table());
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let dir = output_dir(&args.out, "eval")?;
    eval_into(
        &args.checkpoint,
        &args.data,
        args.split,
        args.resize,
        args.split_seed,
        &args.sampler.config(),
        &dir,
    )
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let started = unix_now();
    let base = RunConfig::resolve(&args.overrides)?;
    let dir = output_dir(&args.out, "ablate")?;
    let sampler = args.sampler.config();
    let mut table = format!("{:<8}{:>12}{:>10}{:>10}\n", "variant", "parameters", "IoU (%)", "F1 (%)");
    let mut outputs = Vec::new();
    for variant in &args.variants {
        let mut config = base.clone();
        config.train.ablation = *variant;
        config.model.ablation = *variant;
        let run_dir = dir.join(variant.as_str());
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let ckpt = train_into(&config, &args.data, &run_dir)?;
        let eval_dir = run_dir.join("eval");
        std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
        let report = eval_into(
            &ckpt,
            &args.data,
            Split::Test,
            config.target_size(),
            config.data.split_seed,
            &sampler,
            &eval_dir,
        )?;
        let params = Segmenter::new(config.model.clone(), 0, DType::F32)?.unet().num_parameters();
        let _ = writeln!(
            table,
            "{:<8}{:>12}{:>10.2}{:>10.2}",
            variant.as_str(),
            params,
            100.0 * report.iou,
            100.0 * report.f1
        );
        outputs.push(eval_dir.join("metrics.txt"));
    }
    let path = dir.join("ablation_table.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    outputs.push(path);
    print!("{table}");
    finish("ablate", base.to_toml()?, started, &dir, outputs)
}
