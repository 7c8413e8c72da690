//! Optimization loop: AdamW on the denoising objective (or pixelwise
//! cross-entropy for the direct variants), checkpointing, resumption and
//! periodic validation.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, latest_checkpoint, Checkpoint, CheckpointHeader, OptimizerState, FORMAT_VERSION};
use crate::data::{load_dataset, Batch, Batcher, DatasetManifest, SegmentationSample};
use crate::diffusion::{denoising_loss, Conditioning};
use crate::error::{Error, Result};
use crate::features::{extract, FeaturePyramid, FrozenBackbone};
use crate::metrics::MetricsReport;
use crate::model::{evaluate, Ablation, ModelConfig, Segmenter};
use crate::nn::ParamStore;
use crate::sampler::SamplerConfig;

pub const LOG_FILE: &str = "train_log.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const LOSS_HISTORY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero at `max_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub ablation: Ablation,
    /// Seeds initialization, data order and the per-step noise draws.
    pub seed: u64,
    /// Training images held out for validation.
    pub validation_samples: usize,
    /// ODE steps used by validation.
    pub validation_steps: usize,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 1000,
            batch_size: 8,
            checkpoint_every: 250,
            ablation: Ablation::Full,
            seed: 0,
            validation_samples: 8,
            validation_steps: 5,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate", "must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return field("weight_decay", "must be a finite non-negative number");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return field(name, "must lie in (0, 1)");
            }
        }
        if !(self.eps > 0.0) {
            return field("eps", "must be positive");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return field("checkpoint_every", "must be at least 1");
        }
        if self.validation_steps == 0 {
            return field("validation_steps", "must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return field("grad_clip", "must be positive");
            }
        }
        Ok(())
    }

    /// Learning rate used for the update taking the run from `step` to `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let span = self.max_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam, updating in the same order as PyTorch's
/// `AdamW`: decay, moment updates, bias-corrected step.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    state: OptimizerState,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_state(state: OptimizerState) -> Self {
        Self { state }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies update number `t` (1-based) with rate `lr`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, t: u64, lr: f64, config: &TrainConfig) -> Result<()> {
        let bc1 = 1.0 - config.beta1.powi(t as i32);
        let bc2_sqrt = (1.0 - config.beta2.powi(t as i32)).sqrt();
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor();
            let m = match self.state.first.get(name) {
                Some(m) => m.clone(),
                None => p.zeros_like()?,
            };
            let v = match self.state.second.get(name) {
                Some(v) => v.clone(),
                None => p.zeros_like()?,
            };
            let decayed = (p * (1.0 - lr * config.weight_decay))?;
            let m = ((m * config.beta1)? + (g * (1.0 - config.beta1))?)?;
            let v = ((v * config.beta2)? + (g.sqr()? * (1.0 - config.beta2))?)?;
            let denom = ((v.sqrt()? / bc2_sqrt)? + config.eps)?;
            let update = ((&m / denom)? * (lr / bc1))?;
            var.set(&(decayed - update)?)?;
            self.state.first.insert(name.clone(), m);
            self.state.second.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Numerically stable mean of `max(z, 0) - z y + log(1 + exp(-|z|))` with
/// targets `y` in `{0, 1}`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + soft)?.mean_all()?)
}

fn global_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sum = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sum += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sum.sqrt())
}

/// Precomputed pyramids of every patch the batcher serves; the backbone is
/// frozen so they never change.
#[derive(Debug, Clone)]
pub struct PyramidCache {
    pyramids: FeaturePyramid,
}

impl PyramidCache {
    pub fn build(batcher: &Batcher, backbone: &dyn FrozenBackbone) -> Result<Self> {
        let images = batcher.patch_images();
        let n = images.dim(0)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = 32.min(n - start);
            parts.push(extract(&images.narrow(0, start, len)?, backbone)?);
            start += len;
        }
        Ok(Self {
            pyramids: FeaturePyramid::cat(&parts)?,
        })
    }

    pub fn get(&self, patch_ids: &[usize]) -> Result<FeaturePyramid> {
        self.pyramids.select(patch_ids)
    }
}

/// Timesteps and noise of one training step, derived from the run seed and
/// the step index alone so resumed runs draw the same values.
pub fn step_draws(seed: u64, step: u64, batch: usize, num_steps: usize, shape: &[usize]) -> Result<(Vec<usize>, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D1FF_0000_0001);
    rng.set_stream(step);
    let timesteps = (0..batch).map(|_| rng.random_range(1..=num_steps)).collect();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok((timesteps, Tensor::from_vec(noise, shape, &candle_core::Device::Cpu)?))
}

/// Model, optimizer and step counter.
pub struct Trainer {
    model: Segmenter,
    optimizer: AdamW,
    config: TrainConfig,
    step: u64,
    recent: VecDeque<f64>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).field("config", &self.config).finish()
    }
}

impl Trainer {
    /// Fresh model of the variant named in `config`.
    pub fn new(model: ModelConfig, config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let model = ModelConfig {
            ablation: config.ablation,
            ..model
        };
        Ok(Self {
            model: Segmenter::new(model, config.seed, dtype)?,
            optimizer: AdamW::new(),
            config,
            step: 0,
            recent: VecDeque::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.header.train.validate()?;
        Ok(Self {
            model: ckpt.segmenter(dtype)?,
            optimizer: AdamW::from_state(ckpt.optimizer.clone()),
            config: ckpt.header.train.clone(),
            step: ckpt.header.step,
            recent: ckpt.header.recent_losses.iter().copied().collect(),
        })
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                step: self.step,
                model: self.model.config().clone(),
                train: self.config.clone(),
                backbone_fingerprint: self.model.backbone().map(|b| b.fingerprint()),
                recent_losses: self.recent.iter().copied().collect(),
            },
            params: self.model.unet().params().snapshot()?,
            optimizer: self.optimizer.state().clone(),
        })
    }

    /// Loss of the current parameters on `batch` with this step's draws.
    pub fn loss(&self, batch: &Batch, pyramid: Option<&FeaturePyramid>) -> Result<Tensor> {
        let unet = self.model.unet();
        let dtype = unet.params().dtype();
        let masks = batch.masks.to_dtype(dtype)?;
        let images = batch.images.to_dtype(dtype)?;
        if unet.config().use_diffusion {
            let (timesteps, noise) = step_draws(
                self.config.seed,
                self.step,
                masks.dim(0)?,
                self.model.schedule().num_steps(),
                masks.dims(),
            )?;
            let cond = Conditioning {
                image: images,
                pyramid: pyramid.cloned(),
            };
            denoising_loss(unet, &masks, &cond, &timesteps, &noise.to_dtype(dtype)?, self.model.schedule())
        } else {
            let logits = unet.forward(None, &[], &images, pyramid)?;
            bce_with_logits(&logits, &((masks + 1.0)? * 0.5)?)
        }
    }

    /// One optimizer update; returns the loss before the update.
    pub fn train_step(&mut self, batch: &Batch, pyramid: Option<&FeaturePyramid>) -> Result<f64> {
        let loss = self.loss(batch, pyramid)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let lr = self.config.lr_at(self.step);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                lr,
                loss: value,
                recent: self.recent.iter().copied().collect(),
            });
        }
        let mut grads = loss.backward()?;
        if let Some(clip) = self.config.grad_clip {
            let params = self.model.unet().params();
            let norm = global_norm(params, &grads)?;
            if norm > clip {
                let scale = clip / norm;
                for (_, var) in params.iter() {
                    if let Some(g) = grads.get(var.as_tensor()) {
                        let scaled = (g * scale)?;
                        grads.insert(var.as_tensor(), scaled);
                    }
                }
            }
        }
        self.step += 1;
        self.optimizer
            .step(self.model.unet().params(), &grads, self.step, lr, &self.config)?;
        self.recent.push_back(value);
        while self.recent.len() > LOSS_HISTORY {
            self.recent.pop_front();
        }
        Ok(value)
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_step: u64,
    pub last_validation: Option<MetricsReport>,
}

/// Splits `samples` into (training, validation): a seeded choice of
/// `count` samples is held out, order within each part is by id.
pub fn hold_out(mut samples: Vec<SegmentationSample>, count: usize, seed: u64) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    if count >= samples.len() && count > 0 {
        return Err(Error::Config(format!(
            "validation_samples ({count}) leaves no training data out of {} samples",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: std::collections::BTreeSet<usize> = order[..count].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.drain(..).enumerate() {
        if held.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

fn validation_sampler(config: &TrainConfig) -> SamplerConfig {
    SamplerConfig::ode(config.validation_steps, config.seed)
}

/// Keeps the log lines whose step does not exceed `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|line| {
            line.split_whitespace()
                .next()
                .and_then(|f| f.strip_prefix("step="))
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains on the samples of `manifest`, writing checkpoints and a
/// line-per-record log to `output_dir`. If `output_dir` already holds
/// checkpoints of the same configuration, training resumes from the latest.
pub fn run_training(
    model: &ModelConfig,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    output_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ckpt_dir = output_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = output_dir.join(LOG_FILE);

    let mut trainer = match latest_checkpoint(&ckpt_dir)? {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            let expected = ModelConfig {
                ablation: config.ablation,
                ..model.clone()
            };
            if ckpt.header.model != expected || !same_run(&ckpt.header.train, config) {
                return Err(Error::Checkpoint(format!(
                    "{} belongs to a run with a different configuration; use a fresh output directory",
                    path.display()
                )));
            }
            info!("resuming from {} at step {}", path.display(), ckpt.header.step);
            let mut t = Trainer::from_checkpoint(&ckpt, DType::F32)?;
            t.config.max_steps = config.max_steps;
            t
        }
        None => Trainer::new(model.clone(), config.clone(), DType::F32)?,
    };
    truncate_log(&log_path, trainer.step())?;

    let samples = load_dataset(manifest)?;
    let (train, val) = hold_out(samples, config.validation_samples, config.seed)?;
    let batcher = Batcher::new(&train, config.batch_size, model.patch_size, config.seed)?;
    let fingerprint = trainer.model().backbone().map(|b| b.fingerprint());
    let cache = match trainer.model().backbone() {
        Some(b) => Some(PyramidCache::build(&batcher, b)?),
        None => None,
    };

    let mut latest = checkpoint_path(&ckpt_dir, trainer.step());
    if trainer.step() == 0 && !latest.is_file() {
        trainer.checkpoint()?.save(&latest)?;
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut last_validation = None;
    while trainer.step() < config.max_steps {
        let batch = batcher.batch(trainer.step())?;
        let pyramid = match &cache {
            Some(c) => Some(c.get(&batch.patch_ids)?),
            None => None,
        };
        let lr = trainer.config().lr_at(trainer.step());
        let loss = trainer.train_step(&batch, pyramid.as_ref())?;
        let step = trainer.step();
        writeln!(log, "step={step} loss={loss:.6e} lr={lr:.6e}").map_err(|e| Error::io(&log_path, e))?;
        if step % config.checkpoint_every == 0 || step == config.max_steps {
            latest = checkpoint_path(&ckpt_dir, step);
            trainer.checkpoint()?.save(&latest)?;
            if !val.is_empty() {
                let report = evaluate(trainer.model(), &val, &validation_sampler(config))?;
                writeln!(log, "step={step} val_iou={:.6} val_f1={:.6}", report.iou, report.f1)
                    .map_err(|e| Error::io(&log_path, e))?;
                info!("step {step}: loss {loss:.4e}, validation IoU {:.4}, F1 {:.4}", report.iou, report.f1);
                last_validation = Some(report);
            } else {
                info!("step {step}: loss {loss:.4e}");
            }
        }
    }
    if trainer.model().backbone().map(|b| b.fingerprint()) != fingerprint {
        return Err(Error::Checkpoint("backbone weights changed during training".into()));
    }
    Ok(TrainOutcome {
        checkpoint: latest,
        log: log_path,
        final_step: trainer.step(),
        last_validation,
    })
}

/// Whether two configurations describe the same run up to its length.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig {
        max_steps: 0,
        ..a.clone()
    } == TrainConfig {
        max_steps: 0,
        ..b.clone()
    }
}

/// Parameter tensors as raw bytes, for bit-exact comparisons.
pub fn parameter_bytes(model: &Segmenter) -> Result<BTreeMap<String, Vec<u8>>> {
    model
        .unet()
        .params()
        .snapshot()?
        .into_iter()
        .map(|(k, t)| {
            let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            Ok((k, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        })
        .collect()
}
