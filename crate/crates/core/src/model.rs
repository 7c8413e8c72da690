//! A trained segmenter: denoiser, frozen backbone and noise schedule bundled
//! under one configuration, plus dataset evaluation.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::SegmentationSample;
use crate::denoiser::{DenoiserConfig, UNet};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::features::{BackboneSpec, FrozenBackbone};
use crate::metrics::{confusion, BinaryMask, MetricsReport};
use crate::patcher::DEFAULT_PATCH_SIZE;
use crate::sampler::{segment, segment_patches, SamplerConfig, Segmentation};

/// The full model and its three reduced variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Without the feature mappers.
    A1,
    /// A1 without diffusion: the image maps straight to mask logits.
    A2,
    /// A2 without attention.
    A3,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::A1, Ablation::A2, Ablation::A3];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::A1 => "A1",
            Ablation::A2 => "A2",
            Ablation::A3 => "A3",
        }
    }

    /// `base` with the components this variant removes switched off.
    pub fn apply(&self, base: &DenoiserConfig) -> DenoiserConfig {
        let mut c = base.clone();
        c.use_mappers = *self == Ablation::Full;
        c.use_diffusion = matches!(self, Ablation::Full | Ablation::A1);
        c.use_attention = *self != Ablation::A3;
        c
    }

    pub fn is_diffusion(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::A1)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Ablation::Full),
            "a1" => Ok(Ablation::A1),
            "a2" => Ok(Ablation::A2),
            "a3" => Ok(Ablation::A3),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (expected full, A1, A2 or A3)"))),
        }
    }
}

/// Architecture of a segmenter. The denoiser flags are derived from
/// `ablation`, so `denoiser` only carries widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneSpec,
    pub patch_size: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            backbone: BackboneSpec::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    /// Denoiser configuration with the variant's flags and the backbone's
    /// channel counts filled in.
    pub fn resolved_denoiser(&self) -> DenoiserConfig {
        let mut c = self.ablation.apply(&self.denoiser);
        c.mapper_channels = self.backbone.channel_counts();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.resolved_denoiser();
        d.validate()?;
        if self.patch_size == 0 || self.patch_size % d.size_multiple() != 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 16 and of {}",
                self.patch_size,
                d.size_multiple()
            )));
        }
        self.schedule.build()?;
        Ok(())
    }
}

/// Denoiser plus everything needed to turn an image into a mask.
pub struct Segmenter {
    config: ModelConfig,
    unet: UNet,
    backbone: Option<Box<dyn FrozenBackbone>>,
    schedule: NoiseSchedule,
}

impl std::fmt::Debug for Segmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Segmenter").field("config", &self.config).finish()
    }
}

impl Segmenter {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let unet = UNet::new(config.resolved_denoiser(), seed, dtype)?;
        let backbone = if unet.config().use_mappers {
            Some(config.backbone.build()?)
        } else {
            None
        };
        let schedule = config.schedule.build()?;
        Ok(Self {
            config,
            unet,
            backbone,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn backbone(&self) -> Option<&dyn FrozenBackbone> {
        self.backbone.as_deref()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Segments a `[3, H, W]` image in `[0, 1]`. Diffusion variants sample
    /// with `sampler`; direct variants map logits `z` to `tanh(z / 2)`, which
    /// is `2 sigmoid(z) - 1`, and only use the threshold.
    pub fn segment(&self, image: &Tensor, sampler: &SamplerConfig) -> Result<Segmentation> {
        let p = self.config.patch_size;
        if self.unet.config().use_diffusion {
            segment(&self.unet, image, self.backbone(), &self.schedule, sampler, p)
        } else {
            segment_patches(image, self.backbone(), p, sampler, |batch, pyramid, _| {
                let logits = self.unet.forward(None, &[], batch, pyramid.as_ref())?;
                Ok((logits * 0.5)?.tanh()?.to_dtype(DType::F32)?)
            })
        }
    }
}

/// Per-image and micro-averaged scores of `segmenter` on `samples`.
pub fn evaluate(segmenter: &Segmenter, samples: &[SegmentationSample], sampler: &SamplerConfig) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let seg = segmenter.segment(&s.image, sampler)?;
        let gt = ground_truth(s)?;
        per_image.push((s.id.clone(), confusion(&seg.binary, &gt)?));
    }
    MetricsReport::aggregate(per_image)
}

/// Foreground mask of a sample.
pub fn ground_truth(sample: &SegmentationSample) -> Result<BinaryMask> {
    BinaryMask::from_tensor(&sample.mask.squeeze(0)?, 0.0)
}
