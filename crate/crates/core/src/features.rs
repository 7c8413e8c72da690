//! Frozen convolutional backbones producing a three-level feature pyramid
//! (strides 4, 8 and 16) of the conditioning image.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Strides of the three pyramid levels relative to the input.
pub const PYRAMID_STRIDES: [usize; 3] = [4, 8, 16];

/// Input dimensions must be multiples of this.
pub const INPUT_MULTIPLE: usize = 16;

/// Per-channel statistics of the backbones' pretraining corpus (ImageNet).
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Three frozen feature maps, `[B, C_k, H / s_k, W / s_k]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn channel_counts(&self) -> Result<[usize; 3]> {
        Ok([
            self.levels[0].dim(1)?,
            self.levels[1].dim(1)?,
            self.levels[2].dim(1)?,
        ])
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.levels[0].dim(0)?)
    }

    /// Selects batch rows, e.g. to assemble a training batch from a cache.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(
            rows.iter().map(|&r| r as u32).collect::<Vec<_>>(),
            rows.len(),
            self.levels[0].device(),
        )?;
        let pick = |t: &Tensor| t.index_select(&idx, 0);
        Ok(Self {
            levels: [
                pick(&self.levels[0])?,
                pick(&self.levels[1])?,
                pick(&self.levels[2])?,
            ],
        })
    }

    pub fn cat(parts: &[FeaturePyramid]) -> Result<Self> {
        let level = |k: usize| -> Result<Tensor> {
            let v: Vec<&Tensor> = parts.iter().map(|p| &p.levels[k]).collect();
            Ok(Tensor::cat(&v, 0)?)
        };
        Ok(Self {
            levels: [level(0)?, level(1)?, level(2)?],
        })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            levels: [
                self.levels[0].zeros_like()?,
                self.levels[1].zeros_like()?,
                self.levels[2].zeros_like()?,
            ],
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            levels: [
                self.levels[0].to_dtype(dtype)?,
                self.levels[1].to_dtype(dtype)?,
                self.levels[2].to_dtype(dtype)?,
            ],
        })
    }
}

/// A pretrained or randomly initialized network whose weights never change.
pub trait FrozenBackbone: Send + Sync {
    fn channel_counts(&self) -> [usize; 3];

    /// Runs the network on an already normalized `[B, 3, H, W]` batch.
    fn features(&self, normalized: &Tensor) -> Result<[Tensor; 3]>;

    /// Digest of every weight, used to verify the backbone stays frozen.
    fn fingerprint(&self) -> String;
}

/// Validates and normalizes a raw `[0, 1]` RGB batch, then extracts its pyramid.
pub fn extract(image: &Tensor, backbone: &dyn FrozenBackbone) -> Result<FeaturePyramid> {
    let (_, c, h, w) = image
        .dims4()
        .map_err(|_| Error::Shape(format!("expected [B, 3, H, W] image, got {:?}", image.dims())))?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
    }
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not a multiple of {INPUT_MULTIPLE}"
        )));
    }
    let dev = image.device();
    let mean = Tensor::new(&INPUT_MEAN, dev)?.to_dtype(DType::F32)?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&INPUT_STD, dev)?.to_dtype(DType::F32)?.reshape((1, 3, 1, 1))?;
    let normalized = image
        .detach()
        .to_dtype(DType::F32)?
        .broadcast_sub(&mean)?
        .broadcast_div(&std)?;
    let levels = backbone.features(&normalized)?;
    for (k, level) in levels.iter().enumerate() {
        let (_, _, lh, lw) = level.dims4()?;
        if (lh, lw) != (h / PYRAMID_STRIDES[k], w / PYRAMID_STRIDES[k]) {
            return Err(Error::Shape(format!(
                "backbone level {} produced {lh}x{lw} for a {h}x{w} input",
                k + 1
            )));
        }
    }
    Ok(FeaturePyramid {
        levels: levels.map(|t| t.detach()),
    })
}

/// Serializable choice of backbone, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Small randomly initialized strided encoder; needs no weight file.
    RandomConv { seed: u64, channels: [usize; 3] },
    /// Wide residual network loaded from a safetensors file with torchvision
    /// parameter names; the pyramid taps the first three residual stages.
    WideResNet {
        weights: PathBuf,
        blocks: [usize; 3],
        width_per_group: usize,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::RandomConv {
            seed: 0,
            channels: [16, 32, 64],
        }
    }
}

impl BackboneSpec {
    /// The configuration of a torchvision `wide_resnet50_2`.
    pub fn wide_resnet50(weights: impl Into<PathBuf>) -> Self {
        BackboneSpec::WideResNet {
            weights: weights.into(),
            blocks: [3, 4, 6],
            width_per_group: 128,
        }
    }

    pub fn channel_counts(&self) -> [usize; 3] {
        match self {
            BackboneSpec::RandomConv { channels, .. } => *channels,
            BackboneSpec::WideResNet { .. } => [256, 512, 1024],
        }
    }

    pub fn build(&self) -> Result<Box<dyn FrozenBackbone>> {
        Ok(match self {
            BackboneSpec::RandomConv { seed, channels } => {
                Box::new(RandomConvEncoder::new(*seed, *channels)?)
            }
            BackboneSpec::WideResNet {
                weights,
                blocks,
                width_per_group,
            } => Box::new(WideResNet::load(weights, *blocks, *width_per_group)?),
        })
    }
}

fn digest(named: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        if let Ok(values) = t.flatten_all().and_then(|f| f.to_dtype(DType::F32)?.to_vec1::<f32>()) {
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
    }
    format!("{:x}", h.finalize())
}

/// Four strided 3x3 convolutions with ReLU; levels tap after the second,
/// third and fourth.
pub struct RandomConvEncoder {
    convs: [Conv2d; 4],
    weights: Vec<(String, Tensor)>,
    channels: [usize; 3],
}

impl RandomConvEncoder {
    pub fn new(seed: u64, channels: [usize; 3]) -> Result<Self> {
        if channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = channels[0].div_ceil(2).max(4);
        let widths = [(3, stem), (stem, channels[0]), (channels[0], channels[1]), (channels[1], channels[2])];
        let mut weights = Vec::new();
        let mut convs = Vec::new();
        for (i, (cin, cout)) in widths.into_iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            // He-uniform keeps post-ReLU activations at unit scale.
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f32> = (0..cout * cin * 9)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            let w = Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?;
            let b = Tensor::zeros(cout, DType::F32, &Device::Cpu)?;
            weights.push((format!("conv{i}.weight"), w.clone()));
            convs.push(Conv2d::from_tensors(w, Some(b), 2, 1));
        }
        let convs: [Conv2d; 4] = convs.try_into().map_err(|_| Error::Config("encoder depth".into()))?;
        Ok(Self {
            convs,
            weights,
            channels,
        })
    }
}

impl FrozenBackbone for RandomConvEncoder {
    fn channel_counts(&self) -> [usize; 3] {
        self.channels
    }

    fn features(&self, normalized: &Tensor) -> Result<[Tensor; 3]> {
        let x = self.convs[0].forward(normalized)?.relu()?;
        let l1 = self.convs[1].forward(&x)?.relu()?;
        let l2 = self.convs[2].forward(&l1)?.relu()?;
        let l3 = self.convs[3].forward(&l2)?.relu()?;
        Ok([l1, l2, l3])
    }

    fn fingerprint(&self) -> String {
        let named: Vec<(String, &Tensor)> = self.weights.iter().map(|(n, t)| (n.clone(), t)).collect();
        digest(&named)
    }
}

struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    downsample: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.reduce.forward(x)?.relu()?;
        let h = self.spatial.forward(&h)?.relu()?;
        let h = self.expand.forward(&h)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

/// Bottleneck residual network (torchvision layout) truncated after its
/// third stage. Batch-norm statistics are folded into the convolutions.
pub struct WideResNet {
    stem: Conv2d,
    stages: [Vec<Bottleneck>; 3],
    fingerprint: String,
}

const BN_EPS: f64 = 1e-5;

fn fetch<'a>(weights: &'a HashMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    weights
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("backbone weights missing {name}")))
}

/// Folds `bn(conv(x))` into a single biased convolution.
fn folded_conv(
    weights: &HashMap<String, Tensor>,
    conv: &str,
    bn: &str,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let w = fetch(weights, &format!("{conv}.weight"))?.to_dtype(DType::F32)?;
    let gamma = fetch(weights, &format!("{bn}.weight"))?.to_dtype(DType::F32)?;
    let beta = fetch(weights, &format!("{bn}.bias"))?.to_dtype(DType::F32)?;
    let mean = fetch(weights, &format!("{bn}.running_mean"))?.to_dtype(DType::F32)?;
    let var = fetch(weights, &format!("{bn}.running_var"))?.to_dtype(DType::F32)?;
    let scale = (gamma / (var + BN_EPS)?.sqrt()?)?;
    let w = w.broadcast_mul(&scale.reshape(((), 1, 1, 1))?)?;
    let b = (beta - (mean * &scale)?)?;
    Ok(Conv2d::from_tensors(w, Some(b), stride, padding))
}

impl WideResNet {
    pub fn load(path: &Path, blocks: [usize; 3], width_per_group: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let weights = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        Self::from_weights(&weights, blocks, width_per_group, format!("{:x}", h.finalize()))
    }

    pub fn from_weights(
        weights: &HashMap<String, Tensor>,
        blocks: [usize; 3],
        width_per_group: usize,
        fingerprint: String,
    ) -> Result<Self> {
        let stem = folded_conv(weights, "conv1", "bn1", 2, 3)?;
        let mut stages: [Vec<Bottleneck>; 3] = Default::default();
        for (s, stage) in stages.iter_mut().enumerate() {
            let planes = 64usize << s;
            let width = planes * width_per_group / 64;
            for b in 0..blocks[s] {
                let p = format!("layer{}.{b}", s + 1);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let downsample = if b == 0 {
                    Some(folded_conv(weights, &format!("{p}.downsample.0"), &format!("{p}.downsample.1"), stride, 0)?)
                } else {
                    None
                };
                let block = Bottleneck {
                    reduce: folded_conv(weights, &format!("{p}.conv1"), &format!("{p}.bn1"), 1, 0)?,
                    spatial: folded_conv(weights, &format!("{p}.conv2"), &format!("{p}.bn2"), stride, 1)?,
                    expand: folded_conv(weights, &format!("{p}.conv3"), &format!("{p}.bn3"), 1, 0)?,
                    downsample,
                };
                if block.reduce.out_channels() != width || block.expand.out_channels() != planes * 4 {
                    return Err(Error::Checkpoint(format!(
                        "{p}: widths {}/{} do not match width_per_group {width_per_group}",
                        block.reduce.out_channels(),
                        block.expand.out_channels()
                    )));
                }
                stage.push(block);
            }
        }
        Ok(Self {
            stem,
            stages,
            fingerprint,
        })
    }
}

impl FrozenBackbone for WideResNet {
    fn channel_counts(&self) -> [usize; 3] {
        [256, 512, 1024]
    }

    fn features(&self, normalized: &Tensor) -> Result<[Tensor; 3]> {
        let x = self.stem.forward(normalized)?.relu()?;
        // Zero padding is equivalent to -inf padding after the ReLU.
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        let mut out = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            out.push(x.clone());
        }
        out.try_into()
            .map_err(|_| Error::Shape("backbone stage count".into()))
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
