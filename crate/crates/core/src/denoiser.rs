//! Conditional UNet denoiser.
//!
//! The network reads the RGB image concatenated with the noisy mask, is told
//! the timestep through a sinusoidal embedding added inside every residual
//! block, and receives the frozen feature pyramid through three convolutional
//! mappers whose outputs are added to the first three encoder levels.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::features::{FeaturePyramid, PYRAMID_STRIDES};
use crate::nn::layers::softmax_last;
use crate::nn::{add_channel_bias, silu, upsample_nearest, Conv2d, GroupNorm, Linear, ParamStore};

/// How a mapper is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperInit {
    #[default]
    Random,
    /// Identity 1x1 projection and a zeroed refinement branch, so the mapper
    /// initially passes features through unchanged (needs `in == out`).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Encoder/decoder levels (0-based) that get a self-attention block.
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    /// Channel counts of the three pyramid levels the mappers consume.
    pub mapper_channels: [usize; 3],
    pub use_mappers: bool,
    pub use_attention: bool,
    /// When false the network ignores any noisy mask and timestep and maps
    /// the image straight to mask logits.
    pub use_diffusion: bool,
    pub norm_groups: usize,
    pub mapper_init: MapperInit,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![2],
            time_embed_dim: 256,
            mapper_channels: [16, 32, 64],
            use_mappers: true,
            use_attention: true,
            use_diffusion: true,
            norm_groups: 8,
            mapper_init: MapperInit::Random,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 resolution levels for the mappers, got {}",
                self.levels()
            )));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.use_diffusion && (self.base_channels < 2 || self.base_channels % 2 != 0) {
            return Err(Error::Config("base_channels must be even for the timestep embedding".into()));
        }
        if self.time_embed_dim == 0 {
            return Err(Error::Config("time_embed_dim must be positive".into()));
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= self.levels()) {
            return Err(Error::Config(format!("attention level {l} does not exist")));
        }
        if self.use_mappers && self.mapper_channels.contains(&0) {
            return Err(Error::Config("mapper channels must be positive".into()));
        }
        if self.norm_groups == 0 {
            return Err(Error::Config("norm_groups must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal timestep features `[sin(t f_i), cos(t f_i)]`, `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding(timesteps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
        values.extend(sin);
        values.extend(cos);
    }
    Ok(Tensor::from_vec(values, (timesteps.len(), 2 * half), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Concatenates `[R, G, B, x_t]` along the channel axis.
pub fn input_fusion(xt: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = y.dims4()?;
    let (bx, cx, hx, wx) = xt.dims4()?;
    if c != 3 || cx != 1 || (b, h, w) != (bx, hx, wx) {
        return Err(Error::Shape(format!(
            "cannot fuse mask {:?} with image {:?}",
            xt.dims(),
            y.dims()
        )));
    }
    Ok(Tensor::cat(&[y, &xt.to_dtype(y.dtype())?], 1)?)
}

struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    fn forward(&self, timesteps: &[usize], dtype: DType) -> Result<Tensor> {
        let e = sinusoidal_embedding(timesteps, self.dim, dtype)?;
        Ok(self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)?)
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: Option<usize>,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1)?,
            time_proj: match time_dim {
                Some(d) => Some(Linear::new(store, &format!("{name}.time_proj"), d, cout)?),
                None => None,
            },
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            h = add_channel_bias(&h, &proj.forward(&silu(temb)?)?)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((shortcut + h)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
struct AttentionBlock {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups)?,
            qkv: Conv2d::new(store, &format!("{name}.qkv"), channels, 3 * channels, 1, 1)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), channels, channels, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let scores = (q.matmul(&k)? / (c as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        // [B, C, HW] x [B, HW, HW]^T
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

/// Convolutional adapter from one pyramid level to an encoder width.
pub struct Mapper {
    project: Conv2d,
    refine: Conv2d,
}

impl Mapper {
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let p = self.project.forward(features)?;
        Ok((&p + self.refine.forward(&silu(&p)?)?)?)
    }
}

fn mapper_in_store(
    store: &mut ParamStore,
    level_index: usize,
    in_channels: usize,
    out_channels: usize,
    init: MapperInit,
) -> Result<Mapper> {
    if !(1..=3).contains(&level_index) {
        return Err(Error::Config(format!("mapper level {level_index} outside 1..=3")));
    }
    if in_channels == 0 || out_channels == 0 {
        return Err(Error::Config("mapper channels must be positive".into()));
    }
    let name = format!("mapper{level_index}");
    Ok(match init {
        MapperInit::Random => Mapper {
            project: Conv2d::new(store, &format!("{name}.project"), in_channels, out_channels, 1, 1)?,
            refine: Conv2d::new(store, &format!("{name}.refine"), out_channels, out_channels, 3, 1)?,
        },
        MapperInit::Identity => {
            if in_channels != out_channels {
                return Err(Error::Config("identity mapper init needs in == out channels".into()));
            }
            Mapper {
                project: Conv2d::identity(store, &format!("{name}.project"), in_channels)?,
                refine: Conv2d::zeros(store, &format!("{name}.refine"), out_channels, out_channels)?,
            }
        }
    })
}

/// Builds a standalone mapper for pyramid level `level_index` (1..=3).
pub fn build_mapper(
    level_index: usize,
    in_channels: usize,
    out_channels: usize,
    init: MapperInit,
    seed: u64,
) -> Result<(Mapper, ParamStore)> {
    let mut store = ParamStore::new(seed, DType::F32);
    let m = mapper_in_store(&mut store, level_index, in_channels, out_channels, init)?;
    Ok((m, store))
}

struct EncoderLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    down: Option<Conv2d>,
}

struct DecoderLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    up: Option<Conv2d>,
}

/// The trainable network plus its parameters.
pub struct UNet {
    config: DenoiserConfig,
    store: ParamStore,
    conv_in: Conv2d,
    time: Option<TimeEmbedding>,
    encoder: Vec<EncoderLevel>,
    mappers: Vec<Mapper>,
    mid1: ResBlock,
    mid_attn: Option<AttentionBlock>,
    mid2: ResBlock,
    decoder: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl std::fmt::Debug for UNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet")
            .field("config", &self.config)
            .field("params", &self.store)
            .finish()
    }
}

impl UNet {
    pub fn new(config: DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let s = &mut store;
        let groups = config.norm_groups;
        let attn_at = |l: usize| config.use_attention && config.attention_levels.contains(&l);
        let in_channels = if config.use_diffusion { 4 } else { 3 };
        let c0 = config.level_channels(0);
        let conv_in = Conv2d::new(s, "conv_in", in_channels, c0, 3, 1)?;
        let (time, tdim) = if config.use_diffusion {
            let t = TimeEmbedding {
                dim: config.base_channels,
                fc1: Linear::new(s, "time.fc1", config.base_channels, config.time_embed_dim)?,
                fc2: Linear::new(s, "time.fc2", config.time_embed_dim, config.time_embed_dim)?,
            };
            (Some(t), Some(config.time_embed_dim))
        } else {
            (None, None)
        };

        let levels = config.levels();
        let mut encoder = Vec::with_capacity(levels);
        let mut ch = c0;
        for l in 0..levels {
            let cout = config.level_channels(l);
            let res = ResBlock::new(s, &format!("down{l}.res"), ch, cout, tdim, groups)?;
            let attn = if attn_at(l) {
                Some(AttentionBlock::new(s, &format!("down{l}.attn"), cout, groups)?)
            } else {
                None
            };
            let down = if l + 1 < levels {
                Some(Conv2d::new(s, &format!("down{l}.downsample"), cout, cout, 3, 2)?)
            } else {
                None
            };
            encoder.push(EncoderLevel { res, attn, down });
            ch = cout;
        }

        let mut mappers = Vec::new();
        if config.use_mappers {
            for k in 0..3 {
                mappers.push(mapper_in_store(
                    s,
                    k + 1,
                    config.mapper_channels[k],
                    config.level_channels(k),
                    config.mapper_init,
                )?);
            }
        }

        let mid1 = ResBlock::new(s, "mid.res1", ch, ch, tdim, groups)?;
        let mid_attn = if config.use_attention {
            Some(AttentionBlock::new(s, "mid.attn", ch, groups)?)
        } else {
            None
        };
        let mid2 = ResBlock::new(s, "mid.res2", ch, ch, tdim, groups)?;

        let mut decoder = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let skip = config.level_channels(l);
            let res = ResBlock::new(s, &format!("up{l}.res"), ch + skip, skip, tdim, groups)?;
            let attn = if attn_at(l) {
                Some(AttentionBlock::new(s, &format!("up{l}.attn"), skip, groups)?)
            } else {
                None
            };
            let up = if l > 0 {
                Some(Conv2d::new(s, &format!("up{l}.upsample"), skip, skip, 3, 1)?)
            } else {
                None
            };
            decoder.push(DecoderLevel { res, attn, up });
            ch = skip;
        }
        let norm_out = GroupNorm::new(s, "out.norm", ch, groups)?;
        let conv_out = Conv2d::new(s, "out.conv", ch, 1, 3, 1)?;

        Ok(Self {
            config,
            store,
            conv_in,
            time,
            encoder,
            mappers,
            mid1,
            mid_attn,
            mid2,
            decoder,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Predicts the clean mask (diffusion mode) or mask logits (direct mode),
    /// `[B, 1, H, W]`.
    pub fn forward(
        &self,
        xt: Option<&Tensor>,
        timesteps: &[usize],
        y: &Tensor,
        pyramid: Option<&FeaturePyramid>,
    ) -> Result<Tensor> {
        let dtype = self.store.dtype();
        let (b, c, h, w) = y
            .dims4()
            .map_err(|_| Error::Shape(format!("expected [B, 3, H, W] image, got {:?}", y.dims())))?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not a multiple of {m}")));
        }
        let y = y.to_dtype(dtype)?;
        let (input, temb) = match (&self.time, xt) {
            (Some(time), Some(xt)) => {
                if timesteps.len() != b {
                    return Err(Error::Shape(format!(
                        "{} timesteps for batch of {b}",
                        timesteps.len()
                    )));
                }
                (input_fusion(&xt.to_dtype(dtype)?, &y)?, Some(time.forward(timesteps, dtype)?))
            }
            (Some(_), None) => {
                return Err(Error::Config("diffusion denoiser needs a noisy mask".into()))
            }
            (None, _) => (y.clone(), None),
        };
        let pyramid = match (self.config.use_mappers, pyramid) {
            (true, Some(p)) => Some(p),
            (false, None) => None,
            (true, None) => {
                return Err(Error::Config("denoiser with mappers needs a feature pyramid".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Config("denoiser without mappers was given a feature pyramid".into()))
            }
        };

        let temb = temb.as_ref();
        let mut hs = self.conv_in.forward(&input)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, level) in self.encoder.iter().enumerate() {
            hs = level.res.forward(&hs, temb)?;
            if let Some(a) = &level.attn {
                hs = a.forward(&hs)?;
            }
            if let (Some(p), Some(mapper)) = (pyramid, self.mappers.get(l)) {
                let feats = &p.levels[l];
                let (fb, fc, fh, fw) = feats.dims4()?;
                let expected = (b, self.config.mapper_channels[l], h / PYRAMID_STRIDES[l], w / PYRAMID_STRIDES[l]);
                if (fb, fc, fh, fw) != expected {
                    return Err(Error::Shape(format!(
                        "pyramid level {} is {:?}, expected {expected:?}",
                        l + 1,
                        feats.dims()
                    )));
                }
                let factor = PYRAMID_STRIDES[l] >> l;
                let mapped = mapper.forward(&feats.to_dtype(dtype)?)?;
                hs = (hs + upsample_nearest(&mapped, factor)?)?;
            }
            skips.push(hs.clone());
            if let Some(d) = &level.down {
                hs = d.forward(&hs)?;
            }
        }

        hs = self.mid1.forward(&hs, temb)?;
        if let Some(a) = &self.mid_attn {
            hs = a.forward(&hs)?;
        }
        hs = self.mid2.forward(&hs, temb)?;

        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            hs = level.res.forward(&Tensor::cat(&[&hs, &skip], 1)?, temb)?;
            if let Some(a) = &level.attn {
                hs = a.forward(&hs)?;
            }
            if let Some(up) = &level.up {
                hs = up.forward(&upsample_nearest(&hs, 2)?)?;
            }
        }
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&hs)?)?)?)
    }
}

impl Denoiser for UNet {
    fn predict_x0(&self, xt: &Tensor, timesteps: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let out = self.forward(Some(xt), timesteps, &cond.image, cond.pyramid.as_ref())?;
        Ok(out.to_dtype(xt.dtype())?)
    }
}
