//! Turning a trained denoiser into a segmenter.
//!
//! Two samplers start from pure Gaussian noise in mask space: the reference
//! ancestral sampler walks the reverse posterior step by step, and the fast
//! sampler integrates the probability-flow ODE with a second-order
//! multistep scheme in the data-prediction parameterization (DPM-Solver++(2M)).

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::{extract, FeaturePyramid, FrozenBackbone};
use crate::metrics::BinaryMask;
use crate::patcher::{split, stitch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Ancestral,
    OdeSolver,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "ode" | "ode_solver" | "ode-solver" => Ok(Self::OdeSolver),
            other => Err(Error::Config(format!("unknown sampler method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    /// Denoiser evaluations. For the ancestral sampler fewer steps than the
    /// schedule length select an evenly respaced sub-schedule.
    pub num_steps: usize,
    /// Required; an unseeded sampler is rejected.
    pub seed: Option<u64>,
    pub threshold: f64,
    /// Patches pushed through the denoiser at once by [`segment`].
    pub patch_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::OdeSolver,
            num_steps: 5,
            seed: Some(0),
            threshold: 0.0,
            patch_batch: 16,
        }
    }
}

impl SamplerConfig {
    pub fn ode(num_steps: usize, seed: u64) -> Self {
        Self {
            num_steps,
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn ancestral(num_steps: usize, seed: u64) -> Self {
        Self {
            method: SamplerMethod::Ancestral,
            num_steps,
            seed: Some(seed),
            ..Self::default()
        }
    }

    fn validate(&self, schedule: &NoiseSchedule) -> Result<u64> {
        if self.num_steps == 0 || self.num_steps > schedule.num_steps() {
            return Err(Error::Config(format!(
                "num_steps must be in 1..={}, got {}",
                schedule.num_steps(),
                self.num_steps
            )));
        }
        if self.patch_batch == 0 {
            return Err(Error::Config("patch_batch must be positive".into()));
        }
        self.seed
            .ok_or_else(|| Error::Config("a sampler seed is required for reproducible output".into()))
    }
}

/// Standard-normal tensor drawn from a ChaCha stream seeded with `seed`.
pub fn gaussian_noise(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn mask_shape(cond: &Conditioning) -> Result<[usize; 4]> {
    let (b, _, h, w) = cond
        .image
        .dims4()
        .map_err(|_| Error::Shape(format!("expected a [B, 3, H, W] image, got {:?}", cond.image.dims())))?;
    Ok([b, 1, h, w])
}

fn predict<D: Denoiser + ?Sized>(d: &D, x: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
    let b = x.dim(0)?;
    let out = d.predict_x0(x, &vec![t; b], cond)?;
    if out.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "denoiser returned {:?} for input {:?}",
            out.dims(),
            x.dims()
        )));
    }
    Ok(out.to_dtype(x.dtype())?)
}

/// `k` evenly spaced steps of `1..=n` ending at `n`.
pub fn respaced_timesteps(n: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|i| ((i * n) as f64 / k as f64).round() as usize).collect()
}

/// Reverse-posterior sampling starting from `x_N ~ N(0, I)`; the last step adds
/// no noise.
pub fn ancestral_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Tensor> {
    let seed = config.validate(schedule)?;
    let dtype = cond.image.dtype();
    let shape = mask_shape(cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Tensor::from_vec(values, &shape[..], &Device::Cpu)?.to_dtype(dtype)?)
    };

    let n = schedule.num_steps();
    let timesteps = if config.num_steps == n {
        (1..=n).collect()
    } else {
        respaced_timesteps(n, config.num_steps)
    };
    let walk = schedule.respaced(&timesteps)?;
    let mut x = draw()?;
    for i in (1..=timesteps.len()).rev() {
        let x0 = predict(denoiser, &x, timesteps[i - 1], cond)?;
        let (c0, ct, var) = walk.posterior_coefficients(i)?;
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        x = if i > 1 { (mean + (draw()? * var.sqrt())?)? } else { mean };
    }
    Ok(x)
}

/// Timesteps for `k` solver points, uniform in half log-SNR between
/// `t = N` and `t = 1`, snapped to the nearest integer step and made strictly
/// decreasing.
pub fn ode_timesteps(schedule: &NoiseSchedule, k: usize) -> Result<Vec<usize>> {
    let n = schedule.num_steps();
    if k == 0 || k > n {
        return Err(Error::Config(format!("num_steps must be in 1..={n}, got {k}")));
    }
    if k == 1 {
        return Ok(vec![n]);
    }
    let lambdas: Vec<f64> = (1..=n).map(|t| schedule.log_snr(t)).collect();
    let (lo, hi) = (lambdas[n - 1], lambdas[0]);
    let mut ts: Vec<usize> = (0..k)
        .map(|i| {
            let target = lo + (hi - lo) * i as f64 / (k - 1) as f64;
            let nearest = lambdas
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
                .map(|(idx, _)| idx + 1)
                .unwrap_or(n);
            nearest
        })
        .collect();
    ts[0] = n;
    ts[k - 1] = 1;
    for i in 1..k {
        ts[i] = ts[i].min(ts[i - 1] - 1).max(k - i);
    }
    Ok(ts)
}

/// Few-step probability-flow ODE sampling. The result is the denoiser's
/// clean-mask prediction at the last grid point, so one step returns
/// `D(x_N, N)`.
pub fn ode_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Tensor> {
    let seed = config.validate(schedule)?;
    let x = gaussian_noise(&mask_shape(cond)?, seed, cond.image.dtype())?;
    ode_solve(denoiser, cond, schedule, config.num_steps, x)
}

/// [`ode_sample`] from a given starting point `x_N`.
pub fn ode_solve<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    num_steps: usize,
    mut x: Tensor,
) -> Result<Tensor> {
    let grid = ode_timesteps(schedule, num_steps)?;
    let mut previous: Option<(Tensor, f64)> = None;
    for pair in grid.windows(2) {
        let (s, t) = (pair[0], pair[1]);
        let d = predict(denoiser, &x, s, cond)?;
        let (sigma_s, sigma_t) = (schedule.marginal_scales(s).1, schedule.marginal_scales(t).1);
        let alpha_t = schedule.marginal_scales(t).0;
        let h = schedule.log_snr(t) - schedule.log_snr(s);
        let direction = match &previous {
            None => d.clone(),
            Some((d_prev, h_prev)) => {
                let r = h_prev / h;
                ((&d * (1.0 + 0.5 / r))? - (d_prev * (0.5 / r))?)?
            }
        };
        x = ((&x * (sigma_t / sigma_s))? - (direction * (alpha_t * ((-h).exp() - 1.0)))?)?;
        previous = Some((d, h));
    }
    predict(denoiser, &x, grid[grid.len() - 1], cond)
}

/// Dispatches on `config.method`.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Tensor> {
    match config.method {
        SamplerMethod::Ancestral => ancestral_sample(denoiser, cond, schedule, config),
        SamplerMethod::OdeSolver => ode_sample(denoiser, cond, schedule, config),
    }
}

/// Binary and continuous `[H, W]` masks for one image.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub binary: BinaryMask,
    /// Values in `[-1, 1]`.
    pub continuous: Tensor,
}

/// Splits a `[3, H, W]` image into patches, extracts features per patch when
/// a backbone is given, and maps each batch of patches to continuous masks
/// with `predict(patches, pyramid, noise)`. Noise for all patches is drawn
/// up front so the result does not depend on the patch batch size.
pub fn segment_patches<F>(
    image: &Tensor,
    backbone: Option<&dyn FrozenBackbone>,
    patch_size: usize,
    config: &SamplerConfig,
    mut predict: F,
) -> Result<Segmentation>
where
    F: FnMut(&Tensor, Option<FeaturePyramid>, &Tensor) -> Result<Tensor>,
{
    let seed = config
        .seed
        .ok_or_else(|| Error::Config("a sampler seed is required for reproducible output".into()))?;
    if config.patch_batch == 0 {
        return Err(Error::Config("patch_batch must be positive".into()));
    }
    if image.dims().len() != 3 || image.dim(0)? != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", image.dims())));
    }
    let (patches, grid) = split(image, patch_size)?;
    let noise = gaussian_noise(&[patches.len(), 1, patch_size, patch_size], seed, DType::F32)?;
    let mut outputs = Vec::with_capacity(patches.len());
    for (chunk_index, chunk) in patches.chunks(config.patch_batch).enumerate() {
        let start = chunk_index * config.patch_batch;
        let batch = Tensor::stack(chunk, 0)?.to_dtype(DType::F32)?;
        let pyramid = match backbone {
            Some(b) => Some(extract(&batch, b)?),
            None => None,
        };
        let x_n = noise.narrow(0, start, chunk.len())?;
        let out = predict(&batch, pyramid, &x_n)?;
        if out.dims() != [chunk.len(), 1, patch_size, patch_size] {
            return Err(Error::Shape(format!("patch predictor returned {:?}", out.dims())));
        }
        for i in 0..chunk.len() {
            outputs.push(out.get(i)?.to_dtype(DType::F32)?);
        }
    }
    let continuous = stitch(&outputs, &grid)?.clamp(-1f32, 1f32)?.squeeze(0)?;
    let binary = BinaryMask::from_tensor(&continuous, config.threshold)?;
    Ok(Segmentation { binary, continuous })
}

/// Full-image segmentation with a diffusion denoiser: per-patch sampling,
/// stitching, clamping to `[-1, 1]` and thresholding.
pub fn segment<D: Denoiser + ?Sized>(
    denoiser: &D,
    image: &Tensor,
    backbone: Option<&dyn FrozenBackbone>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    patch_size: usize,
) -> Result<Segmentation> {
    config.validate(schedule)?;
    let mut chunk = 0u64;
    segment_patches(image, backbone, patch_size, config, |batch, pyramid, x_n| {
        let cond = Conditioning {
            image: batch.clone(),
            pyramid,
        };
        match config.method {
            SamplerMethod::OdeSolver => ode_solve(denoiser, &cond, schedule, config.num_steps, x_n.clone()),
            SamplerMethod::Ancestral => {
                // Each patch batch draws from its own stream derived from the
                // seed, so ancestral output depends on `patch_batch`.
                let cfg = SamplerConfig {
                    seed: config.seed.map(|s| s.wrapping_add(chunk.wrapping_mul(0x9E37_79B9_7F4A_7C15))),
                    ..*config
                };
                chunk += 1;
                ancestral_sample(denoiser, &cond, schedule, &cfg)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(b: usize, h: usize, w: usize, dtype: DType) -> Conditioning {
        Conditioning {
            image: Tensor::zeros((b, 3, h, w), dtype, &Device::Cpu).unwrap(),
            pyramid: None,
        }
    }

    fn constant(m: Tensor) -> impl Fn(&Tensor, &[usize], &Conditioning) -> Result<Tensor> {
        move |x: &Tensor, _: &[usize], _: &Conditioning| Ok(m.broadcast_as(x.shape())?.contiguous()?)
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn constant_oracle_is_a_fixed_point() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let m = Tensor::new(&[[[[0.25f64, -1.0], [1.0, 0.5]]]], &Device::Cpu).unwrap();
        let d = constant(m.clone());
        let c = cond(1, 2, 2, DType::F64);
        for k in [1, 2, 5, 17, 100] {
            let out = ode_sample(&d, &c, &schedule, &SamplerConfig::ode(k, 3)).unwrap();
            assert_eq!(values(&out), values(&m), "ode {k}");
            let out = ancestral_sample(&d, &c, &schedule, &SamplerConfig::ancestral(k, 3)).unwrap();
            let err = values(&out).iter().zip(values(&m)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "ancestral {k}: {err}");
        }
    }

    #[test]
    fn one_step_schedule_returns_prediction() {
        let schedule = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        let d = |x: &Tensor, _: &[usize], _: &Conditioning| Ok((x * 0.5)?);
        let c = cond(1, 3, 3, DType::F64);
        let cfg = SamplerConfig::ancestral(1, 9);
        let out = ancestral_sample(&d, &c, &schedule, &cfg).unwrap();
        let noise = gaussian_noise(&[1, 1, 3, 3], 9, DType::F64).unwrap();
        assert_eq!(values(&out), values(&(noise * 0.5).unwrap()));
    }

    #[test]
    fn single_ode_step_is_one_jump() {
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let d = |x: &Tensor, t: &[usize], _: &Conditioning| Ok((x * (t[0] as f64 / 100.0))?);
        let c = cond(2, 2, 2, DType::F64);
        let out = ode_sample(&d, &c, &schedule, &SamplerConfig::ode(1, 4)).unwrap();
        let noise = gaussian_noise(&[2, 1, 2, 2], 4, DType::F64).unwrap();
        assert_eq!(values(&out), values(&(noise * 0.5).unwrap()));
    }

    #[test]
    fn grid_is_strictly_decreasing() {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for k in [1, 2, 3, 5, 10, 50, 999, 1000] {
            let g = ode_timesteps(&schedule, k).unwrap();
            assert_eq!(g.len(), k);
            assert_eq!(g[0], 1000);
            assert_eq!(*g.last().unwrap(), if k == 1 { 1000 } else { 1 });
            assert!(g.windows(2).all(|w| w[0] > w[1]), "{k}: {g:?}");
        }
        let short = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
        assert_eq!(ode_timesteps(&short, 4).unwrap(), vec![4, 3, 2, 1]);
    }

    #[test]
    fn config_errors() {
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let d = constant(Tensor::new(0f64, &Device::Cpu).unwrap());
        let c = cond(1, 2, 2, DType::F64);
        assert!(ode_sample(&d, &c, &schedule, &SamplerConfig::ode(11, 0)).is_err());
        assert!(ode_sample(&d, &c, &schedule, &SamplerConfig::ode(0, 0)).is_err());
        let unseeded = SamplerConfig {
            seed: None,
            ..SamplerConfig::ancestral(5, 0)
        };
        assert!(matches!(ancestral_sample(&d, &c, &schedule, &unseeded), Err(Error::Config(_))));
    }

    #[test]
    fn ode_is_deterministic() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let d = |x: &Tensor, _: &[usize], _: &Conditioning| Ok(x.tanh()?);
        let c = cond(2, 4, 4, DType::F32);
        let a = ode_sample(&d, &c, &schedule, &SamplerConfig::ode(5, 1)).unwrap();
        let b = ode_sample(&d, &c, &schedule, &SamplerConfig::ode(5, 1)).unwrap();
        let bits = |t: &Tensor| -> Vec<u32> { t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn segment_single_patch_matches_ode_sample() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let d = |x: &Tensor, _: &[usize], c: &Conditioning| {
            Ok(((c.image.narrow(1, 0, 1)? * 2.0)? - 1.0)?.broadcast_add(&(x * 0.1)?)?)
        };
        let image = Tensor::rand(0f32, 1., (3, 16, 16), &Device::Cpu).unwrap();
        let cfg = SamplerConfig::ode(3, 7);
        let seg = segment(&d, &image, None, &schedule, &cfg, 16).unwrap();
        let c = Conditioning {
            image: image.unsqueeze(0).unwrap(),
            pyramid: None,
        };
        let direct = ode_sample(&d, &c, &schedule, &cfg).unwrap().clamp(-1f32, 1f32).unwrap();
        assert_eq!(values(&seg.continuous), values(&direct));
        assert_eq!(seg.binary, BinaryMask::from_tensor(&direct.squeeze(0).unwrap(), 0.0).unwrap());
    }

    #[test]
    fn segment_output_matches_image_dims_and_batching() {
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let d = |x: &Tensor, _: &[usize], _: &Conditioning| Ok(x.tanh()?);
        let image = Tensor::rand(0f32, 1., (3, 32, 48), &Device::Cpu).unwrap();
        let a = segment(&d, &image, None, &schedule, &SamplerConfig { patch_batch: 1, ..SamplerConfig::ode(4, 2) }, 16).unwrap();
        let b = segment(&d, &image, None, &schedule, &SamplerConfig { patch_batch: 6, ..SamplerConfig::ode(4, 2) }, 16).unwrap();
        assert_eq!((a.binary.height(), a.binary.width()), (32, 48));
        assert_eq!(values(&a.continuous), values(&b.continuous));
    }
}
