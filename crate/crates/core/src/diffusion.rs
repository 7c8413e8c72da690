//! Noise schedule, forward corruption, reverse posterior and the training loss.
//!
//! Timesteps are 1-based: `t = 1..=N`, with `t = 0` denoting the clean
//! signal (`alpha_bar(0) = 1`).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;

/// Parameters of a linear variance schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// Per-step variance tables of a discrete diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    // 1 - alpha_bar, accumulated as (1 - ab_{t-1}) + ab_{t-1} * beta_t so that
    // it equals beta_1 exactly at t = 1 and avoids cancellation for small t.
    one_minus_alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..num_steps)
                .map(|i| beta_start + span * i as f64 / (num_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary schedule; every beta must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut one_minus = Vec::with_capacity(betas.len());
        let (mut ab, mut om) = (1.0f64, 0.0f64);
        for (a, b) in alphas.iter().zip(&betas) {
            om += ab * b;
            ab *= a;
            alpha_bars.push(ab);
            one_minus.push(om);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            one_minus_alpha_bars: one_minus,
            sigmas,
        })
    }

    /// Sub-schedule over the strictly increasing `timesteps`, whose per-step
    /// betas compose to the same cumulative products: `beta'_i = 1 - ab(t_i)/ab(t_{i-1})`.
    pub fn respaced(&self, timesteps: &[usize]) -> Result<Self> {
        let mut prev = 0usize;
        let mut betas = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            self.check_step(t)?;
            if t <= prev {
                return Err(Error::Config("respacing timesteps must be strictly increasing".into()));
            }
            betas.push(1.0 - self.alpha_bar(t) / self.alpha_bar(prev));
            prev = t;
        }
        Self::from_betas(betas)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Range(format!(
                "timestep {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `1 - alpha_bar(t)`; exactly zero at `t = 0` and exactly `beta_1` at `t = 1`.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bars[t - 1]
        }
    }

    /// Signal scale and noise scale of the marginal `q(x_t | x_0)`.
    pub fn marginal_scales(&self, t: usize) -> (f64, f64) {
        (self.alpha_bar(t).sqrt(), self.one_minus_alpha_bar(t).sqrt())
    }

    /// Half log signal-to-noise ratio, `ln(sqrt(ab) / sqrt(1 - ab))`.
    pub fn log_snr(&self, t: usize) -> f64 {
        0.5 * (self.alpha_bar(t).ln() - self.one_minus_alpha_bar(t).ln())
    }

    /// Coefficients of the reverse posterior `q(x_{t-1} | x_t, x_0)`:
    /// `(coef_x0, coef_xt, variance)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        let beta = self.beta(t);
        let om_t = self.one_minus_alpha_bar(t);
        let om_prev = self.one_minus_alpha_bar(t - 1);
        let coef_x0 = self.alpha_bar(t - 1).sqrt() * beta / om_t;
        let coef_xt = self.alpha(t).sqrt() * om_prev / om_t;
        let variance = om_prev / om_t * beta;
        Ok((coef_x0, coef_xt, variance))
    }
}

/// Shape contract of a diffusion-space mask tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTensorSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub value_range: (f64, f64),
}

/// Mask value of background pixels in diffusion space.
pub const MASK_BACKGROUND: f64 = -1.0;
/// Mask value of foreground pixels in diffusion space.
pub const MASK_FOREGROUND: f64 = 1.0;

impl DiffusionTensorSpec {
    pub fn mask(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 1,
            value_range: (MASK_BACKGROUND, MASK_FOREGROUND),
        }
    }

    /// Checks the shape and value range of a `[B, C, H, W]` tensor.
    pub fn validate(&self, xs: &Tensor) -> Result<()> {
        let (_, c, h, w) = xs.dims4()?;
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(Error::Shape(format!(
                "expected [_, {}, {}, {}], got {:?}",
                self.channels,
                self.height,
                self.width,
                xs.dims()
            )));
        }
        let lo = xs.min_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let hi = xs.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if lo < self.value_range.0 || hi > self.value_range.1 {
            return Err(Error::Range(format!(
                "values [{lo}, {hi}] outside {:?}",
                self.value_range
            )));
        }
        Ok(())
    }
}

/// Everything the denoiser is conditioned on besides the noisy mask.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// RGB image batch `[B, 3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub pyramid: Option<FeaturePyramid>,
}

/// A model predicting the clean mask from a noisy one.
pub trait Denoiser {
    /// `xt` is `[B, 1, H, W]`; `timesteps` holds one step per batch element.
    fn predict_x0(&self, xt: &Tensor, timesteps: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize], &Conditioning) -> Result<Tensor>,
{
    fn predict_x0(&self, xt: &Tensor, timesteps: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self(xt, timesteps, cond)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `[B, 1, 1, ...]` tensor holding one scalar per batch element.
fn per_element(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank().saturating_sub(1)));
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Closed-form forward corruption `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, noise, "q_sample noise")?;
    schedule.check_step(t)?;
    let (signal, scale) = schedule.marginal_scales(t);
    Ok(((x0 * signal)? + (noise * scale)?)?)
}

/// Forward corruption with one timestep per leading-axis element.
pub fn q_sample_batch(
    x0: &Tensor,
    timesteps: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, noise, "q_sample noise")?;
    if x0.rank() == 0 || x0.dim(0)? != timesteps.len() {
        return Err(Error::Shape(format!(
            "{} timesteps for batch of shape {:?}",
            timesteps.len(),
            x0.dims()
        )));
    }
    let mut signal = Vec::with_capacity(timesteps.len());
    let mut scale = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        schedule.check_step(t)?;
        let (s, n) = schedule.marginal_scales(t);
        signal.push(s);
        scale.push(n);
    }
    let signal = per_element(signal, x0)?;
    let scale = per_element(scale, x0)?;
    Ok((x0.broadcast_mul(&signal)? + noise.broadcast_mul(&scale)?)?)
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_params(
    x0: &Tensor,
    xt: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    same_shape(x0, xt, "posterior inputs")?;
    let (c0, ct, var) = schedule.posterior_coefficients(t)?;
    Ok((((x0 * c0)? + (xt * ct)?)?, var))
}

/// Mean squared error between the denoiser's clean-mask prediction on the
/// corrupted input and the clean mask.
pub fn denoising_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Tensor,
    cond: &Conditioning,
    timesteps: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let xt = q_sample_batch(x0, timesteps, noise, schedule)?;
    let pred = denoiser.predict_x0(&xt, timesteps, cond)?;
    same_shape(&pred, x0, "denoiser output")?;
    Ok((pred - x0)?.sqr()?.mean_all()?)
}
