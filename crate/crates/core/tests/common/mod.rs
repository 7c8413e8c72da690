//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use diffseg::diffusion::{Conditioning, NoiseSchedule};
use diffseg::Result;

/// Scalar data distribution `N(MU, SIGMA^2)` for the toy sampler checks.
pub const TOY_MU: f64 = 0.3;
pub const TOY_SIGMA: f64 = 0.5;

/// Closed-form `E[x0 | x_t]` for Gaussian data.
pub fn bayes_denoiser(schedule: NoiseSchedule) -> impl Fn(&Tensor, &[usize], &Conditioning) -> Result<Tensor> {
    move |x: &Tensor, ts: &[usize], _: &Conditioning| {
        let (a, s) = schedule.marginal_scales(ts[0]);
        let gain = a * TOY_SIGMA * TOY_SIGMA / (a * a * TOY_SIGMA * TOY_SIGMA + s * s);
        Ok(((x - a * TOY_MU)? * gain)?.affine(1.0, TOY_MU)?)
    }
}

/// Exact probability-flow map from `x_N` to `t`, followed by the Bayes
/// denoiser at `t`.
pub fn exact_flow_then_denoise(schedule: &NoiseSchedule, x_n: f64, t: usize) -> f64 {
    let n = schedule.num_steps();
    let spread = |t: usize| {
        let (a, s) = schedule.marginal_scales(t);
        (a * a * TOY_SIGMA * TOY_SIGMA + s * s).sqrt()
    };
    let z = (x_n - schedule.marginal_scales(n).0 * TOY_MU) / spread(n);
    let (a, s) = schedule.marginal_scales(t);
    let x_t = a * TOY_MU + spread(t) * z;
    let gain = a * TOY_SIGMA * TOY_SIGMA / (a * a * TOY_SIGMA * TOY_SIGMA + s * s);
    TOY_MU + gain * (x_t - a * TOY_MU)
}

/// Conditioning for `n` independent scalar problems.
pub fn scalar_batch(n: usize) -> Conditioning {
    Conditioning {
        image: Tensor::zeros((n, 3, 1, 1), DType::F64, &Device::Cpu).unwrap(),
        pyramid: None,
    }
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
