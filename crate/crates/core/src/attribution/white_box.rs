use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{channel_reduce, GradientProvider, MethodConfig};
use crate::error::{Error, Result};
use crate::nn::ReluMode;
use crate::rng::rng_for;
use crate::tensor::Tensor;

const NOISE_STREAM: u64 = 0x5_6001;

pub fn saliency(p: &GradientProvider<'_>, x: &Tensor, class: usize) -> Result<Tensor> {
    channel_reduce(&p.gradient(x, class)?)
}

/// Guided backprop always uses guided ReLU, whatever mode `p` carries.
pub fn guided_backprop(p: &GradientProvider<'_>, x: &Tensor, class: usize) -> Result<Tensor> {
    saliency(&p.with_relu_mode(ReluMode::Guided), x, class)
}

/// `grad ⊙ x` before channel reduction.
pub fn gradient_input_signed(p: &GradientProvider<'_>, x: &Tensor, class: usize) -> Result<Tensor> {
    p.gradient(x, class)?.zip_map(x, |g, v| g * v)
}

pub fn gradient_input(p: &GradientProvider<'_>, x: &Tensor, class: usize) -> Result<Tensor> {
    channel_reduce(&gradient_input_signed(p, x, class)?)
}

fn ig_baseline(x: &Tensor, cfg: &MethodConfig) -> Result<Tensor> {
    match &cfg.ig_baseline_tensor {
        Some(b) => {
            x.check_same_shape(b)?;
            Ok(b.clone())
        }
        None => Ok(Tensor::full(x.shape(), cfg.ig_baseline)),
    }
}

/// `(x - b) ⊙ mean_k grad(b + k/m (x - b))` for `k = 1..=m`, before channel
/// reduction. Sums to roughly `f(x) - f(b)`.
pub fn integrated_gradients_signed(
    p: &GradientProvider<'_>,
    x: &Tensor,
    class: usize,
    cfg: &MethodConfig,
) -> Result<Tensor> {
    let base = ig_baseline(x, cfg)?;
    let delta = x.zip_map(&base, |a, b| a - b)?;
    let m = cfg.ig_steps;
    let grads: Vec<Tensor> = (1..=m)
        .into_par_iter()
        .map(|k| {
            let t = k as f64 / m as f64;
            let point = base.zip_map(&delta, |b, d| b + t * d)?;
            p.gradient(&point, class)
        })
        .collect::<Result<_>>()?;
    let mut total = Tensor::zeros(x.shape());
    for g in &grads {
        total.add_assign_scaled(g, 1.0)?;
    }
    total.zip_map(&delta, |g, d| g / m as f64 * d)
}

pub fn integrated_gradients(
    p: &GradientProvider<'_>,
    x: &Tensor,
    class: usize,
    cfg: &MethodConfig,
) -> Result<Tensor> {
    channel_reduce(&integrated_gradients_signed(p, x, class, cfg)?)
}

/// The `i`-th noisy copy of `x` used by the noise-averaging methods.
pub fn noise_sample(x: &Tensor, cfg: &MethodConfig, i: usize) -> Result<Tensor> {
    let std = cfg.noise_std * (x.max() - x.min());
    if std == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = rng_for(cfg.seed, &[NOISE_STREAM, i as u64]);
    Ok(Tensor::from_fn(x.shape(), |j| x[j] + normal.sample(&mut rng)))
}

/// Per-element first and second moments of the noisy gradients, plus the
/// population variance computed in a second pass.
struct NoiseMoments {
    mean: Tensor,
    mean_sq: Tensor,
    var: Tensor,
}

fn noise_moments(
    p: &GradientProvider<'_>,
    x: &Tensor,
    class: usize,
    cfg: &MethodConfig,
) -> Result<NoiseMoments> {
    cfg.validate()?;
    if cfg.noise_std * (x.max() - x.min()) == 0.0 {
        let g = p.gradient(x, class)?;
        return Ok(NoiseMoments {
            mean_sq: g.map(|v| v * v),
            var: Tensor::zeros(x.shape()),
            mean: g,
        });
    }
    let n = cfg.n_samples;
    let grads: Vec<Tensor> = (0..n)
        .into_par_iter()
        .map(|i| p.gradient(&noise_sample(x, cfg, i)?, class))
        .collect::<Result<_>>()?;
    let inv = 1.0 / n as f64;
    let mut mean = Tensor::zeros(x.shape());
    let mut mean_sq = Tensor::zeros(x.shape());
    for g in &grads {
        mean.add_assign_scaled(g, inv)?;
        mean_sq.add_assign_scaled(&g.map(|v| v * v), inv)?;
    }
    let mut var = Tensor::zeros(x.shape());
    for g in &grads {
        let d = g.zip_map(&mean, |a, m| (a - m) * (a - m))?;
        var.add_assign_scaled(&d, inv)?;
    }
    Ok(NoiseMoments { mean, mean_sq, var })
}

pub fn smoothgrad(p: &GradientProvider<'_>, x: &Tensor, class: usize, cfg: &MethodConfig) -> Result<Tensor> {
    channel_reduce(&noise_moments(p, x, class, cfg)?.mean)
}

pub fn squaregrad(p: &GradientProvider<'_>, x: &Tensor, class: usize, cfg: &MethodConfig) -> Result<Tensor> {
    channel_reduce(&noise_moments(p, x, class, cfg)?.mean_sq)
}

pub fn vargrad(p: &GradientProvider<'_>, x: &Tensor, class: usize, cfg: &MethodConfig) -> Result<Tensor> {
    if cfg.n_samples < 2 {
        return Err(Error::InvalidConfig("vargrad needs n_samples >= 2".into()));
    }
    channel_reduce(&noise_moments(p, x, class, cfg)?.var)
}
