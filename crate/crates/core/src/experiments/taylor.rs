//! First-order Taylor error of filtered gradients against uninformative
//! stand-ins.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, ReluMode};
use crate::repair::SigmaGrid;
use crate::rng::rng_for;
use crate::spectral::lowpass;
use crate::tensor::Tensor;

const EPS_STREAM: u64 = 0x7a71;
const PERMUTE_STREAM: u64 = 0x7a72;
const UNIFORM_STREAM: u64 = 0x7a73;
const GAUSS_STREAM: u64 = 0x7a74;

pub const CONTROLS: [&str; 4] = ["zero", "permuted", "uniform", "gaussian2d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub epsilon_scale: f64,
    pub n_images: usize,
    /// `(sigma, mean ratio)` in grid order; the first entry is the bypass.
    pub filtered: Vec<(f64, f64)>,
    /// Mean ratio per control, in [`CONTROLS`] order. Controls do not depend
    /// on the cutoff.
    pub controls: Vec<(String, f64)>,
}

impl TaylorReport {
    pub fn ratio_at(&self, sigma: f64) -> Option<f64> {
        self.filtered.iter().find(|(s, _)| *s == sigma).map(|(_, r)| *r)
    }

    pub fn control(&self, name: &str) -> Option<f64> {
        self.controls.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }
}

/// CSV with one row per (epsilon scale, curve, sigma). Control curves are
/// repeated at every sigma so each curve plots as a line.
pub fn taylor_csv(reports: &[TaylorReport]) -> String {
    let mut out = String::from("epsilon_scale,curve,sigma,mean_ratio\n");
    for r in reports {
        for &(s, v) in &r.filtered {
            out.push_str(&format!("{},gradient,{s},{v}\n", r.epsilon_scale));
        }
        for (name, v) in &r.controls {
            for &(s, _) in &r.filtered {
                out.push_str(&format!("{},{name},{s},{v}\n", r.epsilon_scale));
            }
        }
    }
    out
}

fn matched(t: Tensor, norm: f64) -> Tensor {
    let n = t.norm();
    if n == 0.0 {
        t
    } else {
        t.scale(norm / n)
    }
}

/// Sum of three isotropic Gaussians (std in `[2, 6]` px) at random centres,
/// repeated over channels.
pub fn gaussian_bumps(shape: &[usize], seed: u64, index: usize) -> Tensor {
    let mut rng = rng_for(seed, &[GAUSS_STREAM, index as u64]);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(2.0..6.0),
            )
        })
        .collect();
    Tensor::from_fn(shape, |i| {
        let (y, x) = (((i / w) % h) as f64 + 0.5, (i % w) as f64 + 0.5);
        bumps
            .iter()
            .map(|&(cy, cx, s)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    })
}

/// The four control gradients for `g`, in [`CONTROLS`] order.
pub fn control_gradients(g: &Tensor, seed: u64, index: usize) -> [Tensor; 4] {
    let norm = g.norm();
    let mut perm = g.data().to_vec();
    perm.shuffle(&mut rng_for(seed, &[PERMUTE_STREAM, index as u64]));
    let mut rng = rng_for(seed, &[UNIFORM_STREAM, index as u64]);
    let uniform = Tensor::from_fn(g.shape(), |_| rng.random_range(-1.0..1.0));
    [
        Tensor::zeros(g.shape()),
        Tensor::new(g.shape().to_vec(), perm).expect("same length"),
        matched(uniform, norm),
        matched(gaussian_bumps(g.shape(), seed, index), norm),
    ]
}

/// Random direction with `‖ε‖ = scale · ‖x‖`.
pub fn epsilon(x: &Tensor, scale: f64, seed: u64, index: usize) -> Tensor {
    let mut rng = rng_for(seed, &[EPS_STREAM, index as u64]);
    let dir = Tensor::from_fn(x.shape(), |_| StandardNormal.sample(&mut rng));
    matched(dir, scale * x.norm())
}

/// Raw errors for one image: one per grid cutoff, then one per control.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageZetas {
    pub filtered: Vec<f64>,
    pub controls: [f64; 4],
}

impl ImageZetas {
    fn ratios(&self) -> (Vec<f64>, [f64; 4]) {
        let z_max = self.filtered[0];
        let ratio = |z: f64| if z == z_max { 1.0 } else { z / z_max };
        (self.filtered.iter().map(|&z| ratio(z)).collect(), self.controls.map(ratio))
    }
}

/// `ζ` for image `index` of a run, on the predicted-class logit.
pub fn image_zetas(
    net: &Network,
    x: &Tensor,
    grid: &SigmaGrid,
    epsilon_scale: f64,
    seed: u64,
    index: usize,
) -> Result<ImageZetas> {
    let cache = net.forward(x)?;
    let c = cache.predicted_class();
    let f0 = cache.logits[c];
    let g = net.backward_input(&cache, c, ReluMode::Standard)?;
    let eps = epsilon(x, epsilon_scale, seed, index);
    let mut shifted = x.clone();
    shifted.add_assign_scaled(&eps, 1.0)?;
    let f1 = net.logits(&shifted)?[c];
    let zeta = |grad: &Tensor| -> Result<f64> { Ok((f1 - (f0 + eps.dot(grad)?)).abs()) };

    let filtered = grid
        .values()
        .iter()
        .map(|&s| zeta(&lowpass(&g, s)?))
        .collect::<Result<Vec<f64>>>()?;
    let mut controls = [0.0; 4];
    for (slot, cg) in controls.iter_mut().zip(control_gradients(&g, seed, index).iter()) {
        *slot = zeta(cg)?;
    }
    Ok(ImageZetas { filtered, controls })
}

/// Mean `ζ(x, σ) / ζ(x, σ_max)` over `images`, where
/// `ζ(x, σ) = |f(x+ε) − f(x) − ε·∇_σ f(x)|` on the predicted-class logit.
/// The grid must start at the bypass cutoff for the image size.
pub fn experiment_taylor(
    net: &Network,
    images: &[Tensor],
    grid: &SigmaGrid,
    epsilon_scale: f64,
    seed: u64,
) -> Result<TaylorReport> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(epsilon_scale > 0.0 && epsilon_scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon scale must be > 0, got {epsilon_scale}")));
    }
    let (h, w) = images[0]
        .spatial()
        .ok_or_else(|| Error::Validation("images must be (C, H, W)".into()))?;
    let grid = grid.clone().for_input(h, w)?;
    let per_image: Vec<(Vec<f64>, [f64; 4])> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| Ok(image_zetas(net, x, &grid, epsilon_scale, seed, i)?.ratios()))
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let filtered = grid
        .values()
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, per_image.iter().map(|r| r.0[k]).sum::<f64>() / n))
        .collect();
    let controls = CONTROLS
        .iter()
        .enumerate()
        .map(|(k, name)| (name.to_string(), per_image.iter().map(|r| r.1[k]).sum::<f64>() / n))
        .collect();
    Ok(TaylorReport {
        epsilon_scale,
        n_images: images.len(),
        filtered,
        controls,
    })
}
