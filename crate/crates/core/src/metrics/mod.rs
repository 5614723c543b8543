//! Attribution evaluation: deletion, insertion, faithfulness, μFidelity,
//! sensitivity and the aggregate ranking score.

mod report;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{baseline_image, BaselineMode};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub use report::{MetricReport, ReportMeta};

const MUFID_STREAM: u64 = 0x3f1d;
const SENS_STREAM: u64 = 0x5e45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Pixels removed or inserted between curve points.
    pub pixel_step: usize,
    pub baseline: BaselineMode,
    pub mufid_subset_size: usize,
    pub mufid_n_subsets: usize,
    /// Perturbation half-width as a fraction of the input's `max - min`.
    pub sens_radius: f64,
    pub sens_n_samples: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            pixel_step: 16,
            baseline: BaselineMode::Value(0.0),
            mufid_subset_size: 32,
            mufid_n_subsets: 200,
            sens_radius: 0.02,
            sens_n_samples: 20,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.pixel_step == 0 {
            return fail("pixel_step must be >= 1");
        }
        if self.mufid_n_subsets < 2 {
            return fail("mufid_n_subsets must be >= 2");
        }
        if self.sens_n_samples == 0 {
            return fail("sens_n_samples must be >= 1");
        }
        if !(self.sens_radius >= 0.0 && self.sens_radius.is_finite()) {
            return fail("sens_radius must be finite and >= 0");
        }
        Ok(())
    }
}

fn check_map(x: &Tensor, map: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = x
        .spatial()
        .ok_or_else(|| Error::Validation(format!("expected an image, got shape {:?}", x.shape())))?;
    if map.shape() != [h, w] {
        return Err(Error::shape(&[h, w], map.shape()));
    }
    if !map.is_finite() {
        return Err(Error::NonFinite("attribution map".into()));
    }
    Ok((h, w))
}

/// Pixel indices by descending attribution, ties in row-major order.
pub fn ranking(map: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]));
    order
}

/// Stage sizes `0, step, 2 step, ...` with `n` always last.
fn stages(n: usize, step: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n).step_by(step).collect();
    out.push(n);
    out
}

/// Copies pixel `p` (all channels) from `src` into `dst`.
fn copy_pixel(dst: &mut [f64], src: &[f64], p: usize, plane: usize) {
    for ch in (0..src.len()).step_by(plane) {
        dst[ch + p] = src[ch + p];
    }
}

/// `(fraction, probability)` points of the deletion (`insert = false`) or
/// insertion curve.
pub fn perturbation_curve(
    net: &Network,
    x: &Tensor,
    map: &Tensor,
    class: usize,
    cfg: &MetricConfig,
    insert: bool,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let (h, w) = check_map(x, map)?;
    net.one_hot(class)?;
    let n = h * w;
    let order = ranking(map);
    let base = baseline_image(x, cfg.baseline, cfg.seed);
    let (start, fill) = if insert { (&base, x) } else { (x, &base) };
    stages(n, cfg.pixel_step)
        .into_par_iter()
        .map(|k| {
            let mut img = start.clone();
            let data = img.data_mut();
            for &p in &order[..k] {
                copy_pixel(data, fill.data(), p, n);
            }
            let prob = net.probabilities(&img)?[class];
            Ok((k as f64 / n as f64, prob))
        })
        .collect()
}

pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|s| (s[1].0 - s[0].0) * (s[0].1 + s[1].1) / 2.0)
        .sum()
}

pub fn deletion(net: &Network, x: &Tensor, map: &Tensor, class: usize, cfg: &MetricConfig) -> Result<f64> {
    Ok(trapezoid(&perturbation_curve(net, x, map, class, cfg, false)?))
}

pub fn insertion(net: &Network, x: &Tensor, map: &Tensor, class: usize, cfg: &MetricConfig) -> Result<f64> {
    Ok(trapezoid(&perturbation_curve(net, x, map, class, cfg, true)?))
}

/// `insertion - deletion`.
pub fn faithfulness_of(insertion: f64, deletion: f64) -> f64 {
    insertion - deletion
}

pub fn faithfulness(net: &Network, x: &Tensor, map: &Tensor, class: usize, cfg: &MetricConfig) -> Result<f64> {
    let (i, d) = rayon::join(
        || insertion(net, x, map, class, cfg),
        || deletion(net, x, map, class, cfg),
    );
    Ok(faithfulness_of(i?, d?))
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

/// Pixel subset `i` used by μFidelity.
pub fn mufid_subset(cfg: &MetricConfig, pixels: usize, i: usize) -> Vec<usize> {
    let mut rng = rng_for(cfg.seed, &[MUFID_STREAM, i as u64]);
    sample(&mut rng, pixels, cfg.mufid_subset_size).into_vec()
}

/// Correlation between the attribution mass of random pixel subsets and the
/// logit drop when those pixels are set to the baseline.
pub fn mu_fidelity(net: &Network, x: &Tensor, map: &Tensor, class: usize, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let (h, w) = check_map(x, map)?;
    let n = h * w;
    let k = cfg.mufid_subset_size;
    if k == 0 || k >= n {
        return Err(Error::DegenerateSubsetSize { size: k, pixels: n });
    }
    let reference = net.logits(x)?[class];
    net.one_hot(class)?;
    let base = baseline_image(x, cfg.baseline, cfg.seed);
    let pairs: Vec<(f64, f64)> = (0..cfg.mufid_n_subsets)
        .into_par_iter()
        .map(|i| {
            let subset = mufid_subset(cfg, n, i);
            let mut img = x.clone();
            let data = img.data_mut();
            let mut mass = 0.0;
            for &p in &subset {
                copy_pixel(data, base.data(), p, n);
                mass += map[p];
            }
            Ok((mass, reference - net.logits(&img)?[class]))
        })
        .collect::<Result<_>>()?;
    let (mass, drop): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(pearson(&mass, &drop))
}

/// Perturbation `i` used by sensitivity, uniform in `(-r, r)` per element.
pub fn sensitivity_perturbation(x: &Tensor, cfg: &MetricConfig, i: usize) -> Tensor {
    let r = cfg.sens_radius * (x.max() - x.min());
    if r == 0.0 {
        return Tensor::zeros(x.shape());
    }
    let mut rng = rng_for(cfg.seed, &[SENS_STREAM, i as u64]);
    Tensor::from_fn(x.shape(), |_| rng.random_range(-r..r))
}

/// Mean relative change `|phi(x + d) - phi(x)| / |phi(x)|` over seeded
/// perturbations; zero when `phi(x)` vanishes.
pub fn sensitivity<F>(explain: F, x: &Tensor, cfg: &MetricConfig) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    cfg.validate()?;
    let reference = explain(x)?;
    let norm = reference.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let ratios: Vec<f64> = (0..cfg.sens_n_samples)
        .into_par_iter()
        .map(|i| {
            let d = sensitivity_perturbation(x, cfg, i);
            let moved = explain(&x.zip_map(&d, |a, b| a + b)?)?;
            Ok(moved.zip_map(&reference, |a, b| a - b)?.norm() / norm)
        })
        .collect::<Result<_>>()?;
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// `F + μF - S`.
pub fn aggregate_score(faithfulness: f64, mu_fidelity: f64, sensitivity: f64) -> f64 {
    faithfulness + mu_fidelity - sensitivity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub target_class: usize,
    pub deletion: f64,
    pub insertion: f64,
    pub faithfulness: f64,
    pub mu_fidelity: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub deletion: f64,
    pub insertion: f64,
    pub faithfulness: f64,
    pub mu_fidelity: f64,
    pub sensitivity: f64,
    pub aggregate: f64,
    pub per_image: Vec<ImageRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl MetricResult {
    pub fn from_records(per_image: Vec<ImageRecord>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyInput);
        }
        let deletion = mean(per_image.iter().map(|r| r.deletion));
        let insertion = mean(per_image.iter().map(|r| r.insertion));
        let faithfulness = faithfulness_of(insertion, deletion);
        let mu_fidelity = mean(per_image.iter().map(|r| r.mu_fidelity));
        let sensitivity = mean(per_image.iter().map(|r| r.sensitivity));
        Ok(MetricResult {
            deletion,
            insertion,
            faithfulness,
            mu_fidelity,
            sensitivity,
            aggregate: aggregate_score(faithfulness, mu_fidelity, sensitivity),
            per_image,
        })
    }
}

/// Evaluates every metric on each image, explaining the predicted class.
/// `explain(x, c)` returns the attribution map for class `c`.
pub fn evaluate<F>(net: &Network, images: &[Tensor], explain: F, cfg: &MetricConfig) -> Result<MetricResult>
where
    F: Fn(&Tensor, usize) -> Result<Tensor> + Sync,
{
    cfg.validate()?;
    let records: Vec<ImageRecord> = images
        .par_iter()
        .enumerate()
        .map(|(index, x)| {
            let class = net.forward(x)?.predicted_class();
            let map = explain(x, class)?;
            let d = deletion(net, x, &map, class, cfg)?;
            let i = insertion(net, x, &map, class, cfg)?;
            Ok(ImageRecord {
                index,
                target_class: class,
                deletion: d,
                insertion: i,
                faithfulness: faithfulness_of(i, d),
                mu_fidelity: mu_fidelity(net, x, &map, class, cfg)?,
                sensitivity: sensitivity(|y| explain(y, class), x, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    MetricResult::from_records(records)
}

/// Mean faithfulness of `explain` over `images`, explaining predicted classes.
pub fn mean_faithfulness<F>(net: &Network, images: &[Tensor], explain: F, cfg: &MetricConfig) -> Result<f64>
where
    F: Fn(&Tensor, usize) -> Result<Tensor> + Sync,
{
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut values: Vec<f64> = images
        .par_iter()
        .map(|x| {
            let class = net.forward(x)?.predicted_class();
            faithfulness(net, x, &explain(x, class)?, class, cfg)
        })
        .collect::<Result<_>>()?;
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
