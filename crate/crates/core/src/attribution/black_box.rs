use rand::Rng as _;
use rayon::prelude::*;

use super::{BaselineMode, MethodConfig};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::rng_for;
use crate::tensor::{resize_bilinear, Tensor};

const OCCLUSION_STREAM: u64 = 0x0cc1;
const RISE_STREAM: u64 = 0x7153;
const RISE_CHUNK: usize = 64;

fn logit(net: &Network, x: &Tensor, class: usize) -> Result<f64> {
    net.one_hot(class)?;
    Ok(net.logits(x)?[class])
}

fn input_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (h, w) = x
        .spatial()
        .ok_or_else(|| Error::Validation(format!("expected an image, got shape {:?}", x.shape())))?;
    Ok((x.channels(), h, w))
}

/// Baseline image of the same shape as `x`.
pub fn baseline_image(x: &Tensor, mode: BaselineMode, seed: u64) -> Tensor {
    match mode {
        BaselineMode::Value(v) => Tensor::full(x.shape(), v),
        BaselineMode::UniformNoise => {
            let mut rng = rng_for(seed, &[OCCLUSION_STREAM]);
            Tensor::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0))
        }
    }
}

/// Logit drop when a `patch x patch` window is replaced by the baseline,
/// averaged over every window covering a pixel. Pixels no window reaches
/// score zero.
pub fn occlusion(net: &Network, x: &Tensor, class: usize, cfg: &MethodConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (c, h, w) = input_dims(x)?;
    let (p, s) = (cfg.occlusion_patch, cfg.occlusion_stride);
    if p > h || p > w {
        return Err(Error::InvalidConfig(format!("patch {p} exceeds input {h}x{w}")));
    }
    let base = baseline_image(x, cfg.occlusion_baseline, cfg.seed);
    let reference = logit(net, x, class)?;
    let positions: Vec<(usize, usize)> = (0..=h - p)
        .step_by(s)
        .flat_map(|y| (0..=w - p).step_by(s).map(move |xx| (y, xx)))
        .collect();
    let drops: Vec<f64> = positions
        .par_iter()
        .map(|&(py, px)| {
            let mut occluded = x.clone();
            let data = occluded.data_mut();
            for ch in 0..c {
                for r in py..py + p {
                    let row = ch * h * w + r * w;
                    data[row + px..row + px + p].copy_from_slice(&base.data()[row + px..row + px + p]);
                }
            }
            Ok(reference - logit(net, &occluded, class)?)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for (&(py, px), d) in positions.iter().zip(&drops) {
        for r in py..py + p {
            for q in px..px + p {
                total[r * w + q] += d;
                count[r * w + q] += 1;
            }
        }
    }
    let out = total
        .iter()
        .zip(&count)
        .map(|(t, &n)| if n == 0 { 0.0 } else { t / n as f64 })
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Smooth RISE mask: the `grid x grid` binary pattern is bilinearly upsampled
/// to `(grid + 1) * cell` and cropped to `h x w` at offset `shift`, where
/// `cell = ceil(size / grid)`.
pub fn rise_mask(coarse: &[bool], grid: usize, shift: (usize, usize), h: usize, w: usize) -> Vec<f64> {
    let (cell_h, cell_w) = (h.div_ceil(grid), w.div_ceil(grid));
    let (up_h, up_w) = ((grid + 1) * cell_h, (grid + 1) * cell_w);
    let src: Vec<f64> = coarse.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let up = resize_bilinear(&src, grid, grid, up_h, up_w);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let row = (r + shift.0) * up_w + shift.1;
        out.extend_from_slice(&up[row..row + w]);
    }
    out
}

fn rise_attempt(
    net: &Network,
    x: &Tensor,
    class: usize,
    cfg: &MethodConfig,
    attempt: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, h, w) = input_dims(x)?;
    let g = cfg.rise_grid;
    let (cell_h, cell_w) = (h.div_ceil(g), w.div_ceil(g));
    let n = cfg.rise_samples;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(RISE_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut fm = vec![0.0; h * w];
            let mut msum = vec![0.0; h * w];
            for i in chunk * RISE_CHUNK..((chunk + 1) * RISE_CHUNK).min(n) {
                let mut rng = rng_for(cfg.seed, &[RISE_STREAM, attempt, i as u64]);
                let coarse: Vec<bool> = (0..g * g).map(|_| rng.random_bool(cfg.rise_keep_prob)).collect();
                let shift = (rng.random_range(0..cell_h), rng.random_range(0..cell_w));
                let mask = rise_mask(&coarse, g, shift, h, w);
                let masked = Tensor::from_fn(x.shape(), |j| x[j] * mask[j % (h * w)]);
                let score = logit(net, &masked, class)?;
                for ((a, b), m) in fm.iter_mut().zip(msum.iter_mut()).zip(&mask) {
                    *a += score * m;
                    *b += m;
                }
            }
            Ok((fm, msum))
        })
        .collect::<Result<_>>()?;
    let mut fm = vec![0.0; h * w];
    let mut msum = vec![0.0; h * w];
    for (a, b) in chunks {
        fm.iter_mut().zip(&a).for_each(|(t, v)| *t += v);
        msum.iter_mut().zip(&b).for_each(|(t, v)| *t += v);
    }
    Ok((fm, msum))
}

/// Monte-Carlo RISE: `sum_i f(x ⊙ M_i) M_i / sum_i M_i` per pixel. If some
/// pixel is never kept, sampling is retried once with a fresh stream.
pub fn rise(net: &Network, x: &Tensor, class: usize, cfg: &MethodConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (_, h, w) = input_dims(x)?;
    for attempt in 0..2 {
        let (fm, msum) = rise_attempt(net, x, class, cfg, attempt)?;
        if msum.iter().all(|&m| m > 0.0) {
            let out = fm.iter().zip(&msum).map(|(a, m)| a / m).collect();
            return Tensor::new(vec![h, w], out);
        }
    }
    Err(Error::DegenerateMasks)
}
