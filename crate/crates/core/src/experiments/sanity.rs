//! Cascading weight randomization: do maps change when the model does?

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, Method, MethodConfig};
use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::nn::Network;
use crate::repair::{attribute_filtered, FilterMode};
use crate::tensor::Tensor;

/// Mean |Spearman| below this at full randomization means the maps changed.
pub const SANITY_THRESHOLD: f64 = 0.2;

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    pub method: Method,
    /// `None` for the unfiltered variant.
    pub sigma: Option<f64>,
    /// Number of parameterized layers randomized, counted from the output.
    pub depth: usize,
    pub mean_abs_spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityVerdict {
    pub method: Method,
    pub sigma: Option<f64>,
    pub full_randomization: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub n_images: usize,
    pub threshold: f64,
    pub rows: Vec<SanityRow>,
    pub verdicts: Vec<SanityVerdict>,
}

impl SanityReport {
    pub fn verdict(&self, method: Method, filtered: bool) -> Option<&SanityVerdict> {
        self.verdicts
            .iter()
            .find(|v| v.method == method && v.sigma.is_some() == filtered)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,sigma,depth,mean_abs_spearman\n");
        for r in &self.rows {
            let s = r.sigma.map_or_else(|| "none".to_string(), |s| s.to_string());
            out.push_str(&format!("{},{s},{},{}\n", r.method, r.depth, r.mean_abs_spearman));
        }
        out
    }

    /// Concatenates reports for several methods.
    pub fn merge(reports: Vec<SanityReport>) -> Result<SanityReport> {
        let first = reports.first().ok_or(Error::EmptyInput)?;
        let (n_images, threshold) = (first.n_images, first.threshold);
        let mut out = SanityReport {
            n_images,
            threshold,
            rows: Vec::new(),
            verdicts: Vec::new(),
        };
        for r in reports {
            out.rows.extend(r.rows);
            out.verdicts.extend(r.verdicts);
        }
        Ok(out)
    }
}

/// Per-depth mean |Spearman| between maps of `net` and of `net` with its
/// last `depth` parameterized layers reinitialized, for the unfiltered
/// method and its gradient-filtered twin at `sigma`. Each image is explained
/// for the class the original network predicts.
pub fn experiment_sanity(
    net: &Network,
    images: &[Tensor],
    method: Method,
    sigma: f64,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<SanityReport> {
    if !method.is_white_box() {
        return Err(Error::UnsupportedMethod(format!("{method} is not a gradient method")));
    }
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_layers = net.param_layers().len();
    let nets: Vec<Network> = (0..=n_layers)
        .map(|d| net.randomize_weights(d, seed))
        .collect::<Result<_>>()?;
    let explain = |m: &Network, x: &Tensor, c: usize, s: Option<f64>| match s {
        None => attribute(m, x, c, method, cfg).map(|a| a.values),
        Some(s) => attribute_filtered(m, x, c, method, cfg, s, FilterMode::Gradient).map(|a| a.values),
    };
    // [image][variant][depth]
    let per_image: Vec<[Vec<f64>; 2]> = images
        .par_iter()
        .map(|x| {
            let c = net.forward(x)?.predicted_class();
            let mut out = [Vec::new(), Vec::new()];
            for (k, s) in [None, Some(sigma)].into_iter().enumerate() {
                let reference = explain(net, x, c, s)?;
                for rnet in &nets {
                    let m = explain(rnet, x, c, s)?;
                    out[k].push(spearman(reference.data(), m.data()).abs());
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for (k, s) in [None, Some(sigma)].into_iter().enumerate() {
        for depth in 0..=n_layers {
            rows.push(SanityRow {
                method,
                sigma: s,
                depth,
                mean_abs_spearman: per_image.iter().map(|r| r[k][depth]).sum::<f64>() / n,
            });
        }
        let full = rows.last().expect("at least one depth").mean_abs_spearman;
        verdicts.push(SanityVerdict {
            method,
            sigma: s,
            full_randomization: full,
            passes: full < SANITY_THRESHOLD,
        });
    }
    Ok(SanityReport {
        n_images: images.len(),
        threshold: SANITY_THRESHOLD,
        rows,
        verdicts,
    })
}
