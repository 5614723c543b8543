//! Random low-frequency blobs against their pixel-shuffled twins, scored by
//! faithfulness and μFidelity.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{faithfulness, mu_fidelity, MetricConfig};
use crate::nn::Network;
use crate::rng::rng_for;
use crate::tensor::Tensor;

const BLOB_STREAM: u64 = 0xb10b;
const SHUFFLE_STREAM: u64 = 0xb10c;

/// One isotropic Gaussian (std in `[2, 6]` px) at a random centre.
pub fn blob_map(h: usize, w: usize, seed: u64, index: usize) -> Tensor {
    let mut rng = rng_for(seed, &[BLOB_STREAM, index as u64]);
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let s: f64 = rng.random_range(2.0..6.0);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
    })
}

/// The same values at uniformly random positions.
pub fn disperse(map: &Tensor, seed: u64, index: usize) -> Tensor {
    let mut v = map.data().to_vec();
    v.shuffle(&mut rng_for(seed, &[SHUFFLE_STREAM, index as u64]));
    Tensor::new(map.shape().to_vec(), v).expect("same length")
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FamilyScores {
    pub faithfulness: f64,
    pub mu_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub n_pairs: usize,
    pub blob: FamilyScores,
    pub dispersed: FamilyScores,
}

impl BiasReport {
    pub fn mu_fidelity_gap(&self) -> f64 {
        self.dispersed.mu_fidelity - self.blob.mu_fidelity
    }

    pub fn faithfulness_gap(&self) -> f64 {
        self.dispersed.faithfulness - self.blob.faithfulness
    }

    pub fn to_csv(&self) -> String {
        format!(
            "family,n_pairs,faithfulness,mu_fidelity\nblob,{n},{},{}\ndispersed,{n},{},{}\n",
            self.blob.faithfulness,
            self.blob.mu_fidelity,
            self.dispersed.faithfulness,
            self.dispersed.mu_fidelity,
            n = self.n_pairs,
        )
    }
}

/// One blob/dispersed pair per image, both explaining the predicted class.
pub fn experiment_metric_bias(
    net: &Network,
    images: &[Tensor],
    cfg: &MetricConfig,
    seed: u64,
) -> Result<BiasReport> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scores: Vec<[f64; 4]> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (h, w) = x
                .spatial()
                .ok_or_else(|| Error::Validation("images must be (C, H, W)".into()))?;
            let c = net.forward(x)?.predicted_class();
            let blob = blob_map(h, w, seed, i);
            let spread = disperse(&blob, seed, i);
            Ok([
                faithfulness(net, x, &blob, c, cfg)?,
                mu_fidelity(net, x, &blob, c, cfg)?,
                faithfulness(net, x, &spread, c, cfg)?,
                mu_fidelity(net, x, &spread, c, cfg)?,
            ])
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let mean = |k: usize| scores.iter().map(|s| s[k]).sum::<f64>() / n;
    Ok(BiasReport {
        n_pairs: scores.len(),
        blob: FamilyScores {
            faithfulness: mean(0),
            mu_fidelity: mean(1),
        },
        dispersed: FamilyScores {
            faithfulness: mean(2),
            mu_fidelity: mean(3),
        },
    })
}
