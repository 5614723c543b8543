//! The four analysis experiments and their shared configuration.

mod bias;
mod sanity;
mod slopes;
mod taylor;

use serde::{Deserialize, Serialize};

pub use bias::{blob_map, disperse, experiment_metric_bias, BiasReport, FamilyScores};
pub use sanity::{
    average_ranks, experiment_sanity, spearman, SanityReport, SanityRow, SanityVerdict, SANITY_THRESHOLD,
};
pub use slopes::{experiment_layer_slopes, layer_slopes, probed_layers, LayerSlope, LayerSlopeReport};
pub use taylor::{
    control_gradients, epsilon, experiment_taylor, gaussian_bumps, image_zetas, taylor_csv, ImageZetas, TaylorReport,
    CONTROLS,
};

use crate::attribution::MethodConfig;
use crate::metrics::MetricConfig;
use crate::nn::TrainConfig;

/// Everything a `--config` file may set. Missing fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: MethodConfig,
    pub metric: MetricConfig,
    pub train: TrainConfig,
    /// Images drawn from the relevant split (in manifest order).
    pub n_images: usize,
    pub epsilon_scales: Vec<f64>,
    /// Untrained seeds for the paired pooling comparison.
    pub slope_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: MethodConfig::default(),
            metric: MetricConfig::default(),
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
            n_images: 200,
            epsilon_scales: vec![0.01, 0.05, 0.1],
            slope_seeds: (0..10).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.method.validate()?;
        self.metric.validate()?;
        self.train.validate()?;
        if self.n_images == 0 {
            return Err(crate::Error::InvalidConfig("n_images must be >= 1".into()));
        }
        Ok(())
    }
}
