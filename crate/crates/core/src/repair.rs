//! Low-pass repair of attributions: filtered gradients (or filtered maps) and
//! the grid search for the cutoff that maximizes validation faithfulness.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, attribute_with, AttributionMap, GradientProvider, Method, MethodConfig, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{mean_faithfulness, mu_fidelity, MetricConfig};
use crate::nn::Network;
use crate::spectral::lowpass;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Filter every gradient before the method's own arithmetic.
    Gradient,
    /// Filter the finished map.
    Map,
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Gradient => "gradient",
            FilterMode::Map => "map",
        })
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(FilterMode::Gradient),
            "map" => Ok(FilterMode::Map),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Strictly descending cutoffs whose first entry is the bypass value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SigmaGrid(Vec<f64>);

impl SigmaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("sigma grid is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("sigma values must be finite and >= 0".into()));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("sigma grid must be strictly descending".into()));
        }
        Ok(SigmaGrid(values))
    }

    /// Checks that the bypass anchor covers an `h x w` input.
    pub fn for_input(self, h: usize, w: usize) -> Result<Self> {
        let side = h.min(w) as f64;
        if self.0[0] < side {
            return Err(Error::InvalidConfig(format!(
                "sigma grid must start at >= {side} (bypass)"
            )));
        }
        Ok(self)
    }

    /// `{28, 24, 20, 16, 12, 8, 6, 4, 2}` on 28-pixel inputs; other sizes
    /// start at their own side and keep the smaller entries.
    pub fn default_for(side: usize) -> Self {
        let mut v = vec![side as f64];
        v.extend(
            [24.0, 20.0, 16.0, 12.0, 8.0, 6.0, 4.0, 2.0]
                .into_iter()
                .filter(|&s| s < side as f64),
        );
        SigmaGrid(v)
    }

    pub fn parse_csv(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad sigma {t:?}")))
            })
            .collect::<Result<_>>()?;
        SigmaGrid::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn bypass(&self) -> f64 {
        self.0[0]
    }

    /// Entry at the middle of the grid.
    pub fn middle(&self) -> f64 {
        self.0[self.0.len() / 2]
    }
}

impl TryFrom<Vec<f64>> for SigmaGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SigmaGrid::new(v)
    }
}

impl From<SigmaGrid> for Vec<f64> {
    fn from(g: SigmaGrid) -> Vec<f64> {
        g.0
    }
}

/// Attribution with high frequencies removed at `sigma`.
pub fn attribute_filtered(
    net: &Network,
    x: &Tensor,
    class: usize,
    method: Method,
    cfg: &MethodConfig,
    sigma: f64,
    mode: FilterMode,
) -> Result<AttributionMap> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    match mode {
        FilterMode::Gradient => {
            if !method.is_white_box() {
                return Err(Error::UnsupportedMethod(format!(
                    "{method} does not use input gradients"
                )));
            }
            let provider = GradientProvider::new(net).with_sigma(Some(sigma))?;
            attribute_with(&provider, x, class, method, cfg)
        }
        FilterMode::Map => {
            let mut map = attribute(net, x, class, method, cfg)?;
            map.values = lowpass(&map.values, sigma)?;
            map.sigma = Some(sigma);
            map.provenance = Provenance::MapFiltered;
            Ok(map)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Faithfulness,
    MuFidelity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearchResult {
    pub sigma_star: f64,
    /// `(sigma, mean objective)` in grid order.
    pub curve: Vec<(f64, f64)>,
    pub n_images: usize,
}

impl SigmaSearchResult {
    pub fn value_at(&self, sigma: f64) -> Option<f64> {
        self.curve.iter().find(|(s, _)| *s == sigma).map(|(_, v)| *v)
    }
}

/// Evaluates `score(sigma)` on every grid point and returns the argmax. Ties
/// go to the largest cutoff.
pub fn search_curve<F>(grid: &SigmaGrid, n_images: usize, score: F) -> Result<SigmaSearchResult>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let curve: Vec<(f64, f64)> = grid
        .values()
        .par_iter()
        .map(|&s| Ok((s, score(s)?)))
        .collect::<Result<_>>()?;
    let mut best = curve[0];
    for &(s, v) in &curve[1..] {
        if v > best.1 {
            best = (s, v);
        }
    }
    Ok(SigmaSearchResult {
        sigma_star: best.0,
        curve,
        n_images,
    })
}

pub struct SearchSpec<'a> {
    pub method: Method,
    pub method_cfg: &'a MethodConfig,
    pub metric_cfg: &'a MetricConfig,
    pub mode: FilterMode,
    pub objective: Objective,
}

/// Grid search for the cutoff maximizing mean faithfulness (or μFidelity)
/// over `images`, explaining each image's predicted class.
pub fn sigma_search(
    net: &Network,
    images: &[Tensor],
    grid: &SigmaGrid,
    spec: &SearchSpec<'_>,
) -> Result<SigmaSearchResult> {
    if images.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let (h, w) = images[0]
        .spatial()
        .ok_or_else(|| Error::Validation("images must be (C, H, W)".into()))?;
    let grid = grid.clone().for_input(h, w)?;
    let explain = |sigma: f64| {
        move |x: &Tensor, c: usize| {
            attribute_filtered(net, x, c, spec.method, spec.method_cfg, sigma, spec.mode).map(|m| m.values)
        }
    };
    search_curve(&grid, images.len(), |sigma| match spec.objective {
        Objective::Faithfulness => mean_faithfulness(net, images, explain(sigma), spec.metric_cfg),
        Objective::MuFidelity => {
            let mut v: Vec<f64> = images
                .par_iter()
                .map(|x| {
                    let c = net.forward(x)?.predicted_class();
                    mu_fidelity(net, x, &explain(sigma)(x, c)?, c, spec.metric_cfg)
                })
                .collect::<Result<_>>()?;
            v.sort_by(f64::total_cmp);
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    })
}

/// Contents of `sigma.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaFile {
    pub model_hash: String,
    pub method: Method,
    pub mode: FilterMode,
    pub grid: SigmaGrid,
    pub curve: Vec<(f64, f64)>,
    pub sigma_star: f64,
    pub n_images: usize,
    pub split_manifest_hash: String,
}

impl SigmaFile {
    pub fn value_at(&self, sigma: f64) -> Option<f64> {
        self.curve.iter().find(|(s, _)| *s == sigma).map(|(_, v)| *v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("sigma file: {e}")))
    }
}
