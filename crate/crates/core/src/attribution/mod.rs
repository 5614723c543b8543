//! Attribution methods. White-box methods obtain every gradient through a
//! [`GradientProvider`], which is where low-pass repair hooks in.

mod black_box;
mod gradcam;
mod provider;
mod white_box;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::io::save_tensor;
use crate::nn::Network;
use crate::tensor::Tensor;

pub use black_box::{baseline_image, occlusion, rise, rise_mask};
pub use gradcam::{gradcam, gradcam_weights};
pub use provider::GradientProvider;
pub use white_box::{
    gradient_input, gradient_input_signed, guided_backprop, integrated_gradients,
    integrated_gradients_signed, noise_sample, saliency, smoothgrad, squaregrad, vargrad,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Saliency,
    GradientInput,
    IntegratedGradients,
    SmoothGrad,
    SquareGrad,
    VarGrad,
    GuidedBackprop,
    GradCam,
    Occlusion,
    Rise,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Saliency,
        Method::GradientInput,
        Method::IntegratedGradients,
        Method::SmoothGrad,
        Method::SquareGrad,
        Method::VarGrad,
        Method::GuidedBackprop,
        Method::GradCam,
        Method::Occlusion,
        Method::Rise,
    ];

    pub const WHITE_BOX: [Method; 7] = [
        Method::Saliency,
        Method::GradientInput,
        Method::IntegratedGradients,
        Method::SmoothGrad,
        Method::SquareGrad,
        Method::VarGrad,
        Method::GuidedBackprop,
    ];

    /// Methods whose maps are built from input gradients.
    pub fn is_white_box(&self) -> bool {
        Self::WHITE_BOX.contains(self)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::GradientInput => "gradient-input",
            Method::IntegratedGradients => "integrated-gradients",
            Method::SmoothGrad => "smoothgrad",
            Method::SquareGrad => "squaregrad",
            Method::VarGrad => "vargrad",
            Method::GuidedBackprop => "guided-backprop",
            Method::GradCam => "gradcam",
            Method::Occlusion => "occlusion",
            Method::Rise => "rise",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let alias = match norm.as_str() {
            "gradinput" | "gradient-x-input" => "gradient-input",
            "ig" | "intgrad" => "integrated-gradients",
            "guidedbackprop" | "guided" => "guided-backprop",
            "grad-cam" => "gradcam",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Unfiltered,
    GradientFiltered,
    MapFiltered,
}

/// Single-channel `H x W` importance map with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub method: Method,
    pub target_class: usize,
    pub sigma: Option<f64>,
    pub provenance: Provenance,
}

/// Baseline used by occlusion patches and metric perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Constant value.
    Value(f64),
    /// Seeded uniform noise in `[-1, 1)`.
    UniformNoise,
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::Value(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    /// Samples for SmoothGrad, SquareGrad and VarGrad.
    pub n_samples: usize,
    /// Noise standard deviation as a fraction of the input's `max - min`.
    pub noise_std: f64,
    pub ig_steps: usize,
    /// Constant integrated-gradients baseline; overridden by
    /// `ig_baseline_tensor` when set.
    pub ig_baseline: f64,
    #[serde(skip)]
    pub ig_baseline_tensor: Option<Tensor>,
    pub occlusion_patch: usize,
    pub occlusion_stride: usize,
    pub occlusion_baseline: BaselineMode,
    pub rise_grid: usize,
    pub rise_keep_prob: f64,
    pub rise_samples: usize,
    /// Conv layer for GradCAM; the last Conv2D when unset.
    pub gradcam_layer: Option<usize>,
    pub seed: u64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            n_samples: 50,
            noise_std: 0.1,
            ig_steps: 64,
            ig_baseline: 0.0,
            ig_baseline_tensor: None,
            occlusion_patch: 4,
            occlusion_stride: 4,
            occlusion_baseline: BaselineMode::Value(0.0),
            rise_grid: 7,
            rise_keep_prob: 0.5,
            rise_samples: 4000,
            gradcam_layer: None,
            seed: 0,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_samples == 0 || self.ig_steps == 0 || self.rise_samples == 0 {
            return fail("sample and step counts must be >= 1");
        }
        if self.occlusion_patch == 0 || self.occlusion_stride == 0 || self.rise_grid == 0 {
            return fail("occlusion patch/stride and RISE grid must be >= 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and >= 0");
        }
        if !(self.rise_keep_prob > 0.0 && self.rise_keep_prob < 1.0) {
            return fail("rise_keep_prob must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Mean of absolute values over channels: `(C, H, W) -> (H, W)`.
pub fn channel_reduce(signed: &Tensor) -> Result<Tensor> {
    let (h, w) = signed
        .spatial()
        .ok_or_else(|| Error::Validation(format!("cannot reduce shape {:?}", signed.shape())))?;
    let c = signed.channels();
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in signed.data().chunks_exact(plane) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v.abs();
        }
    }
    let inv = 1.0 / c as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![h, w], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub method: Method,
    pub target_class: usize,
    pub sigma: Option<f64>,
    pub provenance: Provenance,
    pub seed: u64,
    pub model_hash: String,
}

/// Writes `map` as a single-tensor model-format file plus a `.json` sidecar
/// next to it. Returns the sidecar path.
pub fn export_map(
    map: &AttributionMap,
    path: impl AsRef<Path>,
    seed: u64,
    model_hash: &str,
) -> Result<PathBuf> {
    let path = path.as_ref();
    save_tensor(&map.values, map.method.name(), path)?;
    let sidecar = MapSidecar {
        method: map.method,
        target_class: map.target_class,
        sigma: map.sigma,
        provenance: map.provenance,
        seed,
        model_hash: model_hash.to_string(),
    };
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(side)
}

/// Runs `method` without any filtering.
pub fn attribute(
    net: &Network,
    x: &Tensor,
    class: usize,
    method: Method,
    cfg: &MethodConfig,
) -> Result<AttributionMap> {
    attribute_with(&GradientProvider::new(net), x, class, method, cfg)
}

/// Runs `method`, routing white-box gradients through `provider`.
pub fn attribute_with(
    provider: &GradientProvider<'_>,
    x: &Tensor,
    class: usize,
    method: Method,
    cfg: &MethodConfig,
) -> Result<AttributionMap> {
    cfg.validate()?;
    let net = provider.network();
    let values = match method {
        Method::Saliency => saliency(provider, x, class)?,
        Method::GradientInput => gradient_input(provider, x, class)?,
        Method::IntegratedGradients => integrated_gradients(provider, x, class, cfg)?,
        Method::SmoothGrad => smoothgrad(provider, x, class, cfg)?,
        Method::SquareGrad => squaregrad(provider, x, class, cfg)?,
        Method::VarGrad => vargrad(provider, x, class, cfg)?,
        Method::GuidedBackprop => guided_backprop(provider, x, class)?,
        Method::GradCam => gradcam(net, x, class, cfg.gradcam_layer)?,
        Method::Occlusion => occlusion(net, x, class, cfg)?,
        Method::Rise => rise(net, x, class, cfg)?,
    };
    let filtered = method.is_white_box() && provider.sigma().is_some();
    Ok(AttributionMap {
        values,
        method,
        target_class: class,
        sigma: if filtered { provider.sigma() } else { None },
        provenance: if filtered {
            Provenance::GradientFiltered
        } else {
            Provenance::Unfiltered
        },
    })
}
