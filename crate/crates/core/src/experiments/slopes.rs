//! Spectral slope of the predicted-logit gradient at every spatial layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, ReluMode};
use crate::spectral::{power_slope, SignatureAccumulator};
use crate::tensor::Tensor;

/// Smallest spatial side that leaves three radii beyond DC.
const MIN_SIDE: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSlope {
    pub variant: String,
    /// Index of the layer whose input gradient is probed.
    pub layer: usize,
    pub kind: String,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerSlopeReport {
    pub n_images: usize,
    pub rows: Vec<LayerSlope>,
}

impl LayerSlopeReport {
    pub fn slope(&self, variant: &str, layer: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.layer == layer)
            .map(|r| r.slope)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,layer,kind,slope,intercept,r_squared\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant, r.layer, r.kind, r.slope, r.intercept, r.r_squared
            ));
        }
        out
    }
}

/// Layers whose input is a `(C, H, W)` activation with both sides at least 6.
pub fn probed_layers(net: &Network) -> Vec<usize> {
    (0..net.logit_end())
        .filter(|&i| matches!(net.shape_at(i), [_, h, w] if *h >= MIN_SIDE && *w >= MIN_SIDE))
        .collect()
}

fn image_accumulators(net: &Network, layers: &[usize], x: &Tensor) -> Result<Vec<SignatureAccumulator>> {
    let cache = net.forward(x)?;
    let cot = net.one_hot(cache.predicted_class())?;
    let grads = net.backward_layers(&cache, &cot, ReluMode::Standard)?;
    layers
        .iter()
        .map(|&l| {
            let g = &grads[l];
            let (h, w) = g.spatial().expect("probed layers are spatial");
            let mut acc = SignatureAccumulator::new(h, w);
            acc.add(g)?;
            Ok(acc)
        })
        .collect()
}

/// Slopes for one network, averaged over images and channels.
pub fn layer_slopes(name: &str, net: &Network, images: &[Tensor]) -> Result<Vec<LayerSlope>> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let layers = probed_layers(net);
    let per_image: Vec<Vec<SignatureAccumulator>> = images
        .par_iter()
        .map(|x| image_accumulators(net, &layers, x))
        .collect::<Result<_>>()?;
    let mut total = per_image[0].clone();
    for accs in &per_image[1..] {
        for (t, a) in total.iter_mut().zip(accs) {
            t.merge(a);
        }
    }
    layers
        .iter()
        .zip(&total)
        .map(|(&l, acc)| {
            let fit = power_slope(&acc.finish()?)?;
            Ok(LayerSlope {
                variant: name.to_string(),
                layer: l,
                kind: net.layers()[l].name().to_string(),
                slope: fit.slope,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
            })
        })
        .collect()
}

/// [`layer_slopes`] for every named variant, in the given order.
pub fn experiment_layer_slopes(variants: &[(String, &Network)], images: &[Tensor]) -> Result<LayerSlopeReport> {
    let rows = variants
        .par_iter()
        .map(|(name, net)| layer_slopes(name, net, images))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSlopeReport {
        n_images: images.len(),
        rows: rows.into_iter().flatten().collect(),
    })
}
