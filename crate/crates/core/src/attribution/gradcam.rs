use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, ReluMode};
use crate::tensor::{resize_bilinear, Tensor};

fn resolve_layer(net: &Network, layer: Option<usize>) -> Result<usize> {
    let end = net.logit_end();
    let idx = match layer {
        Some(i) => i,
        None => (0..end)
            .rev()
            .find(|&i| matches!(net.layers()[i], LayerSpec::Conv2D { .. }))
            .ok_or(Error::NotAConvLayer(usize::MAX))?,
    };
    if idx + 1 >= end || !matches!(net.layers().get(idx), Some(LayerSpec::Conv2D { .. })) {
        return Err(Error::NotAConvLayer(idx));
    }
    Ok(idx)
}

/// Channel weights `alpha_k`: the spatial mean of `d logit_c / d A_k`, where
/// `A` is the output of conv layer `layer`.
pub fn gradcam_weights(
    net: &Network,
    x: &Tensor,
    class: usize,
    layer: Option<usize>,
) -> Result<Vec<f64>> {
    let idx = resolve_layer(net, layer)?;
    let cache = net.forward(x)?;
    let grads = net.backward_layers(&cache, &net.one_hot(class)?, ReluMode::Standard)?;
    let g = &grads[idx + 1];
    let k = g.channels();
    let plane = g.len() / k;
    Ok(g.data()
        .chunks_exact(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect())
}

/// `ReLU(sum_k alpha_k A_k)` bilinearly upsampled to the input size.
pub fn gradcam(net: &Network, x: &Tensor, class: usize, layer: Option<usize>) -> Result<Tensor> {
    let idx = resolve_layer(net, layer)?;
    let alpha = gradcam_weights(net, x, class, Some(idx))?;
    let cache = net.forward(x)?;
    let act = &cache.inputs[idx + 1];
    let (h, w) = act
        .spatial()
        .ok_or_else(|| Error::Validation("conv output is not spatial".into()))?;
    let mut cam = vec![0.0; h * w];
    for (a, ch) in alpha.iter().zip(act.data().chunks_exact(h * w)) {
        for (c, v) in cam.iter_mut().zip(ch) {
            *c += a * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let [_, ih, iw] = net.input_shape();
    Tensor::new(vec![ih, iw], resize_bilinear(&cam, h, w, ih, iw))
}
