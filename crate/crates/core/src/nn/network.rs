use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::layer::{self, ConvGeom, LayerSpec, ReluMode};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// A feed-forward classifier: an ordered layer stack plus named parameters.
///
/// Parameters are stored as `"{layer}.weight"` / `"{layer}.bias"`. A trailing
/// [`LayerSpec::Softmax`] is treated as the probability head: logits are its
/// input. Without one, probabilities are computed from the final output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    input_shape: [usize; 3],
    num_classes: usize,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the
    /// network output.
    shapes: Vec<Vec<usize>>,
}

/// Activations recorded by [`Network::forward`], needed for exact backward.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input activation of every layer up to the logits.
    pub inputs: Vec<Tensor>,
    /// Argmax indices for each max-pool layer, `None` elsewhere.
    pub argmax: Vec<Option<Vec<usize>>>,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl ForwardCache {
    pub fn predicted_class(&self) -> usize {
        argmax(self.probabilities.data())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn weight_name(layer: usize) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("{layer}.bias")
}

impl Network {
    /// Builds a network from explicit parameters, validating the shape chain
    /// and the parameter set.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: [usize; 3],
        num_classes: usize,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let shapes = shape_chain(&layers, input_shape, num_classes)?;
        let mut expected = BTreeMap::new();
        for (i, spec) in layers.iter().enumerate() {
            if let Some((w, b)) = spec.param_shapes(&shapes[i]) {
                expected.insert(weight_name(i), w);
                expected.insert(bias_name(i), b);
            }
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Validation(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Validation(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Validation(format!("parameter {name} is not finite")))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Validation(format!("unexpected parameter {extra}")));
        }
        Ok(Network {
            layers,
            params,
            input_shape,
            num_classes,
            shapes,
        })
    }

    /// He-normal initialized network; biases start at zero.
    pub fn init(
        layers: Vec<LayerSpec>,
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let shapes = shape_chain(&layers, input_shape, num_classes)?;
        let mut params = BTreeMap::new();
        for (i, spec) in layers.iter().enumerate() {
            if let Some((w, b)) = init_layer(spec, &shapes[i], seed, i) {
                params.insert(weight_name(i), w);
                params.insert(bias_name(i), b);
            }
        }
        Network::new(layers, input_shape, num_classes, params)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Input shape of layer `i` (or the output shape for `i == layers.len()`).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Index one past the layer producing the logits.
    pub fn logit_end(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    /// Indices of layers that carry parameters, input side first.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].has_params())
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let end = self.logit_end();
        let mut inputs = Vec::with_capacity(end);
        let mut argmaxes = Vec::with_capacity(end);
        let mut act = x.clone();
        for i in 0..end {
            let (next, am) = self.apply(i, &act)?;
            inputs.push(act);
            argmaxes.push(am);
            act = next;
        }
        let probabilities = Tensor::new(vec![act.len()], layer::softmax(act.data()))?;
        Ok(ForwardCache {
            inputs,
            argmax: argmaxes,
            logits: act,
            probabilities,
        })
    }

    /// Logits without recording a cache.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.forward_from(0, x)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        Tensor::new(vec![logits.len()], layer::softmax(logits.data()))
    }

    /// Runs layers `start..` on an activation that replaces the input of
    /// layer `start`, returning the logits.
    pub fn forward_from(&self, start: usize, activation: &Tensor) -> Result<Tensor> {
        let end = self.logit_end();
        if start > end {
            return Err(Error::Validation(format!("start layer {start} beyond logits")));
        }
        if activation.shape() != self.shapes[start].as_slice() {
            return Err(Error::shape(&self.shapes[start], activation.shape()));
        }
        let mut act = activation.clone();
        for i in start..end {
            act = self.apply(i, &act)?.0;
        }
        Ok(act)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(&self.input_shape, x.shape()));
        }
        Ok(())
    }

    fn conv_geom(&self, i: usize) -> ConvGeom {
        match self.layers[i] {
            LayerSpec::Conv2D {
                kernel,
                stride,
                padding,
                ..
            } => ConvGeom::new(&self.shapes[i], &self.shapes[i + 1], kernel, stride, padding),
            _ => unreachable!("not a conv layer"),
        }
    }

    fn apply(&self, i: usize, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
        let out_shape = &self.shapes[i + 1];
        let mut argmax = None;
        let data = match self.layers[i] {
            LayerSpec::Conv2D { .. } => layer::conv2d_forward(
                x.data(),
                self.params[&weight_name(i)].data(),
                self.params[&bias_name(i)].data(),
                &self.conv_geom(i),
            ),
            LayerSpec::Dense { .. } => layer::dense_forward(
                x.data(),
                self.params[&weight_name(i)].data(),
                self.params[&bias_name(i)].data(),
            ),
            LayerSpec::ReLU => layer::relu_forward(x.data()),
            LayerSpec::MaxPool2D { kernel, stride } => {
                let (out, am) =
                    layer::max_pool_forward(x.data(), x.shape(), out_shape, kernel, stride);
                argmax = Some(am);
                out
            }
            LayerSpec::AvgPool2D { kernel, stride } => {
                layer::avg_pool_forward(x.data(), x.shape(), out_shape, kernel, stride)
            }
            LayerSpec::Flatten => x.data().to_vec(),
            LayerSpec::Softmax => layer::softmax(x.data()),
        };
        let out = Tensor::new(out_shape.clone(), data)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("layer {i} ({})", self.layers[i].name())));
        }
        Ok((out, argmax))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let end = self.logit_end();
        if cache.inputs.len() != end || cache.argmax.len() != end {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, network has {end}",
                cache.inputs.len()
            )));
        }
        for (i, t) in cache.inputs.iter().enumerate() {
            if t.shape() != self.shapes[i].as_slice() {
                return Err(Error::StaleCache(format!(
                    "layer {i} input shape {:?}, expected {:?}",
                    t.shape(),
                    self.shapes[i]
                )));
            }
            let is_max = matches!(self.layers[i], LayerSpec::MaxPool2D { .. });
            let ok = match &cache.argmax[i] {
                Some(am) => is_max && am.len() == self.shapes[i + 1].iter().product::<usize>(),
                None => !is_max,
            };
            if !ok {
                return Err(Error::StaleCache(format!("pooling indices at layer {i}")));
            }
        }
        if cache.logits.shape() != self.shapes[end].as_slice() {
            return Err(Error::StaleCache("logit shape".into()));
        }
        Ok(())
    }

    /// Gradient of `logits[target]` with respect to the network input.
    pub fn backward_input(
        &self,
        cache: &ForwardCache,
        target: usize,
        mode: ReluMode,
    ) -> Result<Tensor> {
        let cot = self.one_hot(target)?;
        let mut grads = self.backprop(cache, &cot, mode, false, None)?;
        Ok(grads.swap_remove(0))
    }

    /// Gradient of `logits · cotangent` with respect to the input of every
    /// layer up to the logits; entry `i` belongs to layer `i`'s input.
    pub fn backward_layers(
        &self,
        cache: &ForwardCache,
        cotangent: &Tensor,
        mode: ReluMode,
    ) -> Result<Vec<Tensor>> {
        self.backprop(cache, cotangent, mode, true, None)
    }

    /// Parameter gradients of `logits · cotangent`, keyed like [`Network::params`].
    pub fn backward_params(
        &self,
        cache: &ForwardCache,
        cotangent: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        self.backprop(cache, cotangent, ReluMode::Standard, false, Some(&mut grads))?;
        Ok(grads)
    }

    pub(crate) fn accumulate_param_grads(
        &self,
        cache: &ForwardCache,
        cotangent: &Tensor,
        grads: &mut BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.backprop(cache, cotangent, ReluMode::Standard, false, Some(grads))
            .map(|_| ())
    }

    pub fn one_hot(&self, target: usize) -> Result<Tensor> {
        if target >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class: target,
                num_classes: self.num_classes,
            });
        }
        let mut cot = Tensor::zeros(&[self.num_classes]);
        cot[target] = 1.0;
        Ok(cot)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        cotangent: &Tensor,
        mode: ReluMode,
        keep_all: bool,
        mut param_grads: Option<&mut BTreeMap<String, Tensor>>,
    ) -> Result<Vec<Tensor>> {
        self.check_cache(cache)?;
        let end = self.logit_end();
        if cotangent.shape() != self.shapes[end].as_slice() {
            return Err(Error::shape(&self.shapes[end], cotangent.shape()));
        }
        let mut kept = Vec::new();
        let mut up = cotangent.clone();
        for i in (0..end).rev() {
            let x = &cache.inputs[i];
            let mut taken = match param_grads.as_deref_mut() {
                Some(g) if self.layers[i].has_params() => Some((
                    g.remove(&weight_name(i)).expect("weight grad slot"),
                    g.remove(&bias_name(i)).expect("bias grad slot"),
                )),
                _ => None,
            };
            let data = match self.layers[i] {
                LayerSpec::Conv2D { .. } => layer::conv2d_backward(
                    x.data(),
                    self.params[&weight_name(i)].data(),
                    up.data(),
                    &self.conv_geom(i),
                    taken.as_mut().map(|(w, b)| (w.data_mut(), b.data_mut())),
                ),
                LayerSpec::Dense { .. } => layer::dense_backward(
                    x.data(),
                    self.params[&weight_name(i)].data(),
                    up.data(),
                    taken.as_mut().map(|(w, b)| (w.data_mut(), b.data_mut())),
                ),
                LayerSpec::ReLU => layer::relu_backward(x.data(), up.data(), mode),
                LayerSpec::MaxPool2D { .. } => {
                    let am = cache.argmax[i].as_ref().expect("validated");
                    layer::max_pool_backward(x.shape(), am, &up)?.into_data()
                }
                LayerSpec::AvgPool2D { kernel, stride } => {
                    layer::avg_pool_backward(&up, x.shape(), kernel, stride)?.into_data()
                }
                LayerSpec::Flatten => up.data().to_vec(),
                LayerSpec::Softmax => {
                    layer::softmax_backward(&layer::softmax(x.data()), up.data())
                }
            };
            if let (Some(g), Some((w, b))) = (param_grads.as_deref_mut(), taken) {
                g.insert(weight_name(i), w);
                g.insert(bias_name(i), b);
            }
            let next = Tensor::new(self.shapes[i].clone(), data)?;
            if keep_all {
                kept.push(up);
            }
            up = next;
        }
        if !up.is_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        kept.push(up);
        if keep_all {
            // collected output-side first
            kept.reverse();
            kept.truncate(end);
        }
        Ok(kept)
    }

    /// Copy of this network with the last `count` parameterized layers
    /// (output side first) resampled from their init distribution.
    pub fn randomize_weights(&self, count: usize, seed: u64) -> Result<Network> {
        let layers = self.param_layers();
        if count > layers.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot randomize {count} of {} parameterized layers",
                layers.len()
            )));
        }
        let mut out = self.clone();
        for &i in layers.iter().rev().take(count) {
            let (w, b) = init_layer(&self.layers[i], &self.shapes[i], seed, i).expect("has params");
            out.params.insert(weight_name(i), w);
            out.params.insert(bias_name(i), b);
        }
        Ok(out)
    }
}

fn shape_chain(
    layers: &[LayerSpec],
    input_shape: [usize; 3],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if input_shape.contains(&0) {
        return Err(Error::Validation(format!("input shape {input_shape:?}")));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for spec in layers {
        let next = spec.output_shape(shapes.last().expect("nonempty"))?;
        shapes.push(next);
    }
    let logits = match layers.last() {
        Some(LayerSpec::Softmax) => &shapes[shapes.len() - 2],
        _ => shapes.last().expect("nonempty"),
    };
    if logits.as_slice() != [num_classes] {
        return Err(Error::Validation(format!(
            "network produces {logits:?}, expected [{num_classes}]"
        )));
    }
    Ok(shapes)
}

fn init_layer(spec: &LayerSpec, input: &[usize], seed: u64, index: usize) -> Option<(Tensor, Tensor)> {
    let (w_shape, b_shape) = spec.param_shapes(input)?;
    let fan_in: usize = w_shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = rng_for(seed, &[0x1417, index as u64]);
    let w = Tensor::from_fn(&w_shape, |_| normal.sample(&mut rng));
    Some((w, Tensor::zeros(&b_shape)))
}
