#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use forgrad::nn::{train, LayerSpec, Network, Padding, Preset, ReluMode, TrainConfig};
use forgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Bright left half for class 1, bright right half for class 0.
pub fn half_image(r: &mut impl Rng, label: usize) -> Tensor {
    Tensor::from_fn(&[1, 12, 12], |j| {
        let left = j % 12 < 6;
        let base = if left == (label == 1) { 0.8 } else { 0.1 };
        base + r.random_range(-0.1..0.1)
    })
}

/// Small CNN trained to tell a bright left half from a bright right half.
pub fn toy_cnn() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(|| {
        let mut r = rng(41);
        let labels: Vec<usize> = (0..120).map(|i| i % 2).collect();
        let images: Vec<Tensor> = labels.iter().map(|&l| half_image(&mut r, l)).collect();
        let net = Preset::CnnMax.build([1, 12, 12], 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            ..Default::default()
        };
        train(&net, &images, &labels, &cfg).unwrap().network
    })
}

/// Single dense layer `logits = W x + b` over a `(c, h, w)` input.
pub fn linear_model(input: [usize; 3], weights: &[Vec<f64>], bias: &[f64]) -> Network {
    let n: usize = input.iter().product();
    let classes = weights.len();
    let mut params = BTreeMap::new();
    let flat: Vec<f64> = weights.iter().flat_map(|r| r.iter().copied()).collect();
    assert_eq!(flat.len(), n * classes);
    params.insert("1.weight".into(), Tensor::new(vec![classes, n], flat).unwrap());
    params.insert("1.bias".into(), Tensor::new(vec![classes], bias.to_vec()).unwrap());
    Network::new(
        vec![LayerSpec::Flatten, LayerSpec::Dense { units: classes }],
        input,
        classes,
        params,
    )
    .unwrap()
}

/// Central finite-difference gradient of `logits[target]` with respect to the
/// input entries listed in `indices`.
pub fn fd_input_grad(net: &Network, x: &Tensor, target: usize, indices: &[usize], h: f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            (net.logits(&xp).unwrap()[target] - net.logits(&xm).unwrap()[target]) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Straightforward nested-loop forward pass, written independently of the
/// engine's kernels.
pub fn naive_logits(net: &Network, x: &Tensor) -> Vec<f64> {
    let mut shape = x.shape().to_vec();
    let mut act = x.data().to_vec();
    let end = match net.layers().last() {
        Some(LayerSpec::Softmax) => net.layers().len() - 1,
        _ => net.layers().len(),
    };
    for (li, spec) in net.layers()[..end].iter().enumerate() {
        match *spec {
            LayerSpec::Conv2D {
                kernel,
                stride,
                channels_out,
                padding,
            } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow, py, px) = match padding {
                    Padding::Valid => ((h - kernel) / stride + 1, (w - kernel) / stride + 1, 0, 0),
                    Padding::Same => {
                        let oh = (h + stride - 1) / stride;
                        let ow = (w + stride - 1) / stride;
                        let ty = ((oh - 1) * stride + kernel).saturating_sub(h);
                        let tx = ((ow - 1) * stride + kernel).saturating_sub(w);
                        (oh, ow, ty / 2, tx / 2)
                    }
                };
                let wt = net.param(&format!("{li}.weight")).unwrap().data();
                let b = net.param(&format!("{li}.bias")).unwrap().data();
                let mut out = vec![0.0; channels_out * oh * ow];
                for o in 0..channels_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = b[o];
                            for ci in 0..c {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - py as isize;
                                        let ix = (ox * stride + kx) as isize - px as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        s += wt[((o * c + ci) * kernel + ky) * kernel + kx]
                                            * act[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                act = out;
                shape = vec![channels_out, oh, ow];
            }
            LayerSpec::Dense { units } => {
                let wt = net.param(&format!("{li}.weight")).unwrap().data();
                let b = net.param(&format!("{li}.bias")).unwrap().data();
                let n = act.len();
                act = (0..units)
                    .map(|o| b[o] + (0..n).map(|i| wt[o * n + i] * act[i]).sum::<f64>())
                    .collect();
                shape = vec![units];
            }
            LayerSpec::ReLU => act.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::MaxPool2D { kernel, stride } | LayerSpec::AvgPool2D { kernel, stride } => {
                let is_max = matches!(spec, LayerSpec::MaxPool2D { .. });
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                let mut out = Vec::new();
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let vals = (0..kernel).flat_map(|ky| {
                                let act = &act;
                                (0..kernel).map(move |kx| {
                                    act[(ci * h + oy * stride + ky) * w + ox * stride + kx]
                                })
                            });
                            out.push(if is_max {
                                vals.fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.sum::<f64>() / (kernel * kernel) as f64
                            });
                        }
                    }
                }
                act = out;
                shape = vec![c, oh, ow];
            }
            LayerSpec::Flatten => shape = vec![act.len()],
            LayerSpec::Softmax => {
                let m = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = act.iter().map(|v| (v - m).exp()).sum();
                act = act.iter().map(|v| (v - m).exp() / s).collect();
            }
        }
    }
    act
}

pub const FD_H: f64 = 1e-5;

pub const LAYER_KINDS: [&str; 7] = ["conv", "dense", "relu", "maxpool", "avgpool", "flatten", "softmax"];

/// A small network exercising one layer kind, wrapped so it ends in a class vector.
pub fn config_for(kind: &str, rng: &mut ChaCha8Rng) -> (Vec<LayerSpec>, [usize; 3], usize) {
    let c = rng.random_range(1..3);
    let hw = rng.random_range(5..9);
    let classes = rng.random_range(2..4);
    let k = rng.random_range(1..4);
    let s = rng.random_range(1..3);
    let head = |mut v: Vec<LayerSpec>| {
        v.push(LayerSpec::Flatten);
        v.push(LayerSpec::Dense { units: classes });
        v
    };
    let layers = match kind {
        "conv" => {
            let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            head(vec![LayerSpec::Conv2D {
                kernel: k,
                stride: s,
                channels_out: rng.random_range(1..4),
                padding,
            }])
        }
        "dense" => vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: rng.random_range(2..6) },
            LayerSpec::Dense { units: classes },
        ],
        "relu" => head(vec![LayerSpec::conv(3, 3, Padding::Same), LayerSpec::ReLU]),
        "maxpool" => head(vec![
            LayerSpec::conv(3, 2, Padding::Same),
            LayerSpec::MaxPool2D { kernel: k.max(2), stride: s },
        ]),
        "avgpool" => head(vec![
            LayerSpec::conv(3, 2, Padding::Same),
            LayerSpec::AvgPool2D { kernel: k.max(2), stride: s },
        ]),
        "flatten" => head(vec![]),
        "softmax" => vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: rng.random_range(2..5) },
            LayerSpec::Softmax,
            LayerSpec::Dense { units: classes },
        ],
        _ => unreachable!(),
    };
    (layers, [c, hw, hw], classes)
}

pub fn with_random_bias(net: &Network, rng: &mut ChaCha8Rng) -> Network {
    let mut params = net.params().clone();
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            *t = random_tensor(rng, t.shape()).scale(0.1);
        }
    }
    Network::new(net.layers().to_vec(), net.input_shape(), net.num_classes(), params).unwrap()
}

pub fn max_input_grad_error(net: &Network, x: &Tensor, target: usize, h: f64) -> f64 {
    let cache = net.forward(x).unwrap();
    let grad = net.backward_input(&cache, target, ReluMode::Standard).unwrap();
    let idx: Vec<usize> = (0..x.len()).collect();
    let fd = fd_input_grad(net, x, target, &idx, h);
    idx.iter()
        .map(|&i| rel_err(grad[i], fd[i]))
        .fold(0.0, f64::max)
}

pub fn max_param_grad_error(net: &Network, x: &Tensor, target: usize, h: f64) -> f64 {
    let cache = net.forward(x).unwrap();
    let grads = net.backward_params(&cache, &net.one_hot(target).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut params = net.params().clone();
                params.get_mut(name).unwrap()[i] += delta;
                let n = Network::new(
                    net.layers().to_vec(),
                    net.input_shape(),
                    net.num_classes(),
                    params,
                )
                .unwrap();
                n.logits(x).unwrap()[target]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(g[i], fd));
        }
    }
    worst
}

/// Quadruple-loop DFT: `X[u,v] = sum x[r,c] exp(-2 pi i (u r / H + v c / W))`.
pub fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    re += x[r * w + c] * ang.cos();
                    im += x[r * w + c] * ang.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}
