mod common;

use std::collections::BTreeMap;

use common::{fd_input_grad, half_image, linear_model, random_tensor, rng, toy_cnn};
use forgrad::attribution::{
    attribute, attribute_with, channel_reduce, export_map, gradcam, gradcam_weights,
    gradient_input, gradient_input_signed, guided_backprop, integrated_gradients,
    integrated_gradients_signed, noise_sample, occlusion, rise, rise_mask, saliency, smoothgrad,
    squaregrad, vargrad, GradientProvider, MapSidecar, Method, MethodConfig, Provenance,
};
use forgrad::nn::io::load_tensor;
use forgrad::nn::{LayerSpec, Network, Padding, Preset, ReluMode};
use forgrad::spectral::lowpass;
use forgrad::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn toy_input(seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(&[1, 12, 12], |_| r.random_range(0.0..1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn random_linear(seed: u64, input: [usize; 3]) -> (Network, Vec<f64>) {
    let mut r = rng(seed);
    let n: usize = input.iter().product();
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let other: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    (linear_model(input, &[w.clone(), other], &[0.3, -0.2]), w)
}

fn close(a: &Tensor, b: &[f64], tol: f64) -> bool {
    a.data().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn saliency_on_linear_and_zero_models() {
    let (net, w) = random_linear(1, [1, 4, 5]);
    let x = random_tensor(&mut rng(2), &[1, 4, 5]);
    let p = GradientProvider::new(&net);
    let abs_w: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    assert!(close(&saliency(&p, &x, 0).unwrap(), &abs_w, 0.0));

    let zero = linear_model([1, 3, 3], &[vec![0.0; 9]], &[1.0]);
    let m = saliency(&GradientProvider::new(&zero), &Tensor::full(&[1, 3, 3], 0.5), 0).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn saliency_matches_finite_differences_with_channel_reduction() {
    let net = Preset::CnnAvg.build([3, 8, 8], 3, 5).unwrap();
    let x = random_tensor(&mut rng(6), &[3, 8, 8]);
    let map = saliency(&GradientProvider::new(&net), &x, 1).unwrap();
    let idx: Vec<usize> = (0..x.len()).collect();
    let fd = fd_input_grad(&net, &x, 1, &idx, 1e-5);
    for p in 0..64 {
        let oracle = (0..3).map(|c| fd[c * 64 + p].abs()).sum::<f64>() / 3.0;
        assert!((map[p] - oracle).abs() < 1e-3, "pixel {p}");
    }
}

#[test]
fn gradient_input_identities() {
    let (net, w) = random_linear(3, [1, 4, 4]);
    let x = random_tensor(&mut rng(4), &[1, 4, 4]);
    let p = GradientProvider::new(&net);
    let wx: Vec<f64> = w.iter().zip(x.data()).map(|(a, b)| (a * b).abs()).collect();
    let gi = gradient_input(&p, &x, 0).unwrap();
    assert!(close(&gi, &wx, 1e-15));

    let cfg = MethodConfig::default();
    let ig = integrated_gradients(&p, &x, 0, &cfg).unwrap();
    assert!(gi.max_abs_diff(&ig) < 1e-12);

    let cnn = toy_cnn();
    let zero = Tensor::zeros(&[1, 12, 12]);
    let m = gradient_input(&GradientProvider::new(cnn), &zero, 1).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn integrated_gradients_examples() {
    let (net, w) = random_linear(5, [2, 3, 3]);
    let x = random_tensor(&mut rng(6), &[2, 3, 3]);
    let p = GradientProvider::new(&net);
    for steps in [1, 7, 64] {
        let cfg = MethodConfig {
            ig_steps: steps,
            ..Default::default()
        };
        let signed = integrated_gradients_signed(&p, &x, 0, &cfg).unwrap();
        let wx: Vec<f64> = w.iter().zip(x.data()).map(|(a, b)| a * b).collect();
        assert!(close(&signed, &wx, 1e-12));
    }

    let cfg = MethodConfig {
        ig_baseline_tensor: Some(x.clone()),
        ..Default::default()
    };
    let same = integrated_gradients(&p, &x, 0, &cfg).unwrap();
    assert!(same.data().iter().all(|&v| v == 0.0));
}

#[test]
fn integrated_gradients_completeness_on_trained_cnn() {
    let net = toy_cnn();
    let p = GradientProvider::new(net);
    let cfg = MethodConfig {
        ig_steps: 256,
        ..Default::default()
    };
    let mut r = rng(500);
    for i in 0..8 {
        let x = half_image(&mut r, i % 2);
        for class in 0..2 {
            let signed = integrated_gradients_signed(&p, &x, class, &cfg).unwrap();
            let fx = net.logits(&x).unwrap()[class];
            let fb = net.logits(&Tensor::zeros(&[1, 12, 12])).unwrap()[class];
            let err = (signed.sum() - (fx - fb)).abs() / (fx - fb).abs();
            assert!(err < 1e-2, "image {i} class {class}: {err}");
        }
    }
}

#[test]
fn smoothgrad_examples() {
    let net = toy_cnn();
    let p = GradientProvider::new(net);
    let x = toy_input(7);
    let quiet = MethodConfig {
        noise_std: 0.0,
        ..Default::default()
    };
    let sal = saliency(&p, &x, 0).unwrap();
    assert!(smoothgrad(&p, &x, 0, &quiet).unwrap().bitwise_eq(&sal));

    let single = MethodConfig {
        n_samples: 1,
        seed: 11,
        ..Default::default()
    };
    let perturbed = noise_sample(&x, &single, 0).unwrap();
    assert!(!perturbed.bitwise_eq(&x));
    let oracle = saliency(&p, &perturbed, 0).unwrap();
    assert!(smoothgrad(&p, &x, 0, &single).unwrap().bitwise_eq(&oracle));

    let (lin, w) = random_linear(8, [1, 5, 5]);
    let cfg = MethodConfig::default();
    let m = smoothgrad(&GradientProvider::new(&lin), &random_tensor(&mut rng(9), &[1, 5, 5]), 0, &cfg).unwrap();
    let bound = 3.0 * cfg.noise_std / (cfg.n_samples as f64).sqrt();
    for (v, wi) in m.data().iter().zip(&w) {
        assert!((v - wi.abs()).abs() < bound);
    }
}

#[test]
fn squaregrad_and_vargrad_examples() {
    let net = toy_cnn();
    let p = GradientProvider::new(net);
    let x = toy_input(12);
    let quiet = MethodConfig {
        noise_std: 0.0,
        ..Default::default()
    };
    assert!(vargrad(&p, &x, 1, &quiet).unwrap().data().iter().all(|&v| v == 0.0));
    let g = p.gradient(&x, 1).unwrap();
    let sq = channel_reduce(&g.map(|v| v * v)).unwrap();
    assert!(squaregrad(&p, &x, 1, &quiet).unwrap().bitwise_eq(&sq));

    // Single-channel input: the reduction is the identity on nonnegative maps,
    // so the comparison is elementwise on the raw moments.
    let cfg = MethodConfig {
        n_samples: 20,
        noise_std: 0.3,
        ..Default::default()
    };
    let s = squaregrad(&p, &x, 1, &cfg).unwrap();
    let v = vargrad(&p, &x, 1, &cfg).unwrap();
    for (a, b) in s.data().iter().zip(v.data()) {
        assert!(*a >= b - 1e-15 * a.abs().max(1.0));
    }

    let bad = MethodConfig {
        n_samples: 1,
        ..Default::default()
    };
    assert!(matches!(vargrad(&p, &x, 1, &bad), Err(Error::InvalidConfig(_))));
}

#[test]
fn vargrad_vanishes_on_linear_models() {
    let (lin, _) = random_linear(13, [1, 4, 4]);
    let x = random_tensor(&mut rng(14), &[1, 4, 4]);
    for n in [2, 10, 100] {
        let cfg = MethodConfig {
            n_samples: n,
            ..Default::default()
        };
        let v = vargrad(&GradientProvider::new(&lin), &x, 0, &cfg).unwrap();
        assert!(v.max() < 1e-20);
    }
}

/// `Flatten -> Dense(2) -> ReLU -> Dense(1)` on a 2x2 input with identity
/// rows for the first two pixels.
fn two_layer(out: [f64; 2]) -> Network {
    let mut params = BTreeMap::new();
    params.insert(
        "1.weight".into(),
        Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
    );
    params.insert("1.bias".into(), Tensor::zeros(&[2]));
    params.insert("3.weight".into(), Tensor::new(vec![1, 2], out.to_vec()).unwrap());
    params.insert("3.bias".into(), Tensor::zeros(&[1]));
    Network::new(
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2 },
            LayerSpec::ReLU,
            LayerSpec::Dense { units: 1 },
        ],
        [1, 2, 2],
        1,
        params,
    )
    .unwrap()
}

#[test]
fn guided_backprop_examples() {
    let (lin, _) = random_linear(15, [1, 3, 3]);
    let x = random_tensor(&mut rng(16), &[1, 3, 3]);
    let p = GradientProvider::new(&lin);
    assert!(guided_backprop(&p, &x, 0).unwrap().bitwise_eq(&saliency(&p, &x, 0).unwrap()));

    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let pos = two_layer([1.0, 2.0]);
    let pp = GradientProvider::new(&pos);
    assert!(guided_backprop(&pp, &x, 0).unwrap().bitwise_eq(&saliency(&pp, &x, 0).unwrap()));

    // Hand chain rule: d/dx = W2 diag(relu') W1 = [1, -1, 0, 0]; guided drops
    // the negative cotangent on the second hidden unit.
    let neg = two_layer([1.0, -1.0]);
    let pn = GradientProvider::new(&neg);
    assert_eq!(saliency(&pn, &x, 0).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    assert_eq!(guided_backprop(&pn, &x, 0).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

/// `Conv2D -> Flatten -> Dense(1)` with hand-set weights.
fn conv_probe(input: usize, kernel: usize, stride: usize, conv_w: f64, dense_w: f64) -> Network {
    let out = (input - kernel) / stride + 1;
    let mut params = BTreeMap::new();
    params.insert("0.weight".into(), Tensor::full(&[1, 1, kernel, kernel], conv_w));
    params.insert("0.bias".into(), Tensor::zeros(&[1]));
    params.insert("2.weight".into(), Tensor::full(&[1, out * out], dense_w));
    params.insert("2.bias".into(), Tensor::zeros(&[1]));
    Network::new(
        vec![
            LayerSpec::Conv2D {
                kernel,
                stride,
                channels_out: 1,
                padding: Padding::Valid,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 1 },
        ],
        [1, input, input],
        1,
        params,
    )
    .unwrap()
}

#[test]
fn gradcam_examples() {
    let neg = conv_probe(3, 1, 1, 1.0, -1.0);
    let x = Tensor::full(&[1, 3, 3], 0.7);
    assert_eq!(gradcam_weights(&neg, &x, 0, None).unwrap(), vec![-1.0]);
    assert!(gradcam(&neg, &x, 0, None).unwrap().data().iter().all(|&v| v == 0.0));

    let up = conv_probe(4, 2, 2, 0.25, 1.0);
    let ones = Tensor::full(&[1, 4, 4], 1.0);
    assert_eq!(gradcam_weights(&up, &ones, 0, None).unwrap(), vec![1.0]);
    let cam = gradcam(&up, &ones, 0, None).unwrap();
    assert_eq!(cam.shape(), &[4, 4]);
    assert!(cam.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

    assert!(matches!(gradcam(&up, &ones, 0, Some(1)), Err(Error::NotAConvLayer(1))));
}

#[test]
fn gradcam_weights_match_uniform_bump_derivative() {
    let net = toy_cnn();
    let conv = 3;
    assert!(matches!(net.layers()[conv], LayerSpec::Conv2D { .. }));
    for seed in 0..3 {
        let x = toy_input(100 + seed);
        let alpha = gradcam_weights(net, &x, 0, None).unwrap();
        let act = net.forward(&x).unwrap().inputs[conv + 1].clone();
        let (h, w) = act.spatial().unwrap();
        let eps = 1e-5;
        for (k, a) in alpha.iter().enumerate() {
            let bump = |s: f64| {
                let mut t = act.clone();
                t.data_mut()[k * h * w..(k + 1) * h * w].iter_mut().for_each(|v| *v += s);
                net.forward_from(conv + 1, &t).unwrap()[0]
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps) / (h * w) as f64;
            assert!((fd - a).abs() < 1e-3, "channel {k}: fd {fd} alpha {a}");
        }
    }
}

#[test]
fn occlusion_examples() {
    let (lin, w) = random_linear(17, [1, 4, 4]);
    let x = random_tensor(&mut rng(18), &[1, 4, 4]);
    let one = MethodConfig {
        occlusion_patch: 1,
        occlusion_stride: 1,
        ..Default::default()
    };
    let wx: Vec<f64> = w.iter().zip(x.data()).map(|(a, b)| a * b).collect();
    assert!(close(&occlusion(&lin, &x, 0, &one).unwrap(), &wx, 1e-12));

    let flat = linear_model([1, 4, 4], &[vec![0.0; 16]], &[2.0]);
    assert!(occlusion(&flat, &x, 0, &one).unwrap().data().iter().all(|&v| v == 0.0));

    let quad = MethodConfig {
        occlusion_patch: 2,
        occlusion_stride: 2,
        ..Default::default()
    };
    let m = occlusion(&lin, &x, 0, &quad).unwrap();
    for (qy, qx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        let pixels = [(qy, qx), (qy, qx + 1), (qy + 1, qx), (qy + 1, qx + 1)];
        let oracle: f64 = pixels.iter().map(|&(r, c)| wx[r * 4 + c]).sum();
        for (r, c) in pixels {
            assert!((m[r * 4 + c] - oracle).abs() < 1e-12);
        }
    }
}

#[test]
fn rise_degenerate_cases() {
    let (lin, _) = random_linear(19, [1, 6, 6]);
    let x = random_tensor(&mut rng(20), &[1, 6, 6]);
    let all_on = MethodConfig {
        rise_keep_prob: 1.0 - 1e-12,
        rise_samples: 200,
        rise_grid: 3,
        ..Default::default()
    };
    let fx = lin.logits(&x).unwrap()[0];
    let m = rise(&lin, &x, 0, &all_on).unwrap();
    assert!(m.data().iter().all(|v| (v - fx).abs() < 1e-9));

    let flat = linear_model([1, 6, 6], &[vec![0.0; 36]], &[1.5]);
    let cfg = MethodConfig {
        rise_samples: 300,
        rise_grid: 3,
        ..Default::default()
    };
    let m = rise(&flat, &x, 0, &cfg).unwrap();
    assert!(m.data().iter().all(|v| (v - 1.5).abs() < 1e-12));
}

/// Exact expectation over all 2^4 coarse masks and the 4 sub-cell shifts,
/// with the per-pixel standard error of an `n`-sample ratio estimate.
fn rise_enumerated(net: &Network, x: &Tensor, p: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut outcomes = Vec::new();
    for bits in 0u32..16 {
        let coarse: Vec<bool> = (0..4).map(|i| bits >> i & 1 == 1).collect();
        let kept = bits.count_ones() as i32;
        let prob = p.powi(kept) * (1.0 - p).powi(4 - kept) / 4.0;
        for shift in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mask = rise_mask(&coarse, 2, shift, 4, 4);
            let masked = Tensor::from_fn(&[1, 4, 4], |j| x[j] * mask[j]);
            outcomes.push((prob, net.logits(&masked).unwrap()[0], mask));
        }
    }
    let mut mean = vec![0.0; 16];
    let mut se = vec![0.0; 16];
    for j in 0..16 {
        let fm: f64 = outcomes.iter().map(|(q, f, m)| q * f * m[j]).sum();
        let em: f64 = outcomes.iter().map(|(q, _, m)| q * m[j]).sum();
        mean[j] = fm / em;
        let var: f64 = outcomes
            .iter()
            .map(|(q, f, m)| q * (m[j] * (f - mean[j])).powi(2))
            .sum();
        se[j] = (var / n as f64).sqrt() / em;
    }
    (mean, se)
}

#[test]
fn rise_converges_to_enumerated_expectation() {
    let cfg = MethodConfig {
        rise_grid: 2,
        rise_samples: 10_000,
        ..Default::default()
    };
    // A single active quadrant keeps w ⊙ x smooth at the mask scale.
    let mut w = vec![0.05; 16];
    for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        w[r * 4 + c] = 1.0;
    }
    let lin = linear_model([1, 4, 4], &[w.clone()], &[0.0]);
    let x = Tensor::from_fn(&[1, 4, 4], |j| 0.5 + 0.05 * (j % 3) as f64);
    let mc = rise(&lin, &x, 0, &cfg).unwrap();
    let (exact, se) = rise_enumerated(&lin, &x, cfg.rise_keep_prob, cfg.rise_samples);
    for j in 0..16 {
        assert!((mc[j] - exact[j]).abs() < 5.0 * se[j], "pixel {j}");
    }
    assert!(pearson(mc.data(), &exact) > 0.9);
    // The smooth 2x2 masks blur w ⊙ x, so the limit itself is only partly
    // correlated with it; the estimate must reach that limit.
    let wx: Vec<f64> = w.iter().zip(x.data()).map(|(a, b)| a * b).collect();
    let (got, limit) = (pearson(mc.data(), &wx), pearson(&exact, &wx));
    assert!(limit > 0.5, "limit {limit}");
    assert!((got - limit).abs() < 0.02, "corr {got} vs limit {limit}");
}

#[test]
fn white_box_bypass_sigma_is_bitwise_identical() {
    let net = toy_cnn();
    let x = toy_input(21);
    let cfg = MethodConfig {
        n_samples: 6,
        ig_steps: 8,
        ..Default::default()
    };
    let plain = GradientProvider::new(net);
    let bypass = plain.with_sigma(Some(12.0)).unwrap();
    for m in Method::WHITE_BOX {
        let a = attribute_with(&plain, &x, 0, m, &cfg).unwrap();
        let b = attribute_with(&bypass, &x, 0, m, &cfg).unwrap();
        assert!(a.values.bitwise_eq(&b.values), "{m}");
    }
}

#[test]
fn provider_gradients() {
    let net = toy_cnn();
    let x = toy_input(22);
    let raw = net.backward_input(&net.forward(&x).unwrap(), 1, ReluMode::Standard).unwrap();
    let p = GradientProvider::new(net);
    assert!(p.gradient(&x, 1).unwrap().bitwise_eq(&raw));
    let f = p.with_sigma(Some(6.0)).unwrap();
    assert!(f.gradient(&x, 1).unwrap().bitwise_eq(&lowpass(&raw, 6.0).unwrap()));
    assert!(matches!(p.with_sigma(Some(-1.0)), Err(Error::NegativeSigma(_))));
    assert!(matches!(p.gradient(&x, 2), Err(Error::ClassOutOfRange { .. })));
}

#[test]
fn all_methods_are_deterministic_finite_and_shaped() {
    let net = toy_cnn();
    let x = toy_input(23);
    let cfg = MethodConfig {
        n_samples: 8,
        ig_steps: 16,
        rise_samples: 256,
        seed: 5,
        ..Default::default()
    };
    for m in Method::ALL {
        let a = attribute(net, &x, 1, m, &cfg).unwrap();
        let b = attribute(net, &x, 1, m, &cfg).unwrap();
        assert!(a.values.bitwise_eq(&b.values), "{m}");
        assert_eq!(a.values.shape(), &[12, 12]);
        assert!(a.values.is_finite());
        assert_eq!(a.provenance, Provenance::Unfiltered);
        if !matches!(m, Method::Occlusion | Method::Rise) {
            assert!(a.values.min() >= 0.0, "{m} negative");
        }
    }
}

#[test]
fn linear_identity_on_signed_maps() {
    let (lin, _) = random_linear(24, [1, 5, 5]);
    let x = random_tensor(&mut rng(25), &[1, 5, 5]);
    let p = GradientProvider::new(&lin);
    let cfg = MethodConfig {
        occlusion_patch: 1,
        occlusion_stride: 1,
        ..Default::default()
    };
    let occ = occlusion(&lin, &x, 0, &cfg).unwrap();
    let gi = gradient_input_signed(&p, &x, 0).unwrap().reshape(&[5, 5]).unwrap();
    let ig = integrated_gradients_signed(&p, &x, 0, &cfg).unwrap().reshape(&[5, 5]).unwrap();
    assert!(occ.max_abs_diff(&gi) < 1e-9);
    assert!(occ.max_abs_diff(&ig) < 1e-9);
}

#[test]
fn export_writes_tensor_and_sidecar() {
    let net = toy_cnn();
    let map = attribute(net, &toy_input(26), 0, Method::Saliency, &MethodConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.forg");
    let side = export_map(&map, &path, 9, "abc").unwrap();
    let (name, t) = load_tensor(&path).unwrap();
    assert_eq!(name, "saliency");
    assert!(t.bitwise_eq(&map.values));
    let meta: MapSidecar = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
    assert_eq!(meta.method, Method::Saliency);
    assert_eq!(meta.seed, 9);
    assert_eq!(meta.provenance, Provenance::Unfiltered);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channel_reduce_matches_scalar_oracle(seed in 0u64..10_000, c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let t = random_tensor(&mut rng(seed), &[c, h, w]);
        let r = channel_reduce(&t).unwrap();
        for p in 0..h * w {
            let mut s = 0.0;
            for ch in 0..c {
                s += t[ch * h * w + p].abs();
            }
            prop_assert!((r[p] - s / c as f64).abs() < 1e-15);
        }
    }
}
