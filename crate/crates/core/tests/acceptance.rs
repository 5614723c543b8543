//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero when any of them fails.

mod common;

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use forgrad::attribution::{
    attribute, integrated_gradients_signed, occlusion, GradientProvider, Method, MethodConfig,
};
use forgrad::data::{gen_synthetic, SplitManifest};
use forgrad::experiments::{
    experiment_layer_slopes, experiment_metric_bias, experiment_sanity, experiment_taylor,
};
use forgrad::metrics::{deletion, faithfulness, faithfulness_of, insertion, mean_faithfulness, MetricConfig};
use forgrad::nn::{accuracy, save_model, train, Network, Preset, TrainConfig};
use forgrad::repair::{
    attribute_filtered, search_curve, sigma_search, FilterMode, Objective, SearchSpec,
    SigmaGrid, SigmaSearchResult,
};
use forgrad::spectral::{dft2, idft2, lowpass};
use forgrad::Tensor;
use rand::Rng;

const SEED: u64 = 0;
const N_DATA: usize = 4000;
const N_EVAL: usize = 200;

struct Fixture {
    net: Network,
    test_accuracy: f64,
    val: Vec<Tensor>,
    test: Vec<Tensor>,
}

/// `cnn-max` trained on the default split of the synthetic shapes set.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = gen_synthetic(N_DATA, SEED).unwrap();
        let split = SplitManifest::default_for(N_DATA, SEED);
        let (train_x, train_y) = data.select(&split.train).unwrap();
        let (test_x, test_y) = data.select(&split.test).unwrap();
        let (val_x, _) = data.select(&split.val).unwrap();
        let net = Preset::CnnMax.build(data.input_shape().unwrap(), 2, SEED).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let net = train(&net, &train_x, &train_y, &cfg).unwrap().network;
        let test_accuracy = accuracy(&net, &test_x, &test_y).unwrap();
        Fixture {
            net,
            test_accuracy,
            val: val_x.into_iter().take(N_EVAL).collect(),
            test: test_x.into_iter().take(N_EVAL).collect(),
        }
    })
}

fn grid() -> SigmaGrid {
    SigmaGrid::default_for(28)
}

/// Faithfulness-objective search on the validation images, cached per method.
fn search(method: Method) -> SigmaSearchResult {
    static S: OnceLock<Mutex<BTreeMap<Method, SigmaSearchResult>>> = OnceLock::new();
    let cache = S.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&method) {
        return r.clone();
    }
    let f = fixture();
    let (mcfg, metric) = (MethodConfig::default(), MetricConfig::default());
    let spec = SearchSpec {
        method,
        method_cfg: &mcfg,
        metric_cfg: &metric,
        mode: FilterMode::Gradient,
        objective: Objective::Faithfulness,
    };
    let r = sigma_search(&f.net, &f.val, &grid(), &spec).unwrap();
    cache.lock().unwrap().insert(method, r.clone());
    r
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for kind in LAYER_KINDS {
        let mut r = rng(0xacc1 + kind.len() as u64);
        for _ in 0..10 {
            let (layers, input, classes) = config_for(kind, &mut r);
            let net = with_random_bias(&Network::init(layers, input, classes, r.random()).unwrap(), &mut r);
            let x = random_tensor(&mut r, &input);
            let target = r.random_range(0..classes);
            worst = worst
                .max(max_input_grad_error(&net, &x, target, FD_H))
                .max(max_param_grad_error(&net, &x, target, FD_H));
            configs += 1;
        }
    }
    check(worst < 1e-4, format!("{configs} configs, max rel err {worst:.2e}"))
}

fn spectral_oracle() -> Outcome {
    let mut dft_err: f64 = 0.0;
    let mut parseval: f64 = 0.0;
    for h in 1..=32 {
        for w in [h, 33 - h] {
            let mut r = rng((h * 64 + w) as u64);
            let x = Tensor::from_fn(&[h, w], |_| r.random_range(-1.0..1.0));
            let spec = dft2(&x).unwrap();
            for (c, (re, im)) in spec.coeffs.iter().zip(naive_dft(x.data(), h, w)) {
                dft_err = dft_err.max((c.re - re).abs()).max((c.im - im).abs());
            }
            let e: f64 = x.data().iter().map(|v| v * v).sum();
            let es: f64 = spec.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / (h * w) as f64;
            parseval = parseval.max((e - es).abs() / e);
            let back = idft2(&spec).unwrap();
            for (b, v) in back.iter().zip(x.data()) {
                dft_err = dft_err.max((b.re - v).abs());
            }
        }
    }
    let mut lp_ok = true;
    let mut r = rng(0xacc2);
    for _ in 0..20 {
        let (h, w) = (r.random_range(2..29), r.random_range(2..29));
        let x = Tensor::from_fn(&[h, w], |_| r.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[h, w], |_| r.random_range(-1.0..1.0));
        let sigma = r.random_range(0.5..h.max(w) as f64);
        lp_ok &= lowpass(&x, h.max(w) as f64).unwrap().bitwise_eq(&x);
        let mean = x.sum() / x.len() as f64;
        lp_ok &= lowpass(&x, 0.0).unwrap().data().iter().all(|v| (v - mean).abs() < 1e-12);
        let once = lowpass(&x, sigma).unwrap();
        lp_ok &= lowpass(&once, sigma).unwrap().max_abs_diff(&once) < 1e-9;
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let split = lowpass(&x, sigma)
            .unwrap()
            .zip_map(&lowpass(&y, sigma).unwrap(), |p, q| a * p + b * q)
            .unwrap();
        lp_ok &= lowpass(&combo, sigma).unwrap().max_abs_diff(&split) < 1e-9;
    }
    check(
        dft_err < 1e-9 && parseval < 1e-9 && lp_ok,
        format!("dft err {dft_err:.2e}, parseval rel {parseval:.2e}, lowpass properties {lp_ok}"),
    )
}

fn linear_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for seed in 0..10 {
        let mut r = rng(0xacc3 + seed);
        let n = 36;
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let net = linear_model([1, 6, 6], &[w.clone(), w2], &[0.2, -0.1]);
        let x = Tensor::from_fn(&[1, 6, 6], |_| r.random_range(-1.0..1.0));
        let base = MethodConfig::default();

        let sal = attribute(&net, &x, 0, Method::Saliency, &base).unwrap().values;
        worst = sal.data().iter().zip(&w).map(|(s, wi)| (s - wi.abs()).abs()).fold(worst, f64::max);

        let ig = integrated_gradients_signed(&GradientProvider::new(&net), &x, 0, &base).unwrap();
        let occ_cfg = MethodConfig {
            occlusion_patch: 1,
            occlusion_stride: 1,
            ..Default::default()
        };
        let occ = occlusion(&net, &x, 0, &occ_cfg).unwrap();
        for i in 0..n {
            let gx = w[i] * x[i];
            worst = worst.max((ig[i] - gx).abs()).max((occ[i] - gx).abs());
        }

        let quiet = MethodConfig {
            noise_std: 0.0,
            n_samples: 8,
            ..Default::default()
        };
        let sg = attribute(&net, &x, 0, Method::SmoothGrad, &quiet).unwrap().values;
        exact &= sg.bitwise_eq(&sal);
        let vg = attribute(&net, &x, 0, Method::VarGrad, &quiet).unwrap().values;
        exact &= vg.data().iter().all(|&v| v == 0.0);
    }
    check(
        worst < 1e-9 && exact,
        format!("max identity err {worst:.2e}, smoothgrad/vargrad exact {exact}"),
    )
}

fn ig_completeness() -> Outcome {
    let f = fixture();
    let p = GradientProvider::new(&f.net);
    let cfg = MethodConfig {
        ig_steps: 256,
        ..Default::default()
    };
    let zero = Tensor::zeros(f.net.input_shape().as_slice());
    let mut worst: f64 = 0.0;
    for x in &f.test[..50] {
        let c = f.net.forward(x).unwrap().predicted_class();
        let sum = integrated_gradients_signed(&p, x, c, &cfg).unwrap().sum();
        let delta = f.net.logits(x).unwrap()[c] - f.net.logits(&zero).unwrap()[c];
        worst = worst.max((sum - delta).abs() / delta.abs());
    }
    check(worst < 1e-2, format!("50 images, max rel completeness err {worst:.2e}"))
}

fn metric_arithmetic() -> Outcome {
    let f = fixture();
    let cfg = MetricConfig::default();
    let mut exact = true;
    for x in &f.test[..10] {
        let c = f.net.forward(x).unwrap().predicted_class();
        let m = attribute(&f.net, x, c, Method::Saliency, &MethodConfig::default()).unwrap().values;
        let fa = faithfulness(&f.net, x, &m, c, &cfg).unwrap();
        let (ins, del) = (insertion(&f.net, x, &m, c, &cfg).unwrap(), deletion(&f.net, x, &m, c, &cfg).unwrap());
        exact &= fa == ins - del;
    }
    let row = faithfulness_of(0.316, 0.127);
    check(
        exact && (row - 0.189).abs() < 1e-12,
        format!("F = I - D exact on 10 maps: {exact}; 0.316 - 0.127 = {row:.3}"),
    )
}

fn max_pool_slope() -> Outcome {
    let f = fixture();
    let images = &f.test[..50];
    let layer = Preset::CnnMax.first_pool().unwrap();
    let shape = f.net.input_shape();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let max = Preset::CnnMax.build(shape, 2, seed).unwrap();
        let avg = Preset::CnnAvg.build(shape, 2, seed).unwrap();
        let report = experiment_layer_slopes(&[("max".into(), &max), ("avg".into(), &avg)], images).unwrap();
        let (sm, sa) = (report.slope("max", layer).unwrap(), report.slope("avg", layer).unwrap());
        wins += usize::from(sm > sa);
        pairs.push(format!("{sm:.3}/{sa:.3}"));
    }
    check(
        wins >= 9,
        format!("layer {layer}: max > avg in {wins}/10 seeds (max/avg {})", pairs.join(" ")),
    )
}

fn taylor_ordering() -> Outcome {
    let f = fixture();
    let g = grid();
    let half = g.middle();
    let mut ok = true;
    let mut parts = Vec::new();
    for eps in [0.01, 0.05, 0.1] {
        let r = experiment_taylor(&f.net, &f.test[..100], &g, eps, SEED).unwrap();
        let filtered = r.ratio_at(half).unwrap();
        let worst = r.controls.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        ok &= r.controls.len() == 4 && filtered < worst;
        let controls: Vec<String> = r.controls.iter().map(|(n, v)| format!("{n} {v:.3}")).collect();
        parts.push(format!("eps {eps}: filtered {filtered:.3} vs {}", controls.join(", ")));
    }
    check(ok, format!("sigma {half}, 100 images; {}", parts.join("; ")))
}

fn headline() -> Outcome {
    let f = fixture();
    let (mcfg, metric) = (MethodConfig::default(), MetricConfig::default());
    let mut ok = f.test_accuracy >= 0.95;
    let mut parts = vec![format!("test acc {:.3}", f.test_accuracy)];
    for method in [Method::Saliency, Method::GradientInput, Method::SmoothGrad, Method::IntegratedGradients] {
        let star = search(method).sigma_star;
        let score = |sigma: Option<f64>| {
            mean_faithfulness(
                &f.net,
                &f.test,
                |x: &Tensor, c: usize| match sigma {
                    None => attribute(&f.net, x, c, method, &mcfg).map(|m| m.values),
                    Some(sg) => attribute_filtered(&f.net, x, c, method, &mcfg, sg, FilterMode::Gradient).map(|m| m.values),
                },
                &metric,
            )
            .unwrap()
        };
        let (plain, filtered) = (score(None), score(Some(star)));
        let margin = if method == Method::Saliency { 0.02 } else { 0.0 };
        ok &= filtered >= plain + margin;
        parts.push(format!("{method} {plain:.4} -> {filtered:.4} (sigma* {star})"));
    }
    check(ok, parts.join("; "))
}

fn search_contract() -> Outcome {
    let g = grid();
    let mut ok = true;
    for peak in g.values() {
        let r = search_curve(&g, 1, |s| Ok(-(s - peak).abs())).unwrap();
        ok &= r.sigma_star == *peak;
    }
    let plateau = search_curve(&g, 1, |s| Ok(if s <= 16.0 { 1.0 } else { 0.5 })).unwrap();
    ok &= plateau.sigma_star == 16.0;
    ok &= search_curve(&g, 1, |_| Ok(0.0)).unwrap().sigma_star == g.bypass();
    let mut parts = vec![format!("injected curves {ok}")];
    for method in [Method::Saliency, Method::GradientInput, Method::SmoothGrad, Method::IntegratedGradients] {
        let r = search(method);
        let (star, bypass) = (r.value_at(r.sigma_star).unwrap(), r.value_at(g.bypass()).unwrap());
        ok &= star >= bypass;
        parts.push(format!("{method} {bypass:.4} -> {star:.4}"));
    }
    check(ok, parts.join("; "))
}

fn metric_bias() -> Outcome {
    let f = fixture();
    let r = experiment_metric_bias(&f.net, &f.test, &MetricConfig::default(), SEED).unwrap();
    let (mu, fa) = (r.mu_fidelity_gap(), r.faithfulness_gap());
    check(
        mu > 0.0 && fa.abs() < mu / 2.0,
        format!(
            "{} pairs; muF blob {:.4} dispersed {:.4} (gap {mu:.4}); F blob {:.4} dispersed {:.4} (gap {fa:.4})",
            r.n_pairs, r.blob.mu_fidelity, r.dispersed.mu_fidelity, r.blob.faithfulness, r.dispersed.faithfulness
        ),
    )
}

fn sanity() -> Outcome {
    let f = fixture();
    let cfg = MethodConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for method in Method::WHITE_BOX {
        let r = experiment_sanity(&f.net, &f.test[..50], method, search(method).sigma_star, &cfg, SEED).unwrap();
        let (plain, filt) = (r.verdict(method, false).unwrap(), r.verdict(method, true).unwrap());
        if method == Method::Saliency {
            ok &= filt.passes;
        }
        ok &= plain.passes == filt.passes;
        parts.push(format!(
            "{method} {:.3}/{:.3}*",
            plain.full_randomization, filt.full_randomization
        ));
    }
    check(ok, format!("full randomization |rho| plain/filtered: {}", parts.join(" ")))
}

fn reproducibility() -> Outcome {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.forg");
    save_model(&f.net, &model).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_forgrad"))
            .args(["evaluate", "--method", "smoothgrad", "--sigma", "12", "--n-images", "20", "--seed", "0"])
            .arg("--model")
            .arg(&model)
            .arg("--data")
            .arg(format!("synthetic:{N_DATA}"))
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        ["report.json", "report.csv"].map(|file| std::fs::read(out.join(file)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    check(a == b, format!("report.json and report.csv identical: {}", a == b))
}

fn prefetch_searches() {
    for method in Method::WHITE_BOX {
        search(method);
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Option<u64>, Option<fn()>);
    let criteria: [Criterion; 12] = [
        ("gradient exactness", gradient_exactness, Some(60), None),
        ("spectral oracle", spectral_oracle, Some(60), None),
        ("analytic method identities", linear_identities, Some(60), None),
        ("integrated gradients completeness", ig_completeness, Some(120), None),
        ("metric arithmetic", metric_arithmetic, None, None),
        ("max-pool spectral slope", max_pool_slope, Some(300), None),
        ("taylor ordering", taylor_ordering, Some(300), None),
        ("filtered faithfulness", headline, Some(900), None),
        ("cutoff search contract", search_contract, None, None),
        ("metric-bias control", metric_bias, Some(300), None),
        ("sanity check", sanity, Some(300), Some(prefetch_searches)),
        ("reproducibility", reproducibility, None, None),
    ];
    let t = Instant::now();
    fixture();
    println!("fixture: trained cnn-max in {:.1}s", t.elapsed().as_secs_f64());
    let mut failed = 0;
    for (i, (name, run, limit, setup)) in criteria.into_iter().enumerate() {
        let setup_note = setup.map_or(String::new(), |f| {
            let t = Instant::now();
            f();
            format!(", setup {:.1}s untimed", t.elapsed().as_secs_f64())
        });
        let t = Instant::now();
        let outcome = run();
        let took = t.elapsed();
        let in_time = limit.is_none_or(|s| took <= Duration::from_secs(s));
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        let budget = limit.map_or(String::new(), |s| format!(" / {s}s"));
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.1}s{budget}{setup_note}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
