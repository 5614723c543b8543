use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use forgrad::attribution::{attribute, export_map, BaselineMode, Method, Provenance};
use forgrad::data::{gen_synthetic, save_dataset_dir, Dataset, Split, SplitManifest};
use forgrad::experiments::{
    experiment_layer_slopes, experiment_metric_bias, experiment_sanity, experiment_taylor, layer_slopes,
    taylor_csv, ExperimentConfig, LayerSlope, LayerSlopeReport, SanityReport,
};
use forgrad::harness::{rank_reports, ranking_csv, DataSpec, OutputDir, RunManifest};
use forgrad::metrics::{evaluate, MetricReport, ReportMeta};
use forgrad::nn::{accuracy, load_model, model_hash, save_model, train, Network, Preset};
use forgrad::repair::{attribute_filtered, sigma_search, FilterMode, Objective, SearchSpec, SigmaFile, SigmaGrid};
use forgrad::spectral::{power_slope, radial_signature};
use forgrad::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "forgrad", version, about = "Attribution maps, their spectra, and low-pass repair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (IDX files and split manifest) to --out.
    GenData(Common),
    /// Train a preset architecture on the train split.
    Train(Common),
    /// Export attribution maps for test-split images.
    Attribute(Common),
    /// Radial Fourier signature of attribution maps.
    Spectrum(Common),
    /// Power/frequency slope of attribution maps.
    Slope(Common),
    /// Search the cutoff on the validation split.
    SigmaSearch(Common),
    /// Score a method on the test split.
    Evaluate(Common),
    /// Rank evaluated methods by F + μF − S.
    Rank {
        /// report.json files or directories containing one.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run one of the analysis experiments.
    Experiment {
        kind: ExperimentKind,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Taylor,
    LayerSlopes,
    Sanity,
    MetricBias,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Zero,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gradient,
    Map,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Faithfulness,
    MuFidelity,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    model: Option<PathBuf>,
    /// PATH or synthetic:N
    #[arg(long, default_value = "synthetic:4000")]
    data: String,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, conflicts_with = "sigma_file")]
    sigma: Option<f64>,
    #[arg(long)]
    sigma_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gradient")]
    mode: ModeArg,
    /// Comma-separated descending cutoffs.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON file with `method`, `metric`, `train`, `n_images`, ... fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_images: Option<usize>,
    /// Architecture for `train`.
    #[arg(long, default_value = "cnn-max")]
    preset: String,
    #[arg(long, value_enum, default_value = "faithfulness")]
    objective: ObjectiveArg,
}

/// Parsed flags plus everything loaded from them.
struct Ctx {
    common: Common,
    cfg: ExperimentConfig,
    data: DataSpec,
    inputs: BTreeMap<String, String>,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(n) = common.n_images {
            cfg.n_images = n;
        }
        if let Some(b) = common.baseline {
            cfg.metric.baseline = match b {
                BaselineArg::Zero => BaselineMode::Value(0.0),
                BaselineArg::Noise => BaselineMode::UniformNoise,
            };
        }
        cfg.method.seed = common.seed;
        cfg.metric.seed = common.seed;
        cfg.train.seed = common.seed;
        cfg.validate()?;
        let data = common.data.parse()?;
        Ok(Ctx {
            common,
            cfg,
            data,
            inputs: BTreeMap::new(),
        })
    }

    fn method(&self) -> Result<Method> {
        self.common.method.as_deref().unwrap_or("saliency").parse()
    }

    fn mode(&self) -> FilterMode {
        match self.common.mode {
            ModeArg::Gradient => FilterMode::Gradient,
            ModeArg::Map => FilterMode::Map,
        }
    }

    fn model(&mut self) -> Result<Network> {
        let path = self
            .common
            .model
            .clone()
            .ok_or_else(|| Error::InvalidConfig("--model is required".into()))?;
        let net = load_model(&path)?;
        self.inputs.insert("model".into(), path.display().to_string());
        self.inputs.insert("model_hash".into(), model_hash(&net));
        Ok(net)
    }

    fn dataset(&mut self) -> Result<(Dataset, SplitManifest)> {
        let (data, split) = self.data.load(self.common.seed)?;
        self.inputs.insert("data".into(), self.data.to_string());
        self.inputs.insert("split_manifest_hash".into(), split.hash());
        Ok((data, split))
    }

    /// First `n_images` images of one split, in manifest order.
    fn split_images(&mut self, which: Split) -> Result<(Vec<Tensor>, Vec<usize>, SplitManifest)> {
        let (data, split) = self.dataset()?;
        let idx = split.indices(which);
        let take = &idx[..idx.len().min(self.cfg.n_images)];
        let (images, _) = data.select(take)?;
        Ok((images, take.to_vec(), split))
    }

    fn grid(&self, side: usize) -> Result<SigmaGrid> {
        match &self.common.grid {
            Some(g) => SigmaGrid::parse_csv(g),
            None => Ok(SigmaGrid::default_for(side)),
        }
    }

    fn out(&self) -> Result<OutputDir> {
        OutputDir::create(&self.common.out)
    }

    fn finish(self, out: OutputDir, command: &str, started: Instant) -> Result<()> {
        out.finish(RunManifest {
            tool: "forgrad".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            seed: self.common.seed,
            inputs: self.inputs,
            outputs: BTreeMap::new(),
            runtime_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// A cutoff from --sigma or a sigma file, checked against the model and split.
struct Cutoff {
    sigma: f64,
    method: Option<Method>,
    mode: Option<FilterMode>,
}

fn resolve_cutoff(ctx: &mut Ctx, net: &Network, split: &SplitManifest) -> Result<Option<Cutoff>> {
    if let Some(sigma) = ctx.common.sigma {
        return Ok(Some(Cutoff {
            sigma,
            method: None,
            mode: None,
        }));
    }
    let Some(path) = ctx.common.sigma_file.clone() else {
        return Ok(None);
    };
    let file = SigmaFile::load(&path)?;
    if file.split_manifest_hash != split.hash() {
        return Err(Error::SplitViolation(format!(
            "{} was searched on a different split manifest",
            path.display()
        )));
    }
    if file.model_hash != model_hash(net) {
        return Err(Error::Validation(format!("{} belongs to a different model", path.display())));
    }
    ctx.inputs.insert("sigma_file".into(), path.display().to_string());
    Ok(Some(Cutoff {
        sigma: file.sigma_star,
        method: Some(file.method),
        mode: Some(file.mode),
    }))
}

fn method_and_mode(ctx: &Ctx, cutoff: &Option<Cutoff>) -> Result<(Method, FilterMode)> {
    let file_method = cutoff.as_ref().and_then(|c| c.method);
    let method = match (&ctx.common.method, file_method) {
        (None, Some(m)) => m,
        (Some(_), Some(m)) if ctx.method()? != m => {
            return Err(Error::InvalidConfig(format!(
                "--method {} disagrees with sigma file method {m}",
                ctx.method()?
            )))
        }
        _ => ctx.method()?,
    };
    let mode = cutoff.as_ref().and_then(|c| c.mode).unwrap_or_else(|| ctx.mode());
    Ok((method, mode))
}

fn explain_fn<'a>(
    net: &'a Network,
    method: Method,
    mode: FilterMode,
    sigma: Option<f64>,
    cfg: &'a ExperimentConfig,
) -> impl Fn(&Tensor, usize) -> Result<Tensor> + Sync + 'a {
    move |x: &Tensor, c: usize| {
        match sigma {
            Some(s) => attribute_filtered(net, x, c, method, &cfg.method, s, mode),
            None => attribute(net, x, c, method, &cfg.method),
        }
        .map(|m| m.values)
    }
}

fn side_of(images: &[Tensor]) -> Result<usize> {
    let (h, w) = images
        .first()
        .ok_or(Error::EmptyInput)?
        .spatial()
        .ok_or_else(|| Error::Validation("images must be (C, H, W)".into()))?;
    Ok(h.min(w))
}

fn cmd_gen_data(mut ctx: Ctx, started: Instant) -> Result<()> {
    let DataSpec::Synthetic(n) = ctx.data else {
        return Err(Error::InvalidConfig("gen-data needs --data synthetic:N".into()));
    };
    let data = gen_synthetic(n, ctx.common.seed)?;
    let split = SplitManifest::default_for(n, ctx.common.seed);
    let mut out = ctx.out()?;
    save_dataset_dir(&data, &split, &ctx.common.out)?;
    for f in [forgrad::data::IMAGES_FILE, forgrad::data::LABELS_FILE, forgrad::data::SPLIT_FILE] {
        out.record(f)?;
    }
    ctx.inputs.insert("data".into(), ctx.data.to_string());
    ctx.finish(out, "gen-data", started)
}

fn cmd_train(mut ctx: Ctx, started: Instant) -> Result<()> {
    let preset: Preset = ctx.common.preset.parse()?;
    let (data, split) = ctx.dataset()?;
    let (train_x, train_y) = data.select(&split.train)?;
    let (val_x, val_y) = data.select(&split.val)?;
    let net = preset.build(data.input_shape()?, data.num_classes, ctx.common.seed)?;
    let outcome = train(&net, &train_x, &train_y, &ctx.cfg.train)?;
    let val_accuracy = if val_x.is_empty() {
        None
    } else {
        Some(accuracy(&outcome.network, &val_x, &val_y)?)
    };
    let mut out = ctx.out()?;
    save_model(&outcome.network, out.path("model.forg"))?;
    out.record("model.forg")?;
    let summary = serde_json::json!({
        "preset": preset.to_string(),
        "model_hash": model_hash(&outcome.network),
        "train": ctx.cfg.train,
        "loss_history": outcome.loss_history,
        "train_accuracy": outcome.train_accuracy,
        "val_accuracy": val_accuracy,
    });
    out.write("train.json", serde_json::to_string_pretty(&summary)?)?;
    ctx.finish(out, "train", started)
}

fn cmd_attribute(mut ctx: Ctx, started: Instant) -> Result<()> {
    let net = ctx.model()?;
    let (images, indices, split) = ctx.split_images(Split::Test)?;
    let cutoff = resolve_cutoff(&mut ctx, &net, &split)?;
    let (method, mode) = method_and_mode(&ctx, &cutoff)?;
    let hash = model_hash(&net);
    let mut out = ctx.out()?;
    std::fs::create_dir_all(out.path("maps"))?;
    for (x, idx) in images.iter().zip(&indices) {
        let c = net.forward(x)?.predicted_class();
        let map = match &cutoff {
            Some(cut) => attribute_filtered(&net, x, c, method, &ctx.cfg.method, cut.sigma, mode)?,
            None => attribute(&net, x, c, method, &ctx.cfg.method)?,
        };
        let name = format!("maps/{method}_{idx:05}.forg");
        let path = export_map(&map, out.path(&name), ctx.common.seed, &hash)?;
        out.record(&name)?;
        let sidecar = path.file_name().expect("file").to_string_lossy().into_owned();
        out.record(&format!("maps/{sidecar}"))?;
    }
    ctx.finish(out, "attribute", started)
}

fn test_maps(ctx: &mut Ctx) -> Result<(Vec<Tensor>, Method, Option<f64>)> {
    let net = ctx.model()?;
    let (images, _, split) = ctx.split_images(Split::Test)?;
    let cutoff = resolve_cutoff(ctx, &net, &split)?;
    let (method, mode) = method_and_mode(ctx, &cutoff)?;
    let sigma = cutoff.map(|c| c.sigma);
    let explain = explain_fn(&net, method, mode, sigma, &ctx.cfg);
    let maps = images
        .iter()
        .map(|x| explain(x, net.forward(x)?.predicted_class()))
        .collect::<Result<_>>()?;
    Ok((maps, method, sigma))
}

fn cmd_spectrum(mut ctx: Ctx, started: Instant) -> Result<()> {
    let (maps, _, _) = test_maps(&mut ctx)?;
    let sig = radial_signature(&maps)?;
    let mut out = ctx.out()?;
    out.write("signature.csv", sig.to_csv())?;
    ctx.finish(out, "spectrum", started)
}

fn cmd_slope(mut ctx: Ctx, started: Instant) -> Result<()> {
    let (maps, method, sigma) = test_maps(&mut ctx)?;
    let fit = power_slope(&radial_signature(&maps)?)?;
    let variant = match sigma {
        Some(s) => format!("{method}@{s}"),
        None => method.to_string(),
    };
    let report = LayerSlopeReport {
        n_images: maps.len(),
        rows: vec![LayerSlope {
            variant,
            layer: 0,
            kind: "map".into(),
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
        }],
    };
    let mut out = ctx.out()?;
    out.write("slopes.csv", report.to_csv())?;
    ctx.finish(out, "slope", started)
}

fn cmd_sigma_search(mut ctx: Ctx, started: Instant) -> Result<()> {
    let net = ctx.model()?;
    let (images, _, split) = ctx.split_images(Split::Val)?;
    if images.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let method = ctx.method()?;
    let mode = ctx.mode();
    let grid = ctx.grid(side_of(&images)?)?;
    let spec = SearchSpec {
        method,
        method_cfg: &ctx.cfg.method,
        metric_cfg: &ctx.cfg.metric,
        mode,
        objective: match ctx.common.objective {
            ObjectiveArg::Faithfulness => Objective::Faithfulness,
            ObjectiveArg::MuFidelity => Objective::MuFidelity,
        },
    };
    let result = sigma_search(&net, &images, &grid, &spec)?;
    let file = SigmaFile {
        model_hash: model_hash(&net),
        method,
        mode,
        grid,
        curve: result.curve,
        sigma_star: result.sigma_star,
        n_images: result.n_images,
        split_manifest_hash: split.hash(),
    };
    let mut out = ctx.out()?;
    out.write("sigma.json", serde_json::to_string_pretty(&file)?)?;
    ctx.finish(out, "sigma-search", started)
}

fn cmd_evaluate(mut ctx: Ctx, started: Instant) -> Result<()> {
    let net = ctx.model()?;
    let (images, indices, split) = ctx.split_images(Split::Test)?;
    let cutoff = resolve_cutoff(&mut ctx, &net, &split)?;
    let (method, mode) = method_and_mode(&ctx, &cutoff)?;
    let sigma = cutoff.map(|c| c.sigma);
    let mut result = evaluate(&net, &images, explain_fn(&net, method, mode, sigma, &ctx.cfg), &ctx.cfg.metric)?;
    for (r, &idx) in result.per_image.iter_mut().zip(&indices) {
        r.index = idx;
    }
    let provenance = match (sigma, mode) {
        (None, _) => Provenance::Unfiltered,
        (Some(_), FilterMode::Gradient) => Provenance::GradientFiltered,
        (Some(_), FilterMode::Map) => Provenance::MapFiltered,
    };
    let report = MetricReport::new(
        ReportMeta {
            model_hash: model_hash(&net),
            method,
            sigma,
            provenance,
        },
        result,
    );
    let mut out = ctx.out()?;
    out.write("report.json", report.to_json()?)?;
    out.write("report.csv", report.to_csv())?;
    ctx.finish(out, "evaluate", started)
}

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<MetricReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.push(p.join("report.json"));
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f)?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", f.display())))
        })
        .collect()
}

fn cmd_rank(mut ctx: Ctx, reports: &[PathBuf], started: Instant) -> Result<()> {
    let reports = collect_reports(reports)?;
    let rows = rank_reports(&reports);
    let mut out = ctx.out()?;
    out.write("ranking.csv", ranking_csv(&rows))?;
    out.write("ranking.json", serde_json::to_string_pretty(&rows)?)?;
    ctx.inputs.insert("reports".into(), reports.len().to_string());
    ctx.finish(out, "rank", started)
}

fn cmd_experiment(mut ctx: Ctx, kind: ExperimentKind, started: Instant) -> Result<()> {
    let seed = ctx.common.seed;
    match kind {
        ExperimentKind::Taylor => {
            let net = ctx.model()?;
            let (images, _, _) = ctx.split_images(Split::Test)?;
            let grid = ctx.grid(side_of(&images)?)?;
            let reports = ctx
                .cfg
                .epsilon_scales
                .iter()
                .map(|&e| experiment_taylor(&net, &images, &grid, e, seed))
                .collect::<Result<Vec<_>>>()?;
            let mut out = ctx.out()?;
            out.write("taylor.csv", taylor_csv(&reports))?;
            out.write("taylor.json", serde_json::to_string_pretty(&reports)?)?;
            ctx.finish(out, "experiment taylor", started)
        }
        ExperimentKind::LayerSlopes => {
            let (images, _, _) = ctx.split_images(Split::Test)?;
            let (data, _) = ctx.dataset()?;
            let trained = match ctx.common.model {
                Some(_) => Some(ctx.model()?),
                None => None,
            };
            let shape: [usize; 3] = images[0]
                .shape()
                .try_into()
                .map_err(|_| Error::Validation("images must be (C, H, W)".into()))?;
            let mut variants: Vec<(String, Network)> = Vec::new();
            for &s in &ctx.cfg.slope_seeds {
                for p in [Preset::CnnMax, Preset::CnnAvg, Preset::CnnStride(1), Preset::CnnStride(2)] {
                    variants.push((format!("untrained-{p}-seed{s}"), p.build(shape, data.num_classes, s)?));
                }
            }
            let named: Vec<(String, &Network)> = variants.iter().map(|(n, v)| (n.clone(), v)).collect();
            let mut report = experiment_layer_slopes(&named, &images)?;
            if let Some(net) = &trained {
                let mut rows = layer_slopes("trained", net, &images)?;
                rows.append(&mut report.rows);
                report.rows = rows;
            }
            let mut out = ctx.out()?;
            out.write("slopes.csv", report.to_csv())?;
            out.write("slopes.json", serde_json::to_string_pretty(&report)?)?;
            ctx.finish(out, "experiment layer-slopes", started)
        }
        ExperimentKind::Sanity => {
            let net = ctx.model()?;
            let (images, _, split) = ctx.split_images(Split::Test)?;
            let cutoff = resolve_cutoff(&mut ctx, &net, &split)?;
            let sigma = match cutoff {
                Some(c) => c.sigma,
                None => ctx.grid(side_of(&images)?)?.middle(),
            };
            let methods = match ctx.common.method.as_deref() {
                None | Some("all") => Method::WHITE_BOX.to_vec(),
                Some(_) => vec![ctx.method()?],
            };
            let reports = methods
                .iter()
                .map(|&m| experiment_sanity(&net, &images, m, sigma, &ctx.cfg.method, seed))
                .collect::<Result<Vec<_>>>()?;
            let report = SanityReport::merge(reports)?;
            let mut out = ctx.out()?;
            out.write("sanity.csv", report.to_csv())?;
            out.write("sanity.json", serde_json::to_string_pretty(&report)?)?;
            ctx.finish(out, "experiment sanity", started)
        }
        ExperimentKind::MetricBias => {
            let net = ctx.model()?;
            let (images, _, _) = ctx.split_images(Split::Test)?;
            let report = experiment_metric_bias(&net, &images, &ctx.cfg.metric, seed)?;
            let mut out = ctx.out()?;
            out.write("bias.csv", report.to_csv())?;
            out.write("bias.json", serde_json::to_string_pretty(&report)?)?;
            ctx.finish(out, "experiment metric-bias", started)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::GenData(c) => cmd_gen_data(Ctx::new(c)?, started),
        Command::Train(c) => cmd_train(Ctx::new(c)?, started),
        Command::Attribute(c) => cmd_attribute(Ctx::new(c)?, started),
        Command::Spectrum(c) => cmd_spectrum(Ctx::new(c)?, started),
        Command::Slope(c) => cmd_slope(Ctx::new(c)?, started),
        Command::SigmaSearch(c) => cmd_sigma_search(Ctx::new(c)?, started),
        Command::Evaluate(c) => cmd_evaluate(Ctx::new(c)?, started),
        Command::Rank { reports, common } => cmd_rank(Ctx::new(common)?, &reports, started),
        Command::Experiment { kind, common } => cmd_experiment(Ctx::new(common)?, kind, started),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
