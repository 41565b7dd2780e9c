use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use memsnn::convert::{convert, SnnLayer, SnnProgram};
use memsnn::cost;
use memsnn::data::{Dataset, Split};
use memsnn::io::persist::{load_model, load_program, save_model, save_program};
use memsnn::io::{load_mnist, ExperimentConfig};
use memsnn::montecarlo::{run_sweep, PerturbationKind};
use memsnn::nn::{self, NetworkModel};
use memsnn::snn::{self, Engine, RuntimeNoise, SimConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(memsnn::Error),
    Output(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output(m) => write!(f, "writing output: {m}"),
        }
    }
}

impl From<memsnn::Error> for CliError {
    fn from(e: memsnn::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Stochastic memristor spiking network simulator.
#[derive(Debug, Parser)]
#[command(name = "memsnn", version, args_override_self = true)]
pub struct Cli {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Directory holding the four MNIST IDX files. Falls back to
    /// $MEMSNN_MNIST_DIR, then `data/mnist`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the CNN on the MNIST training split.
    Train(TrainArgs),
    /// Map a trained model onto crossbars and memristor neurons.
    Convert(ConvertArgs),
    /// Run spiking inference on test images.
    Infer(InferArgs),
    /// Monte Carlo accuracy sweep under one perturbation kind.
    Sweep(SweepArgs),
    /// Accuracy as a function of step count and write pulse width.
    AccuracyCurve(CurveArgs),
    /// Analytic conversion error over an (input rate, weight) grid.
    ErrorSurface(SurfaceArgs),
    /// Energy, latency and area estimate.
    Cost(CostArgs),
    /// Re-run the experiment recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Override `[train] epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train on the first N training images only.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    pub eval_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub model: PathBuf,
}

/// Where the spiking program comes from.
#[derive(Debug, Args)]
pub struct ProgramSource {
    /// Converted program file.
    #[arg(long, conflicts_with = "model")]
    pub program: Option<PathBuf>,
    /// Trained model, converted with the `[convert]` config.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub source: ProgramSource,
    /// Number of test images (default: `[sim] image_subset`, else all).
    #[arg(long)]
    pub images: Option<usize>,
    /// Write the spike raster of this test image.
    #[arg(long)]
    pub dump_raster: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: ProgramSource,
    /// bias, weight, pulse-width, tau0, v0, prob-curve or rmeas.
    #[arg(long)]
    pub kind: String,
    /// Comma-separated perturbation strengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigmas: Vec<f64>,
    /// Trials per perturbed point (default: `[sweep] trials`).
    #[arg(long)]
    pub trials: Option<usize>,
    /// Test images per trial (default: `[sweep] image_count`).
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub source: ProgramSource,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10,20,50,100")]
    pub steps: Vec<usize>,
    /// Comma-separated write pulse widths in seconds (default: device t_write).
    #[arg(long, value_delimiter = ',')]
    pub t_write: Vec<f64>,
    /// Number of test images (default: `[sim] image_subset`, else all).
    #[arg(long)]
    pub images: Option<usize>,
    /// Inference seeds averaged per point, starting at the master seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[arg(long, default_value_t = 11)]
    pub x_points: usize,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    pub w_min: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub w_max: f64,
    #[arg(long, default_value_t = 81)]
    pub w_points: usize,
    /// Also write the error weighted by this model's weight histogram.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub source: ProgramSource,
    /// Test images averaged for activity (default: `[cost] activity_images`).
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments as given, without the program name.
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub data_dir: String,
    /// Fully resolved config, TOML.
    pub config: String,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    data_dir: PathBuf,
    threads: usize,
    argv: Vec<String>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn test_set(&self) -> Result<Dataset> {
        Ok(load_mnist(&self.data_dir, Split::Test)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        Ok(csv::Writer::from_writer(BufWriter::new(File::create(self.path(name))?)))
    }

    fn manifest(&self, command: &str) -> Result<()> {
        let m = Manifest {
            tool: "memsnn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: self.argv.clone(),
            seed: self.cfg.seed,
            threads: self.threads,
            data_dir: self.data_dir.display().to_string(),
            config: self.cfg.to_toml(),
        };
        self.write_json("manifest.json", &m)
    }

    fn program(&self, src: &ProgramSource) -> Result<SnnProgram> {
        match (&src.program, &src.model) {
            (Some(p), _) => Ok(load_program(p)?),
            (None, Some(m)) => Ok(convert(&load_model(m)?, &self.cfg.device, &self.cfg.convert)?),
            (None, None) => Err(CliError::Usage("either --program or --model is required".into())),
        }
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    run_with(cli, argv, None)
}

fn run_with(cli: Cli, argv: Vec<String>, config_text: Option<String>) -> Result<()> {
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.threads
    };
    // A second build in the same process (replay) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let mut cfg = match (config_text, &cli.config) {
        (Some(text), _) => ExperimentConfig::from_toml(&text)?,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (None, None) => ExperimentConfig::default().resolved(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let data_dir = cli
        .data_dir
        .clone()
        .or_else(|| std::env::var_os("MEMSNN_MNIST_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    fs::create_dir_all(&cli.out)?;
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
        data_dir,
        threads,
        argv,
    };
    match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Convert(a) => convert_cmd(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::AccuracyCurve(a) => accuracy_curve(&ctx, a),
        Command::ErrorSurface(a) => error_surface(&ctx, a),
        Command::Cost(a) => cost_cmd(&ctx, a),
        Command::Replay(a) => replay(&cli.out, a),
    }
}

fn replay(out: &Path, a: ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest)?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.manifest.display())))?;
    if m.command == "replay" {
        return Err(CliError::Usage("manifest records a replay".into()));
    }
    let mut argv = m.argv.clone();
    argv.extend(["--out".to_string(), out.display().to_string()]);
    argv.extend(["--data-dir".to_string(), m.data_dir.clone()]);
    let cli = Cli::try_parse_from(std::iter::once("memsnn".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    info!("replaying `{}` into {}", m.command, out.display());
    run_with(cli, argv, Some(m.config))
}

#[derive(Serialize)]
struct ModelSummary {
    input_shape: [usize; 3],
    layers: Vec<String>,
    b0: f64,
    param_count: usize,
    checksum: String,
}

fn model_summary(m: &NetworkModel) -> ModelSummary {
    ModelSummary {
        input_shape: m.input_shape(),
        layers: m.layers().iter().map(|l| format!("{l:?}")).collect(),
        b0: m.b0(),
        param_count: m.param_count(),
        checksum: format!("{:016x}", m.checksum()),
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut tc = ctx.cfg.train;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let mut train_set = load_mnist(&ctx.data_dir, Split::Train)?;
    if let Some(n) = a.train_limit {
        train_set = train_set.head(n);
    }
    let mut test = ctx.test_set()?;
    if let Some(n) = a.eval_limit {
        test = test.head(n);
    }
    let mut model = NetworkModel::reference_cnn(tc.b0, tc.seed);
    info!(
        "training on {} images, {} epochs, lr {}, batch {}",
        train_set.len(),
        tc.epochs,
        tc.learning_rate,
        tc.batch_size
    );
    let hist = nn::train(&mut model, &train_set, Some(&test), &tc, |s| {
        info!(
            "epoch {}: loss {:.5}, train {:.4}, test {:.4}",
            s.epoch,
            s.mean_loss,
            s.train_accuracy,
            s.eval_accuracy.unwrap_or(f64::NAN)
        );
    })?;
    let mut w = ctx.csv("train_log.csv")?;
    w.write_record(["epoch", "mean_loss", "train_accuracy", "test_accuracy"])?;
    for s in &hist {
        w.serialize((s.epoch, s.mean_loss, s.train_accuracy, s.eval_accuracy))?;
    }
    w.flush()?;
    save_model(&model, &ctx.path("model.msnn"))?;
    ctx.write_json("model.json", &model_summary(&model))?;
    ctx.manifest("train")
}

#[derive(Serialize)]
struct LayerSummary {
    kind: String,
    neurons: usize,
    tiles: usize,
    replicas: usize,
    scale: f64,
}

#[derive(Serialize)]
struct ProgramSummary {
    bits: Option<u32>,
    r_meas: f64,
    neuron_count: usize,
    layers: Vec<LayerSummary>,
    v_bias: f64,
    v_low: f64,
    v_high: f64,
}

fn program_summary(p: &SnnProgram) -> ProgramSummary {
    let map = p.neuron_layers().next().map(|n| n.map);
    ProgramSummary {
        bits: p.bits,
        r_meas: p.r_meas,
        neuron_count: p.neuron_count(),
        layers: p
            .layers
            .iter()
            .map(|l| match l {
                SnnLayer::Neurons(n) => LayerSummary {
                    kind: n.spec.name().into(),
                    neurons: n.neurons(),
                    tiles: n.crossbar.tile_count(),
                    replicas: n.replicas(),
                    scale: n.scale,
                },
                SnnLayer::Subsample { .. } => LayerSummary {
                    kind: "subsample".into(),
                    neurons: 0,
                    tiles: 0,
                    replicas: 0,
                    scale: 1.0,
                },
            })
            .collect(),
        v_bias: map.map_or(0.0, |m| m.v_bias),
        v_low: map.map_or(0.0, |m| m.v_low),
        v_high: map.map_or(0.0, |m| m.v_high),
    }
}

fn convert_cmd(ctx: &Ctx, a: ConvertArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let program = convert(&model, &ctx.cfg.device, &ctx.cfg.convert)?;
    save_program(&program, &ctx.path("program.msnp"))?;
    ctx.write_json("program.json", &program_summary(&program))?;
    info!("converted {} neurons", program.neuron_count());
    ctx.manifest("convert")
}

#[derive(Serialize)]
struct InferSummary {
    images: usize,
    steps: usize,
    accuracy: f64,
    ann_accuracy: Option<f64>,
}

fn infer(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let program = ctx.program(&a.source)?;
    let test = ctx.test_set()?;
    let n = a.images.or(ctx.cfg.sim.image_subset).unwrap_or(test.len()).min(test.len());
    let data = test.head(n);
    let sim = SimConfig {
        image_subset: None,
        ..ctx.cfg.sim
    };
    let engine = Engine::new(&program, &sim, RuntimeNoise::default())?;
    let results = (0..n)
        .into_par_iter()
        .map(|i| engine.infer(data.pixels(i), i as u64, false))
        .collect::<memsnn::Result<Vec<_>>>()?;
    let mut w = ctx.csv("predictions.csv")?;
    let classes = program.output_len();
    let mut header = vec!["image".to_string(), "label".into(), "winner".into()];
    header.extend((0..classes).map(|c| format!("count_{c}")));
    w.write_record(&header)?;
    let mut hits = 0;
    for (i, r) in results.iter().enumerate() {
        hits += usize::from(r.winner == data.label(i));
        let mut rec = vec![i.to_string(), data.label(i).to_string(), r.winner.to_string()];
        rec.extend(r.counts.iter().map(u32::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(img) = a.dump_raster {
        if img >= test.len() {
            return Err(CliError::Usage(format!("--dump-raster {img} beyond {} test images", test.len())));
        }
        let r = engine.infer(test.pixels(img), img as u64, true)?;
        let raster = r.raster.expect("raster requested");
        raster.write_csv(BufWriter::new(File::create(ctx.path(&format!("raster_{img}.csv")))?))?;
    }
    let ann_accuracy = match &a.source.model {
        Some(m) => Some(nn::evaluate(&load_model(m)?, &data)),
        None => None,
    };
    let summary = InferSummary {
        images: n,
        steps: sim.steps,
        accuracy: hits as f64 / n as f64,
        ann_accuracy,
    };
    info!("accuracy {:.4} over {n} images", summary.accuracy);
    ctx.write_json("infer.json", &summary)?;
    ctx.manifest("infer")
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let kind = PerturbationKind::parse(&a.kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let program = ctx.program(&a.source)?;
    let test = ctx.test_set()?;
    let mut sc = ctx.cfg.sweep.clone();
    if let Some(t) = a.trials {
        sc.trials = t;
    }
    if let Some(n) = a.images {
        sc.image_count = n;
    }
    let res = run_sweep(&program, &test, kind, &a.sigmas, &sc, &ctx.cfg.sim)?;
    info!("sweep took {:.1} s", res.wall_seconds);
    let base = res.baseline().mean_acc;
    let mut w = ctx.csv("sweep.csv")?;
    w.write_record([
        "kind",
        "sigma",
        "trials",
        "images",
        "mean_accuracy",
        "std_accuracy",
        "seed",
        "degradation",
    ])?;
    let mut t = ctx.csv("sweep_trials.csv")?;
    t.write_record(["kind", "sigma", "trial", "accuracy"])?;
    for p in &res.points {
        w.serialize((
            kind.name(),
            p.sigma,
            p.trial_count,
            p.image_count,
            p.mean_acc,
            p.std_acc,
            sc.seed,
            base - p.mean_acc,
        ))?;
        for (i, acc) in p.accuracies.iter().enumerate() {
            t.serialize((kind.name(), p.sigma, i, acc))?;
        }
    }
    w.flush()?;
    t.flush()?;
    ctx.manifest("sweep")
}

fn accuracy_curve(ctx: &Ctx, a: CurveArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let program = ctx.program(&a.source)?;
    let test = ctx.test_set()?;
    let t_writes = if a.t_write.is_empty() {
        vec![program.device.t_write]
    } else {
        a.t_write.clone()
    };
    let images = a.images.or(ctx.cfg.sim.image_subset);
    let mut sum = vec![vec![0.0; a.steps.len()]; t_writes.len()];
    for k in 0..a.seeds {
        let sim = SimConfig {
            seed: ctx.cfg.seed.wrapping_add(k),
            image_subset: images,
            ..ctx.cfg.sim
        };
        let curves = snn::accuracy_vs_steps(&program, &test, &a.steps, &t_writes, &sim)?;
        for (s, c) in sum.iter_mut().zip(&curves) {
            for (x, y) in s.iter_mut().zip(c) {
                *x += y;
            }
        }
    }
    let mut w = ctx.csv("accuracy_curve.csv")?;
    w.write_record(["t_write", "steps", "accuracy"])?;
    for (tw, row) in t_writes.iter().zip(&sum) {
        for (steps, acc) in a.steps.iter().zip(row) {
            w.serialize((tw, steps, acc / a.seeds as f64))?;
        }
    }
    w.flush()?;
    ctx.manifest("accuracy-curve")
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn error_surface(ctx: &Ctx, a: SurfaceArgs) -> Result<()> {
    if a.x_points == 0 || a.w_points == 0 || !(a.w_min <= a.w_max) {
        return Err(CliError::Usage("grids need at least one point and w_min <= w_max".into()));
    }
    let b0 = match &a.model {
        Some(m) => load_model(m)?.b0(),
        None => ctx.cfg.train.b0,
    };
    let xs = grid(0.0, 1.0, a.x_points);
    let ws = grid(a.w_min, a.w_max, a.w_points);
    let surface = snn::conversion_error_surface(&xs, &ws, b0)?;
    let mut w = ctx.csv("error_surface.csv")?;
    w.write_record(["x", "w", "error"])?;
    for (x, row) in xs.iter().zip(&surface) {
        for (wv, e) in ws.iter().zip(row) {
            w.serialize((x, wv, e))?;
        }
    }
    w.flush()?;
    if let Some(m) = &a.model {
        let model = load_model(m)?;
        let mut hist = vec![0.0; ws.len()];
        let step = if ws.len() > 1 { ws[1] - ws[0] } else { 1.0 };
        for t in model.weights() {
            for &v in t.data() {
                let k = ((v - a.w_min) / step).round().clamp(0.0, (ws.len() - 1) as f64) as usize;
                hist[k] += 1.0;
            }
        }
        let weighted = snn::weighted_conversion_error(&xs, &ws, &hist, b0)?;
        let mut w = ctx.csv("weighted_error.csv")?;
        w.write_record(["x", "error"])?;
        for (x, e) in xs.iter().zip(&weighted) {
            w.serialize((x, e))?;
        }
        w.flush()?;
    }
    ctx.manifest("error-surface")
}

fn cost_cmd(ctx: &Ctx, a: CostArgs) -> Result<()> {
    let program = ctx.program(&a.source)?;
    let test = ctx.test_set()?;
    let cc = &ctx.cfg.cost;
    let sim = SimConfig {
        steps: cc.steps,
        image_subset: None,
        ..ctx.cfg.sim
    };
    let engine = Engine::new(&program, &sim, RuntimeNoise::default())?;
    let drive = snn::mean_drive_power(&engine, &test, a.images.unwrap_or(cc.activity_images))?;
    let report = cost::report(&program, &drive, cc.steps, &cc.energy(), &cc.timing(), &cc.area())?;
    info!(
        "energy {:.2} nJ per image, area {:.3} mm2, latency {} ns",
        report.energy.total * 1e9,
        report.area.total_mm2,
        report.pipeline_latency_ns
    );
    ctx.write_json("cost.json", &report)?;
    ctx.manifest("cost")
}
