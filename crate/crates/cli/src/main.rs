use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fastsal::analyzer::{self, CONVENTION};
use fastsal::bench::{self, BenchConfig, BENCH_CSV_HEADER};
use fastsal::io::{self, DatasetManifest, ImageConfig};
use fastsal::metrics::MetricReport;
use fastsal::network::{init_weights, load_weights, save_weights, vgg16_reference};
use fastsal::trainer::{self, LossKind, Sample, TrainConfig};
use fastsal::{gradcheck, ops, Error, ModelConfig, NetworkGraph, Shape, Variant, WeightStore};

#[derive(Parser, Debug)]
#[command(name = "fastsal", version, about = "Saliency prediction with the FastSal networks")]
struct Cli {
    /// Worker threads [default: all cores for bench, 1 otherwise].
    #[arg(long, global = true, env = "FASTSAL_THREADS")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict a saliency map for one image.
    Predict(PredictArgs),
    /// Print per-layer parameter and FLOP counts.
    Analyze(AnalyzeArgs),
    /// Time single-image inference.
    Bench(BenchArgs),
    /// Score predictions against a dataset manifest.
    Eval(EvalArgs),
    /// Pretrain or fine-tune a model.
    Train(TrainArgs),
    /// Finite-difference gradient checks of every op and loss.
    GradCheck(GradCheckArgs),
    /// Run the five-row distillation ablation.
    Ablation(AblationArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Decoder variant.
    #[arg(long, default_value = "C")]
    variant: Variant,

    /// Backbone width multiplier.
    #[arg(long, default_value_t = 1.0)]
    width: f64,

    /// Network input size as HxW; both sides must be multiples of 32.
    #[arg(long, default_value = "192x256", value_parser = parse_size)]
    size: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MapFormat {
    Pgm,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    model_args: ModelArgs,

    /// Weight file.
    #[arg(long)]
    model: PathBuf,

    /// Input image (P5 or P6).
    #[arg(long)]
    image: PathBuf,

    /// Output path; the map is resized back to the image size.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, value_enum, default_value_t = MapFormat::Pgm)]
    format: MapFormat,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    model_args: ModelArgs,

    #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
    format: ReportFormat,

    /// Print the counting rules instead of a report.
    #[arg(long)]
    convention: bool,

    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model_args: ModelArgs,

    /// Weight file; seeded random weights when omitted.
    #[arg(long)]
    model: Option<PathBuf>,

    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
    iters: usize,

    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,

    /// Also time the VGG16-scale reference graph on the same input.
    #[arg(long)]
    reference: bool,

    /// Record the run as deterministic in the report.
    #[arg(long)]
    deterministic: bool,

    /// Seed for random weights and the input tensor.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Also write the report rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model_args: ModelArgs,

    #[arg(long)]
    model: PathBuf,

    #[arg(long)]
    manifest: PathBuf,

    /// Only evaluate records with this split tag.
    #[arg(long)]
    split: Option<String>,

    /// Baseline map for information gain [default: uniform].
    #[arg(long)]
    baseline: Option<PathBuf>,

    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,

    #[arg(long, default_value_t = 0.01)]
    lr: f64,

    /// Epochs at which the learning rate is multiplied by --decay-factor.
    #[arg(long, value_delimiter = ',', default_value = "15,30,60")]
    decay_epochs: Vec<usize>,

    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,

    #[arg(long, default_value_t = 0.9)]
    momentum: f64,

    #[arg(long, default_value_t = 8)]
    batch_size: usize,

    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model_args: ModelArgs,

    #[command(flatten)]
    schedule: ScheduleArgs,

    #[arg(long)]
    manifest: PathBuf,

    #[arg(long, value_enum, default_value_t = CliLoss::Salgan)]
    loss: CliLoss,

    /// Include the ground-truth term.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    gt: Switch,

    /// Include the teacher pseudo-label term.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    teacher: Switch,

    /// Starting weights; seeded random weights when omitted.
    #[arg(long)]
    init: Option<PathBuf>,

    /// Train on records with this split tag [default: all records not in --val-split].
    #[arg(long)]
    split: Option<String>,

    /// Records with this split tag feed the validation NSS/CC columns.
    #[arg(long)]
    val_split: Option<String>,

    /// Slot-name prefix that is never updated; repeatable.
    #[arg(long)]
    freeze: Vec<String>,

    /// Output weight file.
    #[arg(long)]
    out: PathBuf,

    /// Per-epoch log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliLoss {
    Hint,
    Salgan,
    Deepgaze,
}

impl From<CliLoss> for LossKind {
    fn from(l: CliLoss) -> Self {
        match l {
            CliLoss::Hint => LossKind::Hint,
            CliLoss::Salgan => LossKind::Salgan,
            CliLoss::Deepgaze => LossKind::DeepGaze,
        }
    }
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Check name, or `all`.
    #[arg(long, default_value = "all")]
    op: String,

    #[arg(long, default_value_t = 10)]
    seeds: usize,

    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[command(flatten)]
    model_args: ModelArgs,

    #[command(flatten)]
    schedule: ScheduleArgs,

    #[arg(long)]
    manifest: PathBuf,

    /// Fine-tuning loss.
    #[arg(long, value_enum, default_value_t = CliLoss::Salgan)]
    loss: CliLoss,

    /// Epochs of hint pretraining.
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,

    #[arg(long)]
    split: Option<String>,

    /// Validation split; the training records are scored when omitted.
    #[arg(long)]
    val_split: Option<String>,

    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected HxW, got `{s}`"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(format!("input size {h}x{w} is not divisible by 32 on both sides"));
    }
    Ok((h, w))
}

/// Usage and input problems exit with 1; everything else with 2.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Numeric(_) | Error::Contract(_) | Error::File { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig::new(self.variant).with_width(self.width)
    }

    fn input(&self) -> Shape {
        Shape::new(1, 3, self.size.0, self.size.1)
    }

    fn graph(&self) -> fastsal::Result<NetworkGraph> {
        if !(self.width > 0.0) {
            return Err(Error::config("width multiplier must be positive"));
        }
        self.config().build(self.input())
    }

    fn image_config(&self) -> ImageConfig {
        ImageConfig {
            size: Some(self.size),
            ..ImageConfig::default()
        }
    }
}

fn load_checked(path: &Path, graph: &NetworkGraph) -> fastsal::Result<WeightStore> {
    let w = load_weights(path)?;
    w.check(graph).map_err(|e| e.in_file(path))?;
    Ok(w)
}

fn emit(text: &str, out: Option<&Path>) -> fastsal::Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::File {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> fastsal::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn predict(a: &PredictArgs) -> fastsal::Result<()> {
    let graph = a.model_args.graph()?;
    let weights = load_checked(&a.model, &graph)?;
    let bytes = fs::read(&a.image).map_err(|e| Error::File {
        path: a.image.clone(),
        source: e,
    })?;
    let pnm = io::parse_pnm(&bytes).map_err(|e| e.in_file(&a.image))?;
    let x = a.model_args.image_config().preprocess(&pnm.to_rgb())?;
    let logits = graph.forward(&weights, &[&x])?;
    let map = ops::bilinear_resize(&ops::sigmoid(&logits), pnm.height, pnm.width)?;
    match a.format {
        MapFormat::Pgm => io::save_map(&map, &a.out),
        MapFormat::Csv => {
            let mut s = String::new();
            for row in map.data().chunks(pnm.width) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            write_file(&a.out, s)
        }
    }
}

fn analyze(a: &AnalyzeArgs) -> fastsal::Result<()> {
    if a.convention {
        return emit(&format!("{CONVENTION}\n"), a.out.as_deref());
    }
    let graph = a.model_args.graph()?;
    let report = analyzer::analyze(&graph, a.model_args.input())?;
    let text = match a.format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Table => format!("{report}\n"),
    };
    emit(&text, a.out.as_deref())
}

fn bench_cmd(a: &BenchArgs, threads: Option<usize>) -> fastsal::Result<()> {
    let graph = a.model_args.graph()?;
    let weights = match &a.model {
        Some(p) => load_checked(p, &graph)?,
        None => init_weights(&graph, a.seed),
    };
    let cfg = BenchConfig {
        iterations: a.iters,
        warmup: a.warmup,
        threads: threads.unwrap_or(BenchConfig::default().threads),
        deterministic: a.deterministic,
        seed: a.seed,
    };
    let label = format!("fastsal-{}", a.model_args.variant);
    let (report, _) = bench::benchmark(&label, &graph, &weights, a.model_args.input(), &cfg)?;
    let mut rows = vec![report];
    if a.reference {
        let vgg = vgg16_reference()?;
        let vw = init_weights(&vgg, a.seed);
        let (r, _) = bench::benchmark("vgg16-reference", &vgg, &vw, a.model_args.input(), &cfg)?;
        rows.push(r);
    }
    let mut text = format!("{BENCH_CSV_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    print!("{text}");
    if let [fast, reference] = rows.as_slice() {
        eprintln!("speedup over reference: {:.2}x", fast.fps / reference.fps);
    }
    for r in &rows {
        log::info!("{}: {:.2} ms mean, {:.1} fps", r.label, r.mean_ms, r.fps);
    }
    if let Some(p) = &a.csv {
        write_file(p, text)?;
    }
    Ok(())
}

fn select(manifest: &DatasetManifest, split: Option<&str>, exclude: Option<&str>) -> DatasetManifest {
    DatasetManifest {
        records: manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split.as_deref() == Some(s)))
            .filter(|r| exclude.is_none_or(|s| r.split.as_deref() != Some(s)))
            .cloned()
            .collect(),
    }
}

fn load_split(manifest: &DatasetManifest, split: Option<&str>, exclude: Option<&str>, image: &ImageConfig) -> fastsal::Result<Vec<Sample>> {
    let m = select(manifest, split, exclude);
    if m.records.is_empty() {
        let what = split.map(|s| format!(" with split `{s}`")).unwrap_or_default();
        return Err(Error::config(format!("manifest has no records{what}")));
    }
    trainer::load_samples(&m, image)
}

fn eval(a: &EvalArgs) -> fastsal::Result<()> {
    let graph = a.model_args.graph()?;
    let weights = load_checked(&a.model, &graph)?;
    let manifest = io::load_manifest(&a.manifest)?;
    let m = select(&manifest, a.split.as_deref(), None);
    let samples = load_split(&manifest, a.split.as_deref(), None, &a.model_args.image_config())?;
    let (h, w) = a.model_args.size;
    let baseline = a
        .baseline
        .as_ref()
        .map(|p| io::load_map(p).and_then(|b| ops::bilinear_resize(&b, h, w)))
        .transpose()?;
    let rows = trainer::evaluate_samples(&graph, &weights, &samples, baseline.as_ref())?;
    let mut text = format!("image,{}\n", MetricReport::csv_header());
    for (i, r) in &rows {
        writeln!(text, "{},{}", m.records[*i].image.display(), r.csv_row()).expect("string write");
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    writeln!(text, "mean,{}", MetricReport::mean(&reports).csv_row()).expect("string write");
    emit(&text, a.out.as_deref())
}

impl ScheduleArgs {
    fn config(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            epochs: self.epochs,
            base_lr: self.lr,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            max_steps: self.max_steps,
            ..TrainConfig::default()
        }
    }
}

fn train(a: &TrainArgs) -> fastsal::Result<()> {
    let cfg = TrainConfig {
        use_gt: a.gt.on(),
        use_teacher: a.teacher.on(),
        frozen: a.freeze.clone(),
        ..a.schedule.config(a.loss.into())
    };
    cfg.validate()?;
    let graph = a.model_args.graph()?;
    let mut weights = match &a.init {
        Some(p) => load_checked(p, &graph)?,
        None => init_weights(&graph, cfg.seed),
    };
    let manifest = io::load_manifest(&a.manifest)?;
    let image = a.model_args.image_config();
    let samples = load_split(&manifest, a.split.as_deref(), a.val_split.as_deref(), &image)?;
    let validation = match &a.val_split {
        Some(s) => load_split(&manifest, Some(s), None, &image)?,
        None => Vec::new(),
    };
    let log = trainer::train(&samples, &validation, &cfg, &graph, &mut weights)?;
    save_weights(&weights, &a.out)?;
    let csv = log.to_csv();
    match &a.log {
        Some(p) => write_file(p, csv)?,
        None => print!("{csv}"),
    }
    if let Some(last) = log.epochs.last() {
        eprintln!("trained {} steps, final epoch loss {:.5}", log.step_losses.len(), last.mean_loss);
    }
    Ok(())
}

/// Returns whether every check passed.
fn grad_check(a: &GradCheckArgs) -> fastsal::Result<bool> {
    let names: Vec<&str> = if a.op == "all" {
        gradcheck::CHECKS.to_vec()
    } else if gradcheck::CHECKS.contains(&a.op.as_str()) {
        vec![a.op.as_str()]
    } else {
        return Err(Error::config(format!(
            "unknown check `{}`; expected `all` or one of: {}",
            a.op,
            gradcheck::CHECKS.join(", ")
        )));
    };
    let mut ok = true;
    for name in names {
        let r = gradcheck::run_seeds(name, a.first_seed, a.seeds)?;
        ok &= r.passed;
        println!(
            "{} {name}: max rel err {:.3e} over {} seeds (tolerance {:e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            a.seeds,
            gradcheck::TOLERANCE
        );
    }
    Ok(ok)
}

fn ablation(a: &AblationArgs) -> fastsal::Result<()> {
    let graph = a.model_args.graph()?;
    let init = init_weights(&graph, a.schedule.seed);
    let manifest = io::load_manifest(&a.manifest)?;
    let image = a.model_args.image_config();
    let samples = load_split(&manifest, a.split.as_deref(), a.val_split.as_deref(), &image)?;
    let validation = match &a.val_split {
        Some(s) => load_split(&manifest, Some(s), None, &image)?,
        None => samples.clone(),
    };
    let finetune = a.schedule.config(a.loss.into());
    let pretrain = TrainConfig {
        epochs: a.pretrain_epochs,
        ..a.schedule.config(LossKind::Hint)
    };
    let rows = trainer::ablation_run(&samples, &validation, &graph, &init, &pretrain, &finetune)?;
    emit(&trainer::ablation_csv(&rows), a.out.as_deref())
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let fail = |e: Error| (exit_code(&e), e.to_string());
    if !matches!(cli.command, Command::Bench(_)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads.unwrap_or(1).max(1))
            .build_global()
            .map_err(|e| (2, format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Predict(a) => predict(a).map_err(fail),
        Command::Analyze(a) => analyze(a).map_err(fail),
        Command::Bench(a) => bench_cmd(a, cli.threads).map_err(fail),
        Command::Eval(a) => eval(a).map_err(fail),
        Command::Train(a) => train(a).map_err(fail),
        Command::GradCheck(a) => match grad_check(a).map_err(fail)? {
            true => Ok(()),
            false => Err((2, "gradient check failed".into())),
        },
        Command::Ablation(a) => ablation(a).map_err(fail),
    }
}

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("192x256"), Ok((192, 256)));
        assert!(parse_size("100x100").unwrap_err().contains("divisible by 32"));
        assert!(parse_size("192").is_err());
        assert!(parse_size("0x32").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 1);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 2);
        let wrapped = Error::Layer {
            layer: "a".into(),
            source: Box::new(Error::Numeric("x".into())),
        };
        assert_eq!(exit_code(&wrapped), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
