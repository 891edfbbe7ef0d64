use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use beamloc::dataset::{self, SynthConfig};
use beamloc::eval::{detection_metric, point_metric, read_jsonl, ApMethod, BoxRecord, GroundTruth, MetricReport, PointRecord};
use beamloc::pipeline::{
    self, localize_jobs, localize_scenes, parse_class_selection, parse_thresholds, ImageJob, Metric, ProviderKind, RunConfig, RunOutput,
};
use beamloc::provider::bridge::{BridgeClient, DEFAULT_TIMEOUT};
use beamloc::provider::{BridgeHead, BridgeProvider};
use beamloc::scoring::{build_cooccurrence, CooccurrenceMatrix};
use beamloc::{Error, Result};

const COOCCURRENCE_FILE: &str = "cooccurrence.csv";
const IMAGES_FILE: &str = "images.jsonl";

/// Exit status when some images failed but the run finished.
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "beamloc", version, about = "Beam-search object localization from classifier feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    SynthGen(SynthArgs),
    /// Localize every image of a dataset.
    Localize(LocalizeArgs),
    /// Score responses or detections against ground truth.
    Eval(EvalArgs),
    /// Evaluate over a grid of thresholds or alphas.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Number of classes (K).
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    /// Feature channels (T).
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Objects per image as `N` or `MIN..MAX`.
    #[arg(long, default_value = "1")]
    objects: String,
    /// Object side length as `N` or `MIN..MAX` pixels.
    #[arg(long, default_value = "50..90")]
    size: String,
    /// Image size as `N` or `WxH`.
    #[arg(long, default_value = "120")]
    image: String,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    allow_overlap: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Synthetic,
    Bridge,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Dataset directory (`scenes/` for synthetic, `images.jsonl` for bridge).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    provider: ProviderArg,
    #[arg(long, default_value_t = pipeline::DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = beamloc::provider::synthetic::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = beamloc::search::DEFAULT_BEAM_WIDTH)]
    beam_width: usize,
    #[arg(long, default_value_t = beamloc::search::DEFAULT_BEAM_DEPTH)]
    beam_depth: usize,
    #[arg(long, default_value_t = beamloc::search::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    rescoring: bool,
    /// Co-occurrence CSV; defaults to `<dataset>/cooccurrence.csv` if present.
    #[arg(long)]
    cooccurrence: Option<PathBuf>,
    /// Per-class thresholds, `class=value,...`.
    #[arg(long, default_value = "")]
    theta: String,
    #[arg(long, default_value_t = 0.0)]
    default_theta: f64,
    /// `all`, `present`, or a class list such as `0,2`.
    #[arg(long, default_value = "all")]
    classes: String,
    /// Reseeds synthetic scene noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel images (0: one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Bridge request timeout in seconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout: u64,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write heat maps as PGM images.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Point,
    Detection,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Point => Metric::Point,
            MetricArg::Detection => Metric::Detection,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// `responses.jsonl` (point) or `detections.jsonl` (detection).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// Ground-truth JSONL; defaults to `<dataset>/gt.jsonl`.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Dataset whose scene ids register images without objects.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    eleven_point: bool,
    /// Directory for `ap.csv` and per-class PR curves.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Theta,
    Alpha,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    param: ParamArg,
    /// Comma-separated grid.
    #[arg(long)]
    values: Option<String>,
    /// Theta only: this many values from 0 to the largest heat.
    #[arg(long)]
    steps: Option<usize>,
    /// Alpha only; theta sweeps always use detection AP.
    #[arg(long, value_enum, default_value = "point")]
    metric: MetricArg,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(spec: &str, what: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad {what} {spec:?}")))
    };
    match spec.split_once("..") {
        Some((a, b)) => Ok((parse(a)?, parse(b.trim_start_matches('='))?)),
        None => parse(spec).map(|n| (n, n)),
    }
}

fn parse_size(spec: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad image size {spec:?}")))
    };
    match spec.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse(w)?, parse(h)?)),
        None => parse(spec).map(|n| (n, n)),
    }
}

fn parse_values(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::invalid(format!("bad grid value {s:?}"))))
        .collect()
}

fn synth_gen(args: SynthArgs) -> Result<()> {
    let (min_objects, max_objects) = parse_range(&args.objects, "object count")?;
    let (min_size, max_size) = parse_range(&args.size, "object size")?;
    let (image_w, image_h) = parse_size(&args.image)?;
    let cfg = SynthConfig {
        count: args.count,
        classes: args.num_classes,
        channels: args.channels,
        image_w,
        image_h,
        min_objects,
        max_objects,
        min_size,
        max_size,
        sigma: args.sigma,
        seed: args.seed,
        allow_overlap: args.allow_overlap,
    };
    let scenes = dataset::generate(&cfg)?;
    dataset::write_dataset(&args.out, &scenes)?;
    let cooc = build_cooccurrence(scenes.iter().map(|s| s.labels()), cfg.classes)?;
    cooc.write_csv(BufWriter::new(fs::File::create(args.out.join(COOCCURRENCE_FILE))?))?;
    eprintln!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    Ok(RunConfig {
        provider: match args.provider {
            ProviderArg::Synthetic => ProviderKind::Synthetic,
            ProviderArg::Bridge => ProviderKind::Bridge,
        },
        grid: args.grid,
        beta: args.beta,
        beam_width: args.beam_width,
        beam_depth: args.beam_depth,
        alpha: args.alpha,
        use_rescoring: args.rescoring,
        thresholds: parse_thresholds(&args.theta)?,
        default_theta: args.default_theta,
        classes: parse_class_selection(&args.classes)?,
        seed: args.seed,
        workers: args.workers,
        heatmaps: false,
    })
}

fn load_cooccurrence(args: &RunArgs) -> Result<Option<CooccurrenceMatrix>> {
    let path = match &args.cooccurrence {
        Some(p) => p.clone(),
        None => {
            let p = args.dataset.join(COOCCURRENCE_FILE);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    Ok(Some(CooccurrenceMatrix::read_csv(BufReader::new(fs::File::open(path)?))?))
}

/// One line of a bridge dataset's `images.jsonl`.
#[derive(Deserialize)]
struct ImageEntry {
    image: String,
    width: usize,
    height: usize,
}

fn run_dataset(args: &RunArgs, cfg: &RunConfig) -> Result<RunOutput> {
    let cooc = load_cooccurrence(args)?;
    match cfg.provider {
        ProviderKind::Synthetic => {
            let scenes = dataset::read_scenes(&args.dataset)?;
            localize_scenes(&scenes, cooc.as_ref(), cfg)
        }
        ProviderKind::Bridge => {
            let entries: Vec<ImageEntry> = read_jsonl(BufReader::new(fs::File::open(args.dataset.join(IMAGES_FILE))?))?;
            let client = BridgeClient::from_env(Duration::from_secs(args.timeout))?;
            let shared = Arc::new(Mutex::new(client));
            let provider = BridgeProvider::new(shared.clone());
            let head = BridgeHead::new(shared.clone());
            let jobs: Vec<ImageJob<'_, str>> = entries
                .iter()
                .map(|e| ImageJob {
                    id: &e.image,
                    image: e.image.as_str(),
                    width: e.width,
                    height: e.height,
                })
                .collect();
            let run = localize_jobs(&provider, &head, cooc.as_ref(), &jobs, cfg);
            drop((provider, head));
            if let Ok(client) = Arc::try_unwrap(shared) {
                let client = client.into_inner().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = client.shutdown() {
                    eprintln!("bridge shutdown: {e}");
                }
            }
            run
        }
    }
}

fn localize(args: LocalizeArgs) -> Result<ExitCode> {
    let cfg = RunConfig {
        heatmaps: args.heatmaps,
        ..run_config(&args.run)?
    };
    let run = run_dataset(&args.run, &cfg)?;
    pipeline::write_run(&args.out, &run, &cfg)?;
    for e in &run.errors {
        eprintln!("{}: {}", e.image, e.message);
    }
    eprintln!(
        "localized {} images ({} failed) into {}",
        run.results.len(),
        run.errors.len(),
        args.out.display()
    );
    Ok(if run.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PARTIAL)
    })
}

fn load_gt(gt: Option<&Path>, dataset_dir: Option<&Path>) -> Result<GroundTruth> {
    let gt_path = match (gt, dataset_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => dataset::gt_path(d),
        (None, None) => return Err(Error::invalid("need --gt or --dataset")),
    };
    let mut images = Vec::new();
    if let Some(d) = dataset_dir {
        if dataset::scenes_dir(d).is_dir() {
            for p in dataset::scene_paths(d)? {
                images.push(dataset::read_scene(&p)?.id);
            }
        } else if d.join(IMAGES_FILE).exists() {
            let entries: Vec<ImageEntry> = read_jsonl(BufReader::new(fs::File::open(d.join(IMAGES_FILE))?))?;
            images.extend(entries.into_iter().map(|e| e.image));
        }
    }
    dataset::read_ground_truth(&gt_path, images)
}

fn write_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    report.write_table(io::stdout().lock())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        report.write_csv(BufWriter::new(fs::File::create(dir.join("ap.csv"))?))?;
        for c in &report.curves {
            c.write_csv(BufWriter::new(fs::File::create(dir.join(format!("pr_class{}.csv", c.class_id)))?))?;
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let gt = load_gt(args.gt.as_deref(), args.dataset.as_deref())?;
    let method = if args.eleven_point {
        ApMethod::ElevenPoint
    } else {
        ApMethod::AllPoint
    };
    let input = BufReader::new(fs::File::open(&args.input)?);
    let report = match args.metric {
        MetricArg::Point => point_metric(&read_jsonl::<PointRecord, _>(input)?, &gt, method)?,
        MetricArg::Detection => detection_metric(&read_jsonl::<BoxRecord, _>(input)?, &gt, args.iou, method)?,
    };
    write_report(&report, args.out.as_deref())
}

fn format_thresholds(best: &BTreeMap<usize, f64>) -> String {
    best.iter()
        .map(|(c, v)| format!("{c}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let cfg = run_config(&args.run)?;
    let gt = load_gt(None, Some(&args.run.dataset))?;
    fs::create_dir_all(&args.out)?;
    let (sweep, failed) = match args.param {
        ParamArg::Theta => {
            let run = run_dataset(&args.run, &cfg)?;
            let grid = match (&args.values, args.steps) {
                (Some(v), _) => parse_values(v)?,
                (None, Some(n)) => pipeline::theta_grid(&run, n),
                (None, None) => return Err(Error::invalid("theta sweep needs --values or --steps")),
            };
            (pipeline::sweep_theta(&run, &gt, &grid, args.iou)?, run.errors.len())
        }
        ParamArg::Alpha => {
            if !matches!(cfg.provider, ProviderKind::Synthetic) {
                return Err(Error::invalid("alpha sweeps run on synthetic datasets only"));
            }
            let grid = parse_values(args.values.as_deref().unwrap_or_default())?;
            let scenes = dataset::read_scenes(&args.run.dataset)?;
            let cooc = load_cooccurrence(&args.run)?;
            (
                pipeline::sweep_alpha(&scenes, cooc.as_ref(), &gt, &grid, args.metric.into(), &cfg, args.iou)?,
                0,
            )
        }
    };
    let path = args.out.join(format!("sweep_{}.csv", sweep.parameter));
    sweep.write_csv(BufWriter::new(fs::File::create(&path)?))?;
    sweep.write_csv(io::stdout().lock())?;
    let best = sweep.best_per_class();
    let line = format_thresholds(&best);
    fs::write(args.out.join(format!("best_{}.txt", sweep.parameter)), format!("{line}\n"))?;
    eprintln!("best {} per class: {line}", sweep.parameter);
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PARTIAL)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::SynthGen(a) => synth_gen(a).map(|()| ExitCode::SUCCESS),
        Command::Localize(a) => localize(a),
        Command::Eval(a) => eval(a).map(|()| ExitCode::SUCCESS),
        Command::Sweep(a) => sweep(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
