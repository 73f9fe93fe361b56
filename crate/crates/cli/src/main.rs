mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Layer, RunConfig};
use error::CliError;

/// Synthesize context-diverse few-shot detection datasets.
#[derive(Debug, Parser)]
#[command(name = "ctxforge", version)]
struct Cli {
    /// TOML file supplying defaults for any flag
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (default: logical cores)
    #[arg(long, short = 'j', global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample K shots, inject them into contexts and write the merged dataset
    Synth(SynthArgs),
    /// Build the instance x context grid of datasets and plot mAP curves
    Sweep(SweepArgs),
    /// Score detections against ground truth (mAP@IoU)
    Eval(EvalArgs),
    /// Render sample composites next to their stitch collages
    Preview(PreviewArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root (VOC layout) or a manifest.json
    #[arg(long, value_name = "DIR")]
    root: Option<PathBuf>,

    /// All class names, comma separated (default: the 20 DIOR classes)
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    classes: Option<Vec<String>>,

    /// Novel class names, comma separated
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    novel: Option<Vec<String>>,

    /// Shots per novel class
    #[arg(long, value_name = "K")]
    k: Option<usize>,

    /// Root seed for every random choice
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BackendArgs {
    /// Compositing backend: naive, poisson or diffusion
    #[arg(long, value_name = "NAME")]
    backend: Option<String>,

    /// Integration service base URL
    #[arg(long, env = "CTXFORGE_ENDPOINT", hide_env_values = true, value_name = "URL")]
    endpoint: Option<String>,

    /// Use the in-process mock integration service
    #[arg(long, alias = "mock-endpoint")]
    mock: bool,

    /// Denoising steps requested from the service
    #[arg(long, value_name = "N")]
    steps: Option<u32>,

    /// Per-request service timeout in seconds
    #[arg(long, value_name = "SECS")]
    timeout_secs: Option<u64>,

    /// Retries after a service timeout
    #[arg(long, value_name = "N")]
    retries: Option<u32>,

    /// Concurrent service requests
    #[arg(long, value_name = "N")]
    max_in_flight: Option<usize>,
}

#[derive(Debug, Args)]
struct PlacementArgs {
    /// Instances of each novel class per context
    #[arg(long, value_name = "N")]
    per_context: Option<u32>,

    /// Maximum IoU between a new box and any other box
    #[arg(long, value_name = "IOU")]
    overlap_threshold: Option<f64>,

    /// Smallest area factor relative to the source crop
    #[arg(long, value_name = "F")]
    scale_min: Option<f64>,

    /// Largest area factor relative to the source crop
    #[arg(long, value_name = "F")]
    scale_max: Option<f64>,

    /// Placement attempts before an instance is skipped
    #[arg(long, value_name = "N")]
    max_attempts: Option<u32>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    placement: PlacementArgs,

    /// Number of context images to use (0: all novel-free images)
    #[arg(long, value_name = "N")]
    contexts: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    placement: PlacementArgs,

    /// Instance counts per class, comma separated
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    instances: Option<Vec<usize>>,

    /// Context counts, comma separated
    #[arg(long = "contexts", value_delimiter = ',', value_name = "LIST")]
    context_counts: Option<Vec<usize>>,

    /// Detector command; {train_dir} and {out_detections} are substituted
    #[arg(long, value_name = "CMD")]
    detector_cmd: Option<String>,

    /// Ground-truth manifest the detector output is scored against
    #[arg(long, value_name = "FILE")]
    eval_manifest: Option<PathBuf>,

    /// Concurrent detector runs
    #[arg(long, value_name = "N")]
    detector_jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth dataset root or manifest.json
    #[arg(long, value_name = "PATH")]
    gt: PathBuf,

    /// COCO results JSON, or a directory of per-class VOC result files
    #[arg(long, value_name = "PATH")]
    detections: PathBuf,

    /// All class names, comma separated (default: the 20 DIOR classes)
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    classes: Option<Vec<String>>,

    /// Novel class names; only these are scored unless --all-classes
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    novel: Option<Vec<String>>,

    /// Score every class with ground truth
    #[arg(long)]
    all_classes: bool,

    /// Accepted for uniformity; evaluation draws no random numbers
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// IoU needed for a match
    #[arg(long, default_value_t = 0.5, value_name = "IOU")]
    iou: f64,

    /// AP interpolation: all-points or 11-point
    #[arg(long, default_value = "all-points", value_name = "NAME")]
    metric: String,

    /// Earlier report.json to print deltas against
    #[arg(long, value_name = "FILE")]
    baseline: Option<PathBuf>,

    /// Row label in the printed table
    #[arg(long, default_value = "detector", value_name = "NAME")]
    name: String,

    /// Where to write report.json
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,

    /// Number of contact sheets to render
    #[arg(long, value_name = "N")]
    count: Option<usize>,
}

impl DataArgs {
    fn layer(&self) -> Layer {
        Layer {
            root: self.root.clone(),
            classes: self.classes.clone(),
            novel: self.novel.clone(),
            k: self.k,
            seed: self.seed,
            out: self.out.clone(),
            ..Default::default()
        }
    }
}

impl BackendArgs {
    fn apply(&self, l: Layer) -> Layer {
        Layer {
            backend: self.backend.clone(),
            endpoint: self.endpoint.clone(),
            mock: self.mock.then_some(true),
            steps: self.steps,
            timeout_secs: self.timeout_secs,
            retries: self.retries,
            max_in_flight: self.max_in_flight,
            ..l
        }
    }
}

impl PlacementArgs {
    fn apply(&self, l: Layer) -> Layer {
        Layer {
            per_context: self.per_context,
            overlap_threshold: self.overlap_threshold,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            max_attempts: self.max_attempts,
            ..l
        }
    }
}

fn flag_layer(cli: &Cli) -> Layer {
    let l = match &cli.command {
        Command::Synth(a) => Layer {
            contexts: a.contexts,
            ..a.placement.apply(a.backend.apply(a.data.layer()))
        },
        Command::Sweep(a) => Layer {
            sweep_instances: a.instances.clone(),
            sweep_contexts: a.context_counts.clone(),
            detector_command: a.detector_cmd.clone(),
            eval_manifest: a.eval_manifest.clone(),
            detector_jobs: a.detector_jobs,
            ..a.placement.apply(a.backend.apply(a.data.layer()))
        },
        Command::Eval(a) => Layer {
            classes: a.classes.clone(),
            novel: a.novel.clone(),
            seed: a.seed,
            ..Default::default()
        },
        Command::Preview(a) => Layer {
            preview_count: a.count,
            ..a.backend.apply(a.data.layer())
        },
    };
    Layer { jobs: cli.jobs, ..l }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => Layer::from_file(p)?,
        None => Layer::default(),
    };
    let cfg = RunConfig::resolve(flag_layer(&cli).over(file))?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::Eval(a) => commands::eval(&cfg, &commands::EvalRequest {
            gt: &a.gt,
            detections: &a.detections,
            all_classes: a.all_classes,
            iou: a.iou,
            metric: &a.metric,
            baseline: a.baseline.as_deref(),
            name: &a.name,
            out: a.out.as_deref(),
        }),
        Command::Preview(_) => commands::preview(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_owned()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
