mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lidar_uda::aggregate::AggregateError;
use lidar_uda::geometry::GeometryError;
use lidar_uda::io::FormatError;
use lidar_uda::lam::LamError;
use lidar_uda::metrics::MetricsError;
use lidar_uda::neighbors::NeighborError;
use lidar_uda::selftrain::SelftrainError;
use lidar_uda::subsample::SubsampleError;

use crate::commands::*;
use crate::config::{ConfigError, PipelineConfig};

/// Pseudo-label generation for LiDAR domain adaptation.
#[derive(Debug, Parser)]
#[command(name = "lidar-uda", version)]
struct Cli {
    /// Run configuration (sectioned key = value); library defaults when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the parallel stages; all cores when unset.
    #[arg(long, global = true, env = "LIDAR_ENSEMBLE_THREADS")]
    threads: Option<usize>,
    /// Log progress to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Range-image pixel and range of every point of a scan.
    Project(ProjectArgs),
    /// Row-subsampled copies of a scan.
    Subsample(SubsampleArgs),
    /// Mean of several predictions of one scan.
    Ensemble(EnsembleArgs),
    /// Cross-frame refinement of within-frame predictions.
    Aggregate(AggregateArgs),
    /// Trains the learned aggregation model on a labeled source sequence.
    LamTrain(LamTrainArgs),
    /// Adapts a checkpoint's input statistics to a sequence and refines with it.
    LamApply(LamApplyArgs),
    /// Histograms of kernel weights over temporal offset and distances.
    LamAnalyze(LamAnalyzeArgs),
    /// Class-balanced pseudo-label selection.
    Cbst(CbstArgs),
    /// Confusion matrix and IoU of predicted against ground-truth labels.
    Metrics(MetricsArgs),
    /// Full pseudo-labeling run with the configured mock teacher.
    Pipeline(PipelineArgs),
    /// Writes a synthetic labeled sequence.
    #[command(hide = true)]
    Synthgen(SynthgenArgs),
}

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn geometry_code(e: &GeometryError) -> u8 {
    match e {
        GeometryError::ZeroRange { .. } | GeometryError::NonFinite { .. } => EXIT_NUMERIC,
        GeometryError::InvalidSensor(_) | GeometryError::InvalidAugmentation(_) => EXIT_CONFIG,
        GeometryError::IntensityLength { .. } | GeometryError::InvalidRotation => EXIT_IO,
    }
}

fn format_code(e: &FormatError) -> u8 {
    match e {
        FormatError::Geometry(g) => geometry_code(g),
        _ => EXIT_IO,
    }
}

fn subsample_code(e: &SubsampleError) -> u8 {
    match e {
        SubsampleError::InvalidSpec(_) => EXIT_CONFIG,
        SubsampleError::Geometry(g) => geometry_code(g),
        _ => EXIT_IO,
    }
}

fn neighbor_code(e: &NeighborError) -> u8 {
    match e {
        NeighborError::ZeroStride => EXIT_CONFIG,
        NeighborError::Subsample(s) => subsample_code(s),
        _ => EXIT_IO,
    }
}

fn lam_code(e: &LamError) -> u8 {
    match e {
        LamError::Diverged { .. } | LamError::NonFinite { .. } => EXIT_NUMERIC,
        LamError::Config(_) => EXIT_CONFIG,
        _ => EXIT_IO,
    }
}

fn aggregate_code(e: &AggregateError) -> u8 {
    match e {
        AggregateError::NonFinite(_) => EXIT_NUMERIC,
        AggregateError::Lam(l) => lam_code(l),
        AggregateError::Subsample(s) => subsample_code(s),
        _ => EXIT_IO,
    }
}

fn selftrain_code(e: &SelftrainError) -> u8 {
    match e {
        SelftrainError::Config(_) => EXIT_CONFIG,
        SelftrainError::Subsample(s) => subsample_code(s),
        SelftrainError::Neighbor(n) => neighbor_code(n),
        SelftrainError::Aggregate(a) => aggregate_code(a),
        SelftrainError::Lam(l) => lam_code(l),
        SelftrainError::Geometry(g) => geometry_code(g),
        SelftrainError::Format(f) => format_code(f),
        _ => EXIT_IO,
    }
}

/// Category of the first recognized error in the chain. Transparent variants
/// hide their inner error from the chain, so each enum is walked explicitly.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<SelftrainError>() {
            return selftrain_code(e);
        }
        if let Some(e) = cause.downcast_ref::<AggregateError>() {
            return aggregate_code(e);
        }
        if let Some(e) = cause.downcast_ref::<LamError>() {
            return lam_code(e);
        }
        if let Some(e) = cause.downcast_ref::<NeighborError>() {
            return neighbor_code(e);
        }
        if let Some(e) = cause.downcast_ref::<SubsampleError>() {
            return subsample_code(e);
        }
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return format_code(e);
        }
        if let Some(e) = cause.downcast_ref::<GeometryError>() {
            return geometry_code(e);
        }
        if cause.is::<MetricsError>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_IO
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError::Usage("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    if let Command::Synthgen(args) = &cli.command {
        return synthgen(args);
    }
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match &cli.command {
        Command::Project(a) => project(a, &config),
        Command::Subsample(a) => subsample(a, &config),
        Command::Ensemble(a) => ensemble(a, &config),
        Command::Aggregate(a) => aggregate(a, &config),
        Command::LamTrain(a) => lam_train(a, &config),
        Command::LamApply(a) => lam_apply(a, &config),
        Command::LamAnalyze(a) => lam_analyze(a, &config),
        Command::Cbst(a) => cbst(a, &config),
        Command::Metrics(a) => metrics(a, &config),
        Command::Pipeline(a) => pipeline(a, &config),
        Command::Synthgen(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
