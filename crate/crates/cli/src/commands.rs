use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use lidar_uda::aggregate::{refine_labels, Kernel};
use lidar_uda::geometry::{project_to_range_image, SensorConfig};
use lidar_uda::io::{self, Manifest};
use lidar_uda::lam::{
    modulate_statistics, train_lam, weight_histograms, EpochLoss, HistogramSlice, LamParams,
    CHECKPOINT_VERSION,
};
use lidar_uda::metrics::{
    condense_static_dynamic, confusion, iou, ConfusionMatrix, Group, IouReport,
};
use lidar_uda::neighbors::write_neighbors;
use lidar_uda::selftrain::{
    derive_seed, feature_stream, frame_neighborhoods, run_adaptation, sequence_weights,
    training_set, within_frame_predictions, KernelKind, NoopStudent, PseudoLabelSet, Sequence,
};
use lidar_uda::subsample::{make_ensemble, within_frame_ensemble, PredictionMatrix};
use lidar_uda::synth::{self, SceneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{render_synthetic, ConfigError, PipelineConfig};

/// Writes to a file atomically, or to standard output for `-`.
fn emit(path: &Path, bytes: &[u8]) -> Result<()> {
    if path == Path::new("-") {
        std::io::stdout()
            .lock()
            .write_all(bytes)
            .context("writing standard output")?;
        Ok(())
    } else {
        Ok(io::write_atomic(path, bytes)?)
    }
}

/// Manifest next to a file output; none for standard output.
fn write_file_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    if out != Path::new("-") {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.txt");
        manifest.write(Path::new(&name))?;
    }
    Ok(())
}

fn base_manifest(command: &str, config: &PipelineConfig) -> Manifest {
    let mut m = Manifest::new();
    m.set("command", command);
    m.set("version", env!("CARGO_PKG_VERSION"));
    m.extend(&config.manifest());
    m
}

fn file_checksum(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", io::checksum(&io::read_file(path)?)))
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io::FormatError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// A KITTI-style sequence directory: `velodyne/*.bin`, `poses.txt` and
/// optionally `labels/*.label`.
pub struct Dataset {
    pub stems: Vec<String>,
    pub sequence: Sequence,
    pub labels: Option<Vec<Vec<u32>>>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let scans = list_files(&root.join("velodyne"), "bin")?;
    if scans.is_empty() {
        bail!(io::FormatError::io(
            root.join("velodyne"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .bin scans")
        ));
    }
    let stems: Vec<String> = scans.iter().map(|p| stem_of(p)).collect();
    let clouds = scans
        .iter()
        .enumerate()
        .map(|(i, p)| {
            io::read_scan(p, i as u32).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let poses = io::read_poses(&root.join("poses.txt"))?;
    let sequence = Sequence::new(clouds, poses)?;
    let label_dir = root.join("labels");
    let labels = if label_dir.is_dir() {
        let mut all = Vec::with_capacity(stems.len());
        for (stem, scan) in stems.iter().zip(&sequence.scans) {
            let path = label_dir.join(format!("{stem}.label"));
            let l = io::read_labels(&path)?;
            if l.len() != scan.len() {
                bail!(io::FormatError::Malformed {
                    offset: 4 * l.len().min(scan.len()),
                    message: format!(
                        "{}: {} labels for {} points",
                        path.display(),
                        l.len(),
                        scan.len()
                    ),
                });
            }
            all.push(l);
        }
        Some(all)
    } else {
        None
    };
    Ok(Dataset {
        stems,
        sequence,
        labels,
    })
}

/// One prediction file per frame, `<dir>/<stem>.lprb`, in parent point order.
fn load_predictions(dir: &Path, data: &Dataset) -> Result<Vec<PredictionMatrix>> {
    data.stems
        .iter()
        .zip(&data.sequence.scans)
        .map(|(stem, scan)| {
            let path = dir.join(format!("{stem}.lprb"));
            let p = PredictionMatrix::read(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            p.to_parent_order(scan.len())
                .with_context(|| format!("{}", path.display()))
        })
        .collect()
}

fn write_predictions(dir: &Path, stems: &[String], preds: &[PredictionMatrix]) -> Result<()> {
    for (stem, p) in stems.iter().zip(preds) {
        p.write(&dir.join(format!("{stem}.lprb")))?;
    }
    Ok(())
}

fn predictions_checksum(preds: &[PredictionMatrix]) -> String {
    let bytes: Vec<u8> = preds.iter().flat_map(|p| p.encode()).collect();
    format!("{:016x}", io::checksum(&bytes))
}

fn dataset_root(flag: &Option<PathBuf>, config: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    match flag.as_ref().or(config.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => {
            Err(ConfigError::Usage(format!("no dataset given: pass a path or set `{key}`")).into())
        }
    }
}

fn load_checkpoint(flag: &Option<PathBuf>, config: &PipelineConfig) -> Result<Option<LamParams>> {
    match flag.as_ref().or(config.checkpoint.as_ref()) {
        Some(p) => Ok(Some(
            LamParams::read(p).with_context(|| format!("reading {}", p.display()))?,
        )),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Domain {
    Source,
    Target,
}

fn sensor(config: &PipelineConfig, domain: Domain) -> SensorConfig {
    match domain {
        Domain::Source => config.source_sensor,
        Domain::Target => config.target_sensor,
    }
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Scan in KITTI .bin format.
    #[arg(long)]
    pub scan: PathBuf,
    /// Output CSV (`point,u,v,range`); `-` for standard output.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
    /// Which sensor section of the config to project with.
    #[arg(long, value_enum, default_value = "target")]
    pub domain: Domain,
}

pub fn project(args: &ProjectArgs, config: &PipelineConfig) -> Result<()> {
    let cloud = io::read_scan(&args.scan, 0)?;
    let index = project_to_range_image(&cloud, &sensor(config, args.domain))?;
    let mut csv = String::from("point,u,v,range\n");
    for (i, (&(u, v), r)) in index
        .pixel_of_point()
        .iter()
        .zip(index.range_of_point())
        .enumerate()
    {
        let _ = writeln!(csv, "{i},{u},{v},{r:.6}");
    }
    emit(&args.out, csv.as_bytes())?;
    let mut m = base_manifest("project", config);
    m.set("input.scan", file_checksum(&args.scan)?);
    m.set("domain", format!("{:?}", args.domain).to_lowercase());
    write_file_manifest(&args.out, &m)
}

#[derive(Debug, Args)]
pub struct SubsampleArgs {
    /// Scan in KITTI .bin format.
    #[arg(long)]
    pub scan: PathBuf,
    /// Frame number; selects the random stream, as in the pipeline.
    #[arg(long, default_value_t = 0)]
    pub frame: u64,
    /// Receives `trial_<i>.bin`, `trial_<i>.index` (u32 parent indices) and `manifest.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    pub domain: Domain,
}

pub fn subsample(args: &SubsampleArgs, config: &PipelineConfig) -> Result<()> {
    let cloud = io::read_scan(&args.scan, args.frame as u32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, args.frame));
    let members = make_ensemble(
        &cloud,
        &sensor(config, args.domain),
        &config.subsample,
        &mut rng,
    )?;
    for (i, (sub, map)) in members.iter().enumerate() {
        io::write_scan(&args.out_dir.join(format!("trial_{i}.bin")), sub)?;
        let bytes: Vec<u8> = map.iter().flat_map(|v| v.to_le_bytes()).collect();
        io::write_atomic(&args.out_dir.join(format!("trial_{i}.index")), &bytes)?;
    }
    let mut m = base_manifest("subsample", config);
    m.set("input.scan", file_checksum(&args.scan)?);
    m.set("frame", args.frame);
    m.set("trials", members.len());
    for (i, (sub, _)) in members.iter().enumerate() {
        m.set(format!("trial_{i}.points"), sub.len());
    }
    Ok(m.write(&args.out_dir.join("manifest.txt"))?)
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Predictions of the subsampled copies (.lprb with parent indices).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// The full scan the inputs were subsampled from.
    #[arg(long)]
    pub scan: PathBuf,
    /// Ensembled prediction file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ensemble(args: &EnsembleArgs, config: &PipelineConfig) -> Result<()> {
    let cloud = io::read_scan(&args.scan, 0)?;
    let preds = args
        .inputs
        .iter()
        .map(|p| PredictionMatrix::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = within_frame_ensemble(&preds, cloud.len())?;
    merged.write(&args.out)?;
    let mut m = base_manifest("ensemble", config);
    m.set("input.scan", file_checksum(&args.scan)?);
    for (i, p) in args.inputs.iter().enumerate() {
        m.set(format!("input.prediction_{i}"), file_checksum(p)?);
    }
    write_file_manifest(&args.out, &m)
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Sequence directory (overrides `dataset.root`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Within-frame predictions, one `<stem>.lprb` per scan.
    #[arg(long)]
    pub predictions: PathBuf,
    /// LAM checkpoint, used as given (overrides `lam.checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the uniform kernel regardless of the config.
    #[arg(long)]
    pub uniform: bool,
    /// Also write `neighbors/<stem>.lnbr`.
    #[arg(long)]
    pub neighbors: bool,
    /// Receives `refined/<stem>.lprb` and `manifest.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn aggregate(args: &AggregateArgs, config: &PipelineConfig) -> Result<()> {
    let data = load_dataset(&dataset_root(
        &args.dataset,
        &config.dataset,
        "dataset.root",
    )?)?;
    let preds = load_predictions(&args.predictions, &data)?;
    let lam = if args.uniform || config.aggregation.kernel == KernelKind::Uniform {
        None
    } else {
        Some(load_checkpoint(&args.checkpoint, config)?.ok_or_else(|| {
            ConfigError::Usage("the lam kernel needs --checkpoint or `lam.checkpoint`".into())
        })?)
    };
    let kernel = lam.as_ref().map_or(Kernel::Uniform, Kernel::Lam);
    let agg = &config.aggregation;
    let pairs: Vec<_> = data
        .sequence
        .scans
        .iter()
        .cloned()
        .zip(preds.iter().cloned())
        .collect();
    for (t, stem) in data.stems.iter().enumerate() {
        let (dense, sets) = frame_neighborhoods(&pairs, &data.sequence.poses, t, agg)?;
        let queries = &dense.points[dense.reference_points()];
        let refined = refine_labels(queries, &preds[t], &dense, &sets, &kernel)?;
        refined.write(&args.out_dir.join("refined").join(format!("{stem}.lprb")))?;
        if args.neighbors {
            write_neighbors(
                &args.out_dir.join("neighbors").join(format!("{stem}.lnbr")),
                &sets,
                agg.k,
            )?;
        }
    }
    let mut m = base_manifest("aggregate", config);
    m.set("aggregation.kernel", kernel.name());
    m.set(
        "input.checksum",
        format!("{:016x}", data.sequence.checksum()),
    );
    m.set("input.predictions", predictions_checksum(&preds));
    if let Some(p) = &lam {
        m.set(
            "lam.checksum",
            format!("{:016x}", io::checksum(&p.encode())),
        );
    }
    Ok(m.write(&args.out_dir.join("manifest.txt"))?)
}

#[derive(Debug, Args)]
pub struct LamTrainArgs {
    /// Labeled source sequence (overrides `dataset.source`).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Within-frame source predictions; the configured mock predictor is used when absent.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path with `.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn lam_train(args: &LamTrainArgs, config: &PipelineConfig) -> Result<()> {
    let data = load_dataset(&dataset_root(
        &args.source,
        &config.source,
        "dataset.source",
    )?)?;
    let Some(truth) = &data.labels else {
        bail!(ConfigError::Usage(
            "LAM training needs a source sequence with labels/".into()
        ));
    };
    let adaptation = config.adaptation(config.source_sensor);
    let within_frame = match &args.predictions {
        Some(dir) => load_predictions(dir, &data)?,
        None => {
            within_frame_predictions(&data.sequence, &config.mock.predictor(), &adaptation, false)?
        }
    };
    let set = training_set(
        &data.sequence,
        &within_frame,
        truth,
        &config.aggregation,
        config.query_step,
        config.ignore,
    )?;
    log::info!(
        "training on {} neighborhoods ({} neighbor rows)",
        set.len(),
        set.rows()
    );
    let outcome = train_lam(&set, &config.train)?;
    outcome.params.write(&args.out)?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| args.out.with_extension("trace.csv"));
    emit(&trace, EpochLoss::to_csv(&outcome.trace).as_bytes())?;
    let mut m = base_manifest("lam-train", config);
    m.set(
        "input.checksum",
        format!("{:016x}", data.sequence.checksum()),
    );
    m.set("input.predictions", predictions_checksum(&within_frame));
    m.set("train.neighborhoods", set.len());
    m.set("train.rows", set.rows());
    m.set("checkpoint.version", CHECKPOINT_VERSION);
    m.set(
        "checkpoint.checksum",
        format!("{:016x}", io::checksum(&outcome.params.encode())),
    );
    if let Some(last) = outcome.trace.last() {
        m.set("train.final_loss", format!("{:.9}", last.total));
    }
    write_file_manifest(&args.out, &m)
}

#[derive(Debug, Args)]
pub struct LamApplyArgs {
    /// Sequence directory (overrides `dataset.root`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Within-frame predictions, one `<stem>.lprb` per scan.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Source checkpoint (overrides `lam.checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Receives `lam_modulated.lamw`, `refined/<stem>.lprb` and `manifest.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Adapts the checkpoint's input statistics to the target sequence, then refines.
pub fn lam_apply(args: &LamApplyArgs, config: &PipelineConfig) -> Result<()> {
    let data = load_dataset(&dataset_root(
        &args.dataset,
        &config.dataset,
        "dataset.root",
    )?)?;
    let preds = load_predictions(&args.predictions, &data)?;
    let params = load_checkpoint(&args.checkpoint, config)?.ok_or_else(|| {
        ConfigError::Usage("lam-apply needs --checkpoint or `lam.checkpoint`".into())
    })?;
    let agg = &config.aggregation;
    let stats = feature_stream(&data.sequence, &preds, agg)?;
    let (modulated, warnings) = modulate_statistics(&params, &stats)?;
    modulated.write(&args.out_dir.join("lam_modulated.lamw"))?;
    let kernel = Kernel::Lam(&modulated);
    let pairs: Vec<_> = data
        .sequence
        .scans
        .iter()
        .cloned()
        .zip(preds.iter().cloned())
        .collect();
    let mut refined = Vec::with_capacity(preds.len());
    for t in 0..data.stems.len() {
        let (dense, sets) = frame_neighborhoods(&pairs, &data.sequence.poses, t, agg)?;
        let queries = &dense.points[dense.reference_points()];
        refined.push(refine_labels(queries, &preds[t], &dense, &sets, &kernel)?);
    }
    write_predictions(&args.out_dir.join("refined"), &data.stems, &refined)?;
    let mut m = base_manifest("lam-apply", config);
    m.set(
        "input.checksum",
        format!("{:016x}", data.sequence.checksum()),
    );
    m.set("input.predictions", predictions_checksum(&preds));
    m.set(
        "lam.checksum",
        format!("{:016x}", io::checksum(&params.encode())),
    );
    m.set("stats.rows", stats.count());
    for w in &warnings {
        m.set(format!("warning.variance_floor.{}", w.feature), w.observed);
    }
    Ok(m.write(&args.out_dir.join("manifest.txt"))?)
}

#[derive(Debug, Args)]
pub struct LamAnalyzeArgs {
    /// Sequence directory (overrides `dataset.root`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Within-frame predictions, one `<stem>.lprb` per scan.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Checkpoint whose weights are analyzed; the uniform kernel when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bins per slice (overrides `analysis.bins`).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Histogram CSV; `-` for standard output.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

pub fn lam_analyze(args: &LamAnalyzeArgs, config: &PipelineConfig) -> Result<()> {
    let data = load_dataset(&dataset_root(
        &args.dataset,
        &config.dataset,
        "dataset.root",
    )?)?;
    let preds = load_predictions(&args.predictions, &data)?;
    let params = load_checkpoint(&args.checkpoint, config)?;
    let kernel = params.as_ref().map_or(Kernel::Uniform, Kernel::Lam);
    let bins = args.bins.unwrap_or(config.bins);
    if bins == 0 {
        bail!(ConfigError::Usage("--bins must be >= 1".into()));
    }
    let samples = sequence_weights(&data.sequence, &preds, &config.aggregation, &kernel)?;
    let report = weight_histograms(&samples, &HistogramSlice::ALL, bins);
    emit(&args.out, report.to_csv().as_bytes())?;
    let mut m = base_manifest("lam-analyze", config);
    m.set("analysis.bins", bins);
    m.set("aggregation.kernel", kernel.name());
    m.set(
        "input.checksum",
        format!("{:016x}", data.sequence.checksum()),
    );
    m.set("input.predictions", predictions_checksum(&preds));
    m.set("samples", samples.len());
    write_file_manifest(&args.out, &m)
}

#[derive(Debug, Args)]
pub struct CbstArgs {
    /// Refined predictions, one `<stem>.lprb` per scan.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Portion kept per class (overrides `cbst.portion`).
    #[arg(long)]
    pub portion: Option<f64>,
    /// Receives `labels/<stem>.label`, `masks/<stem>.mask` and `manifest.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cbst(args: &CbstArgs, config: &PipelineConfig) -> Result<()> {
    let mut cbst = config.cbst;
    if let Some(p) = args.portion {
        cbst.portion = p;
    }
    cbst.validate().map_err(|e| ConfigError::Invalid {
        section: "cbst".into(),
        message: e.to_string(),
    })?;
    let files = list_files(&args.predictions, "lprb")?;
    let preds = files
        .iter()
        .map(|p| PredictionMatrix::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let classes = preds.first().map_or(1, |p| p.classes());
    if let Some(p) = preds.iter().find(|p| p.classes() != classes) {
        bail!(lidar_uda::subsample::SubsampleError::ClassMismatch(
            classes,
            p.classes()
        ));
    }
    let mut sets: Vec<PseudoLabelSet> = preds.iter().map(PseudoLabelSet::from_prediction).collect();
    lidar_uda::selftrain::apply_cbst(&mut sets, classes, &cbst);
    for (path, s) in files.iter().zip(&sets) {
        let stem = stem_of(path);
        io::write_labels(
            &args.out_dir.join("labels").join(format!("{stem}.label")),
            &s.labels,
        )?;
        io::write_atomic(
            &args.out_dir.join("masks").join(format!("{stem}.mask")),
            &io::encode_mask(&s.selected),
        )?;
    }
    let mut m = base_manifest("cbst", config);
    m.set("cbst.portion", cbst.portion);
    m.set("input.predictions", predictions_checksum(&preds));
    m.set(
        "selected_points",
        sets.iter().map(|s| s.selected_count()).sum::<usize>(),
    );
    Ok(m.write(&args.out_dir.join("manifest.txt"))?)
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Predicted labels: a .label file or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: a .label file or a directory with matching file names.
    #[arg(long)]
    pub truth: PathBuf,
    /// Number of classes; inferred from the largest label when absent.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Ignored ground-truth label (overrides `dataset.ignore_label`).
    #[arg(long)]
    pub ignore: Option<u32>,
    /// Dynamic classes for the static/dynamic table (overrides `metrics.dynamic_classes`).
    #[arg(long, value_delimiter = ',')]
    pub dynamic: Option<Vec<u32>>,
    /// Receives `report.csv`, `summary.txt`, `confusion.csv` and, with dynamic classes, `condensed.csv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn label_pairs(pred: &Path, truth: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if pred.is_dir() {
        list_files(pred, "label")?
            .into_iter()
            .map(|p| {
                let t = truth.join(p.file_name().unwrap_or_default());
                if !t.exists() {
                    bail!(io::FormatError::io(
                        &t,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "no matching ground truth"
                        )
                    ));
                }
                Ok((p, t))
            })
            .collect()
    } else {
        Ok(vec![(pred.to_path_buf(), truth.to_path_buf())])
    }
}

pub fn metrics(args: &MetricsArgs, config: &PipelineConfig) -> Result<()> {
    let ignore = args.ignore.or(config.ignore);
    let pairs = label_pairs(&args.pred, &args.truth)?;
    let mut loaded = Vec::with_capacity(pairs.len());
    for (p, t) in &pairs {
        loaded.push((io::read_labels(p)?, io::read_labels(t)?));
    }
    let classes = args.classes.unwrap_or_else(|| {
        loaded
            .iter()
            .flat_map(|(p, t)| p.iter().chain(t.iter()))
            .filter(|&&l| Some(l) != ignore)
            .max()
            .map_or(1, |&m| m as usize + 1)
    });
    let mut matrix = ConfusionMatrix::new(classes, ignore);
    for ((p, t), (pp, tp)) in loaded.iter().zip(&pairs) {
        matrix
            .add(p, t)
            .with_context(|| format!("{} vs {}", pp.display(), tp.display()))?;
    }
    let report = iou(&matrix);
    println!("mIoU: {}", report.miou_text());
    if let Some(dir) = &args.out_dir {
        let dynamic = args
            .dynamic
            .clone()
            .unwrap_or_else(|| config.dynamic_classes.clone());
        write_reports(dir, &matrix, &report, &dynamic)?;
        let mut m = base_manifest("metrics", config);
        m.set("classes", classes);
        m.set("ignore", ignore.map_or("none".into(), |v| v.to_string()));
        for (i, (p, t)) in pairs.iter().enumerate() {
            m.set(format!("input.pred_{i}"), file_checksum(p)?);
            m.set(format!("input.truth_{i}"), file_checksum(t)?);
        }
        m.write(&dir.join("manifest.txt"))?;
    }
    Ok(())
}

fn write_reports(
    dir: &Path,
    matrix: &ConfusionMatrix,
    report: &IouReport,
    dynamic: &[u32],
) -> Result<()> {
    io::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    io::write_atomic(
        &dir.join("summary.txt"),
        format!("{}\n", report.summary()).as_bytes(),
    )?;
    io::write_atomic(&dir.join("confusion.csv"), matrix.to_csv().as_bytes())?;
    if !dynamic.is_empty() {
        let grouping: Vec<Group> = (0..matrix.classes() as u32)
            .map(|c| {
                if dynamic.contains(&c) {
                    Group::Dynamic
                } else {
                    Group::Static
                }
            })
            .collect();
        let condensed = condense_static_dynamic(matrix, &grouping)?;
        io::write_atomic(&dir.join("condensed.csv"), condensed.to_csv().as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Sequence directory (overrides `dataset.root`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// LAM checkpoint (overrides `lam.checkpoint`); required for the lam kernel.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Receives `iter_<i>/`, `histogram.csv`, `report.txt` and, with ground truth, `report.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Pseudo-label generation with the configured mock teacher, followed by the
/// kernel-weight analysis and, when the sequence has labels, an evaluation.
pub fn pipeline(args: &PipelineArgs, config: &PipelineConfig) -> Result<()> {
    let data = load_dataset(&dataset_root(
        &args.dataset,
        &config.dataset,
        "dataset.root",
    )?)?;
    let adaptation = config.adaptation(config.target_sensor);
    let lam = match adaptation.aggregation.kernel {
        KernelKind::Uniform => None,
        KernelKind::Lam => Some(load_checkpoint(&args.checkpoint, config)?.ok_or_else(|| {
            ConfigError::Usage("the lam kernel needs --checkpoint or `lam.checkpoint`".into())
        })?),
    };
    let teacher = config.mock.predictor();
    let result = run_adaptation(
        &data.sequence,
        &teacher,
        &mut NoopStudent,
        lam.as_ref(),
        &adaptation,
        Some(&args.out_dir),
    )?;
    let last = result.iterations.last().expect("at least one iteration");
    let generation = &last.generation;

    let kernel = generation
        .kernel_params
        .as_ref()
        .map_or(Kernel::Uniform, Kernel::Lam);
    let samples = sequence_weights(
        &data.sequence,
        &generation.within_frame,
        &adaptation.aggregation,
        &kernel,
    )?;
    let histogram = weight_histograms(&samples, &HistogramSlice::ALL, config.bins);
    io::write_atomic(
        &args.out_dir.join("histogram.csv"),
        histogram.to_csv().as_bytes(),
    )?;

    let classes = teacher.rule.classes();
    let selected: usize = generation.labels.iter().map(|s| s.selected_count()).sum();
    let points: usize = generation.labels.iter().map(|s| s.len()).sum();
    let mut text = String::new();
    let _ = writeln!(text, "frames = {}", data.stems.len());
    let _ = writeln!(text, "points = {points}");
    let _ = writeln!(text, "selected = {selected}");
    if let Some(truth) = &data.labels {
        let flat_truth: Vec<u32> = truth.iter().flatten().copied().collect();
        let argmax =
            |ps: &[PredictionMatrix]| -> Vec<u32> { ps.iter().flat_map(|p| p.argmax()).collect() };
        let within = iou(&confusion(
            &argmax(&generation.within_frame),
            &flat_truth,
            classes,
            config.ignore,
        )?);
        let refined_labels: Vec<u32> = generation
            .labels
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect();
        let matrix = confusion(&refined_labels, &flat_truth, classes, config.ignore)?;
        let refined = iou(&matrix);
        let mask: Vec<bool> = generation
            .labels
            .iter()
            .flat_map(|s| s.selected.iter().copied())
            .collect();
        let (sp, st): (Vec<u32>, Vec<u32>) = refined_labels
            .iter()
            .zip(&flat_truth)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &t), _)| (p, t))
            .unzip();
        let chosen = iou(&confusion(&sp, &st, classes, config.ignore)?);
        let _ = writeln!(text, "within_frame_miou = {}", within.miou_text());
        let _ = writeln!(text, "refined_miou = {}", refined.miou_text());
        let _ = writeln!(text, "selected_miou = {}", chosen.miou_text());
        write_reports(&args.out_dir, &matrix, &refined, &config.dynamic_classes)?;
        println!("mIoU: {}", refined.miou_text());
    }
    io::write_atomic(&args.out_dir.join("report.txt"), text.as_bytes())?;

    let mut m = base_manifest("pipeline", config);
    m.extend(&result.manifest);
    m.set("histogram.samples", samples.len());
    Ok(m.write(&args.out_dir.join("manifest.txt"))?)
}

#[derive(Debug, Args)]
pub struct SynthgenArgs {
    /// Receives `velodyne/`, `labels/`, `poses.txt` and a matching `config.ini`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub beams: u32,
    #[arg(long, default_value_t = 360)]
    pub columns: u32,
}

pub fn synthgen(args: &SynthgenArgs) -> Result<()> {
    let scene = SceneConfig {
        frames: args.frames,
        seed: args.seed,
        beams: args.beams,
        columns: args.columns,
        ..SceneConfig::default()
    };
    let data = synth::generate(&scene);
    synth::write_sequence(&args.out_dir, &data)?;
    let root = args
        .out_dir
        .canonicalize()
        .map_err(|e| io::FormatError::io(&args.out_dir, e))?;
    let thresholds = match scene.truth_rule() {
        lidar_uda::selftrain::MockRule::HeightThreshold(t)
        | lidar_uda::selftrain::MockRule::RadialBands(t) => t,
    };
    let text = render_synthetic(&root, &scene.sensor(), &thresholds);
    Ok(io::write_atomic(
        &args.out_dir.join("config.ini"),
        text.as_bytes(),
    )?)
}
