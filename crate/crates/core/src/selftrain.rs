//! Pseudo-label generation and the iterative adaptation loop.
//!
//! A scan's labels come from two ensembling steps: the predictor is run on
//! row-subsampled copies of the scan and the outputs are averaged per point,
//! then every point's label is re-estimated from its neighbors in a temporal
//! window of aligned scans. Class-balanced selection keeps the most confident
//! portion of each class.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregate::{phi_into, refine_labels, AggregateError, Kernel};
use crate::geometry::{
    AugmentationSpec, GeometryError, Point3, PointCloud, RigidTransform, SensorConfig,
};
use crate::io::{self, FormatError, Manifest};
use crate::lam::{
    feature_dim, modulate_statistics, neighbor_weights, FeatureStats, LamError, LamParams,
    TrainingSet, VarianceWarning, WeightSample,
};
use crate::neighbors::{
    build_dense_cloud, precompute_neighbors, DenseCloud, NeighborError, NeighborSet, SpatialIndex,
};
use crate::subsample::{
    make_ensemble, within_frame_ensemble, PredictionMatrix, SubsampleError, SubsampleMode,
    SubsampleSpec,
};

#[derive(Debug, Error)]
pub enum SelftrainError {
    #[error("predictor returned {got} rows for {expected} points")]
    PredictionRows { expected: usize, got: usize },
    #[error("predictor returned {got} classes, expected {expected}")]
    Classes { expected: usize, got: usize },
    #[error("{scans} scans but {poses} poses")]
    MissingPose { scans: usize, poses: usize },
    #[error("{0} labels do not match the scan sizes")]
    LabelCount(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("student training failed in iteration {iteration}: {message}")]
    Hook { iteration: usize, message: String },
    #[error(transparent)]
    Subsample(#[from] SubsampleError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Lam(#[from] LamError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A segmentation model: one probability row per input point.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> usize;
    fn uses_intensity(&self) -> bool;
    fn predict(&self, cloud: &PointCloud) -> Result<PredictionMatrix, SelftrainError>;
}

/// Geometric labeling rule of [`MockPredictor`].
#[derive(Debug, Clone, PartialEq)]
pub enum MockRule {
    /// Class = number of thresholds at or below the point's z.
    HeightThreshold(Vec<f64>),
    /// Class = number of band edges at or below the horizontal range.
    RadialBands(Vec<f64>),
}

impl MockRule {
    pub fn classes(&self) -> usize {
        match self {
            MockRule::HeightThreshold(t) | MockRule::RadialBands(t) => t.len() + 1,
        }
    }

    pub fn label(&self, p: &Point3) -> u32 {
        let (edges, x) = match self {
            MockRule::HeightThreshold(t) => (t, p.z),
            MockRule::RadialBands(t) => (t, p.x.hypot(p.y)),
        };
        edges.iter().filter(|&&e| e <= x).count() as u32
    }
}

/// Label flips drawn independently per point. The flip probability is
/// interpolated linearly in sensor range between `near_rate` at
/// `near_range` and `far_rate` at `far_range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipNoise {
    pub near_rate: f64,
    pub far_rate: f64,
    pub near_range: f64,
    pub far_range: f64,
    pub seed: u64,
}

impl FlipNoise {
    pub fn uniform(rate: f64, seed: u64) -> Self {
        Self {
            near_rate: rate,
            far_rate: rate,
            near_range: 0.0,
            far_range: 1.0,
            seed,
        }
    }

    pub fn rate_at(&self, range: f64) -> f64 {
        if self.far_range <= self.near_range {
            return self.near_rate;
        }
        let t = ((range - self.near_range) / (self.far_range - self.near_range)).clamp(0.0, 1.0);
        self.near_rate + t * (self.far_rate - self.near_rate)
    }
}

/// Stands in for a trained network: labels points by a geometric rule,
/// optionally with label noise and softened (non one-hot) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MockPredictor {
    pub rule: MockRule,
    pub noise: Option<FlipNoise>,
    /// Probability assigned to the emitted class; the rest is spread evenly.
    pub confidence: f64,
}

impl MockPredictor {
    pub fn new(rule: MockRule) -> Self {
        Self {
            rule,
            noise: None,
            confidence: 1.0,
        }
    }

    pub fn with_noise(mut self, noise: FlipNoise) -> Self {
        self.noise = Some(noise);
        self
    }

    pub fn softened(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    /// Emitted label of one point; deterministic in the point's coordinates,
    /// frame and the noise seed.
    pub fn label_of(&self, p: &Point3, frame: u32) -> u32 {
        let y = self.rule.label(p);
        let k = self.rule.classes() as u64;
        let Some(noise) = &self.noise else { return y };
        if k < 2 {
            return y;
        }
        let h = point_hash(p, frame, noise.seed);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u >= noise.rate_at(p.norm()) {
            return y;
        }
        let shift = 1 + mix64(h) % (k - 1);
        ((y as u64 + shift) % k) as u32
    }
}

impl Predictor for MockPredictor {
    fn num_classes(&self) -> usize {
        self.rule.classes()
    }

    fn uses_intensity(&self) -> bool {
        false
    }

    fn predict(&self, cloud: &PointCloud) -> Result<PredictionMatrix, SelftrainError> {
        let k = self.num_classes();
        let rest = if k > 1 {
            (1.0 - self.confidence) / (k - 1) as f64
        } else {
            0.0
        };
        let mut probs = vec![rest; cloud.len() * k];
        for (i, p) in cloud.points().iter().enumerate() {
            let y = self.label_of(p, cloud.frame_id) as usize;
            probs[i * k + y] = if k > 1 { self.confidence } else { 1.0 };
        }
        Ok(PredictionMatrix::dense(k, probs)?)
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn point_hash(p: &Point3, frame: u32, seed: u64) -> u64 {
    let mut h = mix64(seed);
    for v in [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), frame as u64] {
        h = mix64(h ^ v);
    }
    h
}

/// Seed of an independent random stream for item `index`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}

/// Per-point hard labels of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<u32>,
    pub confidence: Vec<f64>,
    pub selected: Vec<bool>,
}

impl PseudoLabelSet {
    /// Argmax labels and max confidences; everything selected.
    pub fn from_prediction(pred: &PredictionMatrix) -> Self {
        let labels = pred.argmax();
        let confidence = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| pred.row(i)[y as usize])
            .collect();
        let selected = vec![true; labels.len()];
        Self {
            labels,
            confidence,
            selected,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbstConfig {
    /// Portion of each class kept, in (0, 1].
    pub portion: f64,
}

impl Default for CbstConfig {
    fn default() -> Self {
        Self { portion: 0.2 }
    }
}

impl CbstConfig {
    pub fn validate(&self) -> Result<(), SelftrainError> {
        if !(self.portion > 0.0 && self.portion <= 1.0) {
            return Err(SelftrainError::Config(format!(
                "CBST portion must be in (0, 1], got {}",
                self.portion
            )));
        }
        Ok(())
    }
}

/// Per-class confidence thresholds: the `ceil(p * n_c)`-th highest
/// confidence of class `c`, or `None` for absent classes.
pub fn cbst_thresholds(
    labels: &[u32],
    confidence: &[f64],
    classes: usize,
    config: &CbstConfig,
) -> Vec<Option<f64>> {
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (&y, &c) in labels.iter().zip(confidence) {
        if let Some(v) = per_class.get_mut(y as usize) {
            v.push(c);
        }
    }
    per_class
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return None;
            }
            v.sort_by(|a, b| b.total_cmp(a));
            // The small offset keeps e.g. 0.2 * 5 from rounding up to 2.
            let n = ((config.portion * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
            Some(v[n - 1])
        })
        .collect()
}

/// Selects points whose confidence reaches their class threshold; ties at
/// the threshold are all selected.
pub fn cbst_select(
    labels: &[u32],
    confidence: &[f64],
    classes: usize,
    config: &CbstConfig,
) -> Vec<bool> {
    let thresholds = cbst_thresholds(labels, confidence, classes, config);
    labels
        .iter()
        .zip(confidence)
        .map(|(&y, &c)| {
            thresholds
                .get(y as usize)
                .copied()
                .flatten()
                .is_some_and(|t| c >= t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Uniform,
    Lam,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Uniform => "uniform",
            KernelKind::Lam => "lam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    pub kernel: KernelKind,
    pub k: usize,
    pub eps: Option<f64>,
    /// Temporal half-window in frames.
    pub window: u32,
    pub stride: u32,
    /// Replace the model's standardization statistics with the target's.
    pub modulate: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Lam,
            k: 60,
            eps: Some(0.2),
            window: 90,
            stride: 3,
            modulate: true,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), SelftrainError> {
        if self.k == 0 || self.k > u16::MAX as usize {
            return Err(SelftrainError::Config(format!(
                "k must be in 1..=65535, got {}",
                self.k
            )));
        }
        if self.stride == 0 {
            return Err(SelftrainError::Config("stride must be >= 1".into()));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) || !e.is_finite() {
                return Err(SelftrainError::Config(format!(
                    "eps must be positive, got {e}"
                )));
            }
        }
        Ok(())
    }
}

/// Iteration 0 runs without intensities; later iterations use them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntensityPolicy {
    #[default]
    DropFirstIteration,
}

impl IntensityPolicy {
    pub fn uses_intensity(&self, iteration: usize) -> bool {
        match self {
            IntensityPolicy::DropFirstIteration => iteration > 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub iterations: usize,
    pub intensity_policy: IntensityPolicy,
    pub sensor: SensorConfig,
    pub subsample: SubsampleSpec,
    pub aggregation: AggregationConfig,
    pub cbst: CbstConfig,
    /// Handed to the student trainer; not used for label generation.
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            intensity_policy: IntensityPolicy::default(),
            sensor: SensorConfig::hdl64(),
            subsample: SubsampleSpec::random(0.5, 3),
            aggregation: AggregationConfig::default(),
            cbst: CbstConfig::default(),
            augmentation: AugmentationSpec::intense(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), SelftrainError> {
        if self.iterations == 0 {
            return Err(SelftrainError::Config("iterations must be >= 1".into()));
        }
        self.sensor.validate()?;
        self.subsample.validate()?;
        self.aggregation.validate()?;
        self.cbst.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    /// Every field as manifest entries.
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        let s = &self.sensor;
        let a = &self.aggregation;
        let g = &self.augmentation;
        m.set("adaptation.iterations", self.iterations);
        m.set("adaptation.intensity_policy", "drop_first_iteration");
        m.set("adaptation.seed", self.seed);
        m.set("sensor.height", s.height);
        m.set("sensor.width", s.width);
        m.set("sensor.fov_up", s.fov_up);
        m.set("sensor.fov_down", s.fov_down);
        m.set("sensor.beams", s.beams);
        m.set(
            "subsample.mode",
            match self.subsample.mode {
                SubsampleMode::Random => "random",
                SubsampleMode::Regular => "regular",
            },
        );
        m.set("subsample.ratio", self.subsample.ratio);
        m.set("subsample.trials", self.subsample.trials);
        m.set(
            "subsample.include_identity",
            self.subsample.include_identity,
        );
        m.set("aggregation.kernel", a.kernel.name());
        m.set("aggregation.k", a.k);
        m.set(
            "aggregation.eps",
            a.eps.map_or("none".to_string(), |e| e.to_string()),
        );
        m.set("aggregation.window", a.window);
        m.set("aggregation.stride", a.stride);
        m.set("aggregation.modulate", a.modulate);
        m.set(
            "aggregation.phi_layout_version",
            crate::aggregate::PHI_LAYOUT_VERSION,
        );
        m.set("cbst.portion", self.cbst.portion);
        m.set("augmentation.rotation_range", g.rotation_range);
        m.set("augmentation.flip_x", g.flip_x);
        m.set("augmentation.flip_y", g.flip_y);
        m.set("augmentation.scale_min", g.scale_range.0);
        m.set("augmentation.scale_max", g.scale_range.1);
        m.set("augmentation.translation_sigma", g.translation_sigma);
        m.set("lam.batchnorm_momentum", crate::lam::BN_MOMENTUM);
        m
    }
}

/// Scans in sensor coordinates plus their poses in a common frame.
#[derive(Debug, Clone, Default)]
pub struct Sequence {
    pub scans: Vec<PointCloud>,
    pub poses: Vec<RigidTransform>,
}

impl Sequence {
    pub fn new(scans: Vec<PointCloud>, poses: Vec<RigidTransform>) -> Result<Self, SelftrainError> {
        if poses.len() < scans.len() {
            return Err(SelftrainError::MissingPose {
                scans: scans.len(),
                poses: poses.len(),
            });
        }
        Ok(Self { scans, poses })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// FNV-1a checksum over the encoded scans and poses.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for s in &self.scans {
            bytes.extend_from_slice(&io::encode_scan(s));
        }
        bytes.extend_from_slice(io::format_poses(&self.poses).as_bytes());
        io::checksum(&bytes)
    }
}

fn checked_prediction(
    predictor: &dyn Predictor,
    cloud: &PointCloud,
) -> Result<PredictionMatrix, SelftrainError> {
    let pred = predictor.predict(cloud)?;
    if pred.classes() != predictor.num_classes() {
        return Err(SelftrainError::Classes {
            expected: predictor.num_classes(),
            got: pred.classes(),
        });
    }
    if pred.rows() != cloud.len() {
        return Err(SelftrainError::PredictionRows {
            expected: cloud.len(),
            got: pred.rows(),
        });
    }
    Ok(pred.to_parent_order(cloud.len())?)
}

/// Within-frame ensemble of every scan: the predictor's mean output over
/// row-subsampled copies. Each scan draws its subsamples from its own seeded
/// stream, so the result does not depend on the thread count.
pub fn within_frame_predictions(
    sequence: &Sequence,
    predictor: &dyn Predictor,
    config: &AdaptationConfig,
    use_intensity: bool,
) -> Result<Vec<PredictionMatrix>, SelftrainError> {
    let k = predictor.num_classes();
    sequence
        .scans
        .par_iter()
        .enumerate()
        .map(|(i, scan)| {
            let cloud = if use_intensity {
                scan.clone()
            } else {
                scan.without_intensity()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
            let members = make_ensemble(&cloud, &config.sensor, &config.subsample, &mut rng)?;
            let mut preds = Vec::with_capacity(members.len());
            for (sub, map) in members {
                let pred = checked_prediction(predictor, &sub)?;
                preds.push(PredictionMatrix::new(k, pred.probs().to_vec(), map)?);
            }
            Ok(within_frame_ensemble(&preds, cloud.len())?)
        })
        .collect()
}

/// Dense cloud around frame `t` and the neighborhoods of the reference
/// frame's points.
pub fn frame_neighborhoods(
    scans: &[(PointCloud, PredictionMatrix)],
    poses: &[RigidTransform],
    t: usize,
    agg: &AggregationConfig,
) -> Result<(DenseCloud, Vec<NeighborSet>), SelftrainError> {
    let dense = build_dense_cloud(scans, poses, t, agg.window, agg.stride)?;
    let index = SpatialIndex::build(&dense.points);
    let sets = precompute_neighbors(
        &index,
        &dense.points[dense.reference_points()],
        agg.k,
        agg.eps,
    );
    Ok((dense, sets))
}

fn paired(sequence: &Sequence, preds: &[PredictionMatrix]) -> Vec<(PointCloud, PredictionMatrix)> {
    sequence
        .scans
        .iter()
        .cloned()
        .zip(preds.iter().cloned())
        .collect()
}

/// Streams every Φ row of every frame into `stats`, in frame and query order.
pub fn feature_stream(
    sequence: &Sequence,
    within_frame: &[PredictionMatrix],
    agg: &AggregationConfig,
) -> Result<FeatureStats, SelftrainError> {
    let pairs = paired(sequence, within_frame);
    let k = within_frame.first().map_or(1, |p| p.classes());
    let mut stats = FeatureStats::new(feature_dim(k));
    let mut row = vec![0.0; feature_dim(k)];
    for t in 0..sequence.len() {
        let (dense, sets) = frame_neighborhoods(&pairs, &sequence.poses, t, agg)?;
        let queries = &dense.points[dense.reference_points()];
        for (q, set) in sets.iter().enumerate() {
            let v_p = within_frame[t].row(q);
            for (j, _) in set.valid() {
                phi_into(&mut row, &queries[q], v_p, &dense, j as usize);
                stats.push(&row);
            }
        }
    }
    Ok(stats)
}

/// Cross-frame refinement of every frame.
pub fn refine_sequence(
    sequence: &Sequence,
    within_frame: &[PredictionMatrix],
    agg: &AggregationConfig,
    kernel: &Kernel,
) -> Result<Vec<PredictionMatrix>, SelftrainError> {
    let pairs = paired(sequence, within_frame);
    (0..sequence.len())
        .map(|t| {
            let (dense, sets) = frame_neighborhoods(&pairs, &sequence.poses, t, agg)?;
            let queries = &dense.points[dense.reference_points()];
            Ok(refine_labels(
                queries,
                &within_frame[t],
                &dense,
                &sets,
                kernel,
            )?)
        })
        .collect()
}

/// Everything produced while labeling one sequence.
#[derive(Debug, Clone)]
pub struct Generation {
    pub within_frame: Vec<PredictionMatrix>,
    pub refined: Vec<PredictionMatrix>,
    pub labels: Vec<PseudoLabelSet>,
    /// The kernel model actually used (after modulation), if any.
    pub kernel_params: Option<LamParams>,
    pub variance_warnings: Vec<VarianceWarning>,
}

/// Within-frame ensembling, cross-frame refinement and CBST selection over
/// the whole sequence. `lam` is required when the configured kernel is LAM.
pub fn generate_pseudo_labels(
    sequence: &Sequence,
    predictor: &dyn Predictor,
    lam: Option<&LamParams>,
    config: &AdaptationConfig,
    use_intensity: bool,
) -> Result<Generation, SelftrainError> {
    config.validate()?;
    if sequence.poses.len() < sequence.len() {
        return Err(SelftrainError::MissingPose {
            scans: sequence.len(),
            poses: sequence.poses.len(),
        });
    }
    let within_frame = within_frame_predictions(sequence, predictor, config, use_intensity)?;
    let agg = &config.aggregation;
    let (kernel_params, variance_warnings) = match agg.kernel {
        KernelKind::Uniform => (None, Vec::new()),
        KernelKind::Lam => {
            let params =
                lam.ok_or_else(|| SelftrainError::Config("LAM kernel needs a model".into()))?;
            if params.classes != predictor.num_classes() {
                return Err(SelftrainError::Classes {
                    expected: params.classes,
                    got: predictor.num_classes(),
                });
            }
            if agg.modulate {
                let stats = feature_stream(sequence, &within_frame, agg)?;
                let (p, w) = modulate_statistics(params, &stats)?;
                (Some(p), w)
            } else {
                (Some(params.clone()), Vec::new())
            }
        }
    };
    let kernel = match &kernel_params {
        Some(p) => Kernel::Lam(p),
        None => Kernel::Uniform,
    };
    let refined = refine_sequence(sequence, &within_frame, agg, &kernel)?;
    let mut labels: Vec<PseudoLabelSet> = refined
        .iter()
        .map(PseudoLabelSet::from_prediction)
        .collect();
    apply_cbst(&mut labels, predictor.num_classes(), &config.cbst);
    Ok(Generation {
        within_frame,
        refined,
        labels,
        kernel_params,
        variance_warnings,
    })
}

/// Class-balanced selection across all scans at once.
pub fn apply_cbst(sets: &mut [PseudoLabelSet], classes: usize, config: &CbstConfig) {
    let labels: Vec<u32> = sets.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let conf: Vec<f64> = sets
        .iter()
        .flat_map(|s| s.confidence.iter().copied())
        .collect();
    let mask = cbst_select(&labels, &conf, classes, config);
    let mut offset = 0;
    for s in sets {
        s.selected = mask[offset..offset + s.len()].to_vec();
        offset += s.len();
    }
}

/// Builds LAM supervision from a labeled sequence and its within-frame
/// predictions: every `query_step`-th point of every frame becomes one
/// neighborhood.
pub fn training_set(
    sequence: &Sequence,
    within_frame: &[PredictionMatrix],
    truth: &[Vec<u32>],
    agg: &AggregationConfig,
    query_step: usize,
    ignore: Option<u32>,
) -> Result<TrainingSet, SelftrainError> {
    if truth.len() != sequence.len()
        || truth
            .iter()
            .zip(&sequence.scans)
            .any(|(t, s)| t.len() != s.len())
    {
        return Err(SelftrainError::LabelCount(truth.len()));
    }
    if within_frame.len() != sequence.len() {
        return Err(SelftrainError::PredictionRows {
            expected: sequence.len(),
            got: within_frame.len(),
        });
    }
    let classes = within_frame.first().map_or(1, |p| p.classes());
    let pairs = paired(sequence, within_frame);
    let step = query_step.max(1);
    let mut set = TrainingSet::new(classes);
    for t in 0..sequence.len() {
        let dense = build_dense_cloud(&pairs, &sequence.poses, t, agg.window, agg.stride)?;
        let index = SpatialIndex::build(&dense.points);
        let reference = &dense.points[dense.reference_points()];
        let picked: Vec<usize> = (0..reference.len()).step_by(step).collect();
        let queries: Vec<Point3> = picked.iter().map(|&q| reference[q]).collect();
        let sets = precompute_neighbors(&index, &queries, agg.k, agg.eps);
        let rows: Vec<f64> = picked
            .iter()
            .flat_map(|&q| within_frame[t].row(q).to_vec())
            .collect();
        let probs = PredictionMatrix::dense(classes, rows)?;
        let labels: Vec<u32> = picked.iter().map(|&q| truth[t][q]).collect();
        set.add_scan(&queries, &probs, &dense, &sets, &labels, ignore)?;
    }
    Ok(set)
}

/// [`training_set`] with the within-frame predictions of `predictor`
/// (intensities dropped, as for the first adaptation iteration).
pub fn source_training_set(
    sequence: &Sequence,
    truth: &[Vec<u32>],
    predictor: &dyn Predictor,
    config: &AdaptationConfig,
    query_step: usize,
    ignore: Option<u32>,
) -> Result<TrainingSet, SelftrainError> {
    let within_frame = within_frame_predictions(sequence, predictor, config, false)?;
    training_set(
        sequence,
        &within_frame,
        truth,
        &config.aggregation,
        query_step,
        ignore,
    )
}

/// Normalized kernel weights of every neighbor pair of every frame.
pub fn sequence_weights(
    sequence: &Sequence,
    within_frame: &[PredictionMatrix],
    agg: &AggregationConfig,
    kernel: &Kernel,
) -> Result<Vec<WeightSample>, SelftrainError> {
    let pairs = paired(sequence, within_frame);
    let mut out = Vec::new();
    for t in 0..sequence.len() {
        let (dense, sets) = frame_neighborhoods(&pairs, &sequence.poses, t, agg)?;
        let queries = &dense.points[dense.reference_points()];
        out.extend(neighbor_weights(
            queries,
            &within_frame[t],
            &dense,
            &sets,
            kernel,
        )?);
    }
    Ok(out)
}

/// Trains a student on the persisted pseudo labels. Returning `None` keeps
/// the current predictor for the next iteration.
pub trait StudentTrainer {
    fn train(
        &mut self,
        iteration: usize,
        sequence: &Sequence,
        labels: &[PseudoLabelSet],
        augmentation: &AugmentationSpec,
    ) -> Result<Option<Box<dyn Predictor>>, String>;
}

/// Label generation only.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopStudent;

impl StudentTrainer for NoopStudent {
    fn train(
        &mut self,
        _: usize,
        _: &Sequence,
        _: &[PseudoLabelSet],
        _: &AugmentationSpec,
    ) -> Result<Option<Box<dyn Predictor>>, String> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub intensity: bool,
    pub generation: Generation,
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub iterations: Vec<IterationRecord>,
    pub manifest: Manifest,
}

/// File name stem of frame `i`.
pub fn frame_stem(i: usize) -> String {
    format!("{i:06}")
}

/// Writes `labels/<frame>.label` and `masks/<frame>.mask` under `dir`.
pub fn persist_labels(dir: &Path, sets: &[PseudoLabelSet]) -> Result<(), SelftrainError> {
    for (i, s) in sets.iter().enumerate() {
        io::write_labels(
            &dir.join("labels").join(format!("{}.label", frame_stem(i))),
            &s.labels,
        )?;
        io::write_atomic(
            &dir.join("masks").join(format!("{}.mask", frame_stem(i))),
            &io::encode_mask(&s.selected),
        )?;
    }
    Ok(())
}

/// The iterative loop: label with the current predictor, persist, then let
/// the student trainer produce the next predictor.
pub fn run_adaptation(
    sequence: &Sequence,
    teacher: &dyn Predictor,
    student: &mut dyn StudentTrainer,
    lam: Option<&LamParams>,
    config: &AdaptationConfig,
    out_dir: Option<&Path>,
) -> Result<Adaptation, SelftrainError> {
    config.validate()?;
    let mut manifest = config.manifest();
    manifest.set("input.checksum", format!("{:016x}", sequence.checksum()));
    manifest.set("input.frames", sequence.len());
    if let Some(p) = lam {
        manifest.set(
            "lam.checksum",
            format!("{:016x}", io::checksum(&p.encode())),
        );
    }
    let mut current: Option<Box<dyn Predictor>> = None;
    let mut iterations = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let intensity = config.intensity_policy.uses_intensity(it);
        let predictor: &dyn Predictor = current.as_deref().unwrap_or(teacher);
        let generation = generate_pseudo_labels(sequence, predictor, lam, config, intensity)?;
        let mut iter_manifest = manifest.clone();
        iter_manifest.set("iteration", it);
        iter_manifest.set("iteration.intensity", intensity);
        let selected: usize = generation.labels.iter().map(|s| s.selected_count()).sum();
        iter_manifest.set("iteration.selected_points", selected);
        for w in &generation.variance_warnings {
            iter_manifest.set(format!("warning.variance_floor.{}", w.feature), w.observed);
        }
        if let Some(dir) = out_dir {
            let dir = dir.join(format!("iter_{it}"));
            persist_labels(&dir, &generation.labels)?;
            iter_manifest.write(&dir.join("manifest.txt"))?;
        }
        log::info!("iteration {it}: {selected} pseudo labels selected (intensity {intensity})");
        let next = student
            .train(it, sequence, &generation.labels, &config.augmentation)
            .map_err(|message| SelftrainError::Hook {
                iteration: it,
                message,
            })?;
        if next.is_some() {
            current = next;
        }
        iterations.push(IterationRecord {
            iteration: it,
            intensity,
            generation,
        });
        manifest = iter_manifest;
    }
    Ok(Adaptation {
        iterations,
        manifest,
    })
}
