//! Supervised training of the aggregation model on a labeled source domain.
//!
//! The loss is computed on refined labels, so gradients flow through the
//! softmax-weighted neighbor average into every neighbor's score.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::phi_into;
use crate::geometry::Point3;
use crate::neighbors::{DenseCloud, NeighborSet};
use crate::subsample::PredictionMatrix;

use super::loss::combined_with_grad;
use super::{
    FeatureStats, LamError, LamGrads, LamParams, LossMix, LossValue, Mode, DEFAULT_HIDDEN,
    VARIANCE_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Neighborhoods per optimizer step.
    pub batch: usize,
    pub loss_mix: LossMix,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 25,
            batch: 32,
            loss_mix: LossMix::default(),
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LamError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(LamError::Config("learning rate must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(LamError::Config("epochs and batch must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(LamError::Config("hidden widths must be >= 1".into()));
        }
        self.loss_mix.validate()
    }
}

/// Precomputed neighborhoods with their feature rows and ground truth.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    classes: usize,
    features: Vec<f64>,
    neighbor_probs: Vec<f64>,
    /// Row range of query `q` is `offsets[q]..offsets[q + 1]`.
    offsets: Vec<usize>,
    fallback: Vec<f64>,
    labels: Vec<u32>,
}

impl TrainingSet {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        super::feature_dim(self.classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.offsets[self.offsets.len() - 1]
    }

    /// Adds one neighborhood: `features` holds one Φ row per neighbor and
    /// `neighbor_probs` the matching label rows.
    pub fn push_query(
        &mut self,
        features: &[f64],
        neighbor_probs: &[f64],
        fallback: &[f64],
        label: u32,
    ) -> Result<(), LamError> {
        let (k, d) = (self.classes, self.feature_dim());
        if !features.len().is_multiple_of(d) {
            return Err(LamError::Dimension {
                expected: d,
                got: features.len() % d,
            });
        }
        let rows = features.len() / d;
        if neighbor_probs.len() != rows * k || fallback.len() != k {
            return Err(LamError::Dimension {
                expected: rows * k,
                got: neighbor_probs.len(),
            });
        }
        if label as usize >= k {
            return Err(LamError::Label { label, classes: k });
        }
        self.features.extend_from_slice(features);
        self.neighbor_probs.extend_from_slice(neighbor_probs);
        self.offsets.push(self.features.len() / d);
        self.fallback.extend_from_slice(fallback);
        self.labels.push(label);
        Ok(())
    }

    /// Adds every query whose truth is not `ignore`.
    pub fn add_scan(
        &mut self,
        query_points: &[Point3],
        query_probs: &PredictionMatrix,
        dense: &DenseCloud,
        neighborhoods: &[NeighborSet],
        truth: &[u32],
        ignore: Option<u32>,
    ) -> Result<(), LamError> {
        let k = self.classes;
        let d = self.feature_dim();
        if query_probs.classes() != k {
            return Err(LamError::Dimension {
                expected: k,
                got: query_probs.classes(),
            });
        }
        let n = query_points.len();
        if query_probs.rows() != n || neighborhoods.len() != n || truth.len() != n {
            return Err(LamError::Dimension {
                expected: n,
                got: truth.len().min(neighborhoods.len()),
            });
        }
        let mut row = vec![0.0; d];
        for q in 0..n {
            let y = truth[q];
            if Some(y) == ignore {
                continue;
            }
            if y as usize >= k {
                return Err(LamError::Label {
                    label: y,
                    classes: k,
                });
            }
            let v_p = query_probs.row(q);
            for (j, _) in neighborhoods[q].valid() {
                phi_into(&mut row, &query_points[q], v_p, dense, j as usize);
                self.features.extend_from_slice(&row);
                self.neighbor_probs
                    .extend_from_slice(dense.probs(j as usize));
            }
            self.offsets.push(self.features.len() / d);
            self.fallback.extend_from_slice(v_p);
            self.labels.push(y);
        }
        Ok(())
    }

    pub fn feature_stats(&self) -> FeatureStats {
        let mut stats = FeatureStats::new(self.feature_dim());
        for row in self.features.chunks_exact(self.feature_dim()) {
            stats.push(row);
        }
        stats
    }

    /// Feature rows of query `q`.
    pub fn features_of(&self, q: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.features[self.offsets[q] * d..self.offsets[q + 1] * d]
    }

    pub fn label(&self, q: usize) -> u32 {
        self.labels[q]
    }
}

/// Loss on the given queries and its gradient with respect to every trainable
/// tensor; the model runs in training mode.
pub fn batch_loss_and_grads(
    params: &mut LamParams,
    set: &TrainingSet,
    queries: &[usize],
    mix: &LossMix,
) -> Result<(LossValue, LamGrads), LamError> {
    let k = set.classes;
    let d = set.feature_dim();
    let mut spans = Vec::with_capacity(queries.len());
    let mut x = Vec::new();
    for &q in queries {
        let start = x.len() / d;
        x.extend_from_slice(set.features_of(q));
        spans.push(start..x.len() / d);
    }
    let n_rows = x.len() / d;
    let x = Array2::from_shape_vec((n_rows, d), x).expect("row-major features");

    let forward = if n_rows > 0 {
        Some(params.forward_train(x.view())?)
    } else {
        None
    };

    let mut refined = vec![0.0; queries.len() * k];
    let mut weights = vec![0.0; n_rows];
    for (b, (&q, span)) in queries.iter().zip(&spans).enumerate() {
        let out = &mut refined[b * k..(b + 1) * k];
        if span.is_empty() {
            out.copy_from_slice(&set.fallback[q * k..(q + 1) * k]);
            continue;
        }
        let scores = &forward.as_ref().unwrap().0;
        let rows = set.offsets[q]..set.offsets[q + 1];
        let max = span
            .clone()
            .map(|r| scores[r])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (r, dense_row) in span.clone().zip(rows.clone()) {
            let w = (scores[r] - max).exp();
            weights[r] = w;
            z += w;
            for (o, v) in out
                .iter_mut()
                .zip(&set.neighbor_probs[dense_row * k..(dense_row + 1) * k])
            {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= z);
        for r in span.clone() {
            weights[r] /= z;
        }
    }

    let labels: Vec<u32> = queries.iter().map(|&q| set.labels[q]).collect();
    let (value, d_refined) = combined_with_grad(&refined, &labels, k, mix)?;

    let Some((_, cache)) = forward else {
        return Ok((value, params.backward_zero()));
    };
    // d ṽ / d s_j = w_j (v_j - ṽ)
    let mut dscore = Array1::zeros(n_rows);
    for (b, (&q, span)) in queries.iter().zip(&spans).enumerate() {
        let g = &d_refined[b * k..(b + 1) * k];
        let g_dot_refined: f64 = g
            .iter()
            .zip(&refined[b * k..(b + 1) * k])
            .map(|(a, v)| a * v)
            .sum();
        for (r, dense_row) in span.clone().zip(set.offsets[q]..) {
            let v = &set.neighbor_probs[dense_row * k..(dense_row + 1) * k];
            let g_dot_v: f64 = g.iter().zip(v).map(|(a, v)| a * v).sum();
            dscore[r] = weights[r] * (g_dot_v - g_dot_refined);
        }
    }
    Ok((value, params.backward(&cache, &dscore)))
}

impl LamParams {
    fn backward_zero(&mut self) -> LamGrads {
        LamGrads {
            tensors: self
                .trainable_mut()
                .into_iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
        }
    }
}

/// Adam with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, params: &mut LamParams) -> Self {
        let shapes: Vec<usize> = params
            .trainable_mut()
            .iter()
            .map(|(_, t)| t.len())
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn update(&mut self, params: &mut LamParams, grads: &LamGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((_, p), g), (m, v)) in params
            .trainable_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_lovasz: f64,
    pub total: f64,
}

impl EpochLoss {
    /// CSV with header `epoch,mean_ce,mean_lovasz,total`.
    pub fn to_csv(trace: &[EpochLoss]) -> String {
        let mut s = String::from("epoch,mean_ce,mean_lovasz,total\n");
        for e in trace {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9}\n",
                e.epoch, e.mean_ce, e.mean_lovasz, e.total
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LamParams,
    pub trace: Vec<EpochLoss>,
}

/// Fits the standardization statistics to the training features, then runs
/// Adam over shuffled batches of neighborhoods. The returned model is in
/// eval mode.
pub fn train_lam(set: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome, LamError> {
    config.validate()?;
    if set.is_empty() {
        return Err(LamError::Empty);
    }
    let mut params = LamParams::init(set.classes, &config.hidden, config.seed);
    let stats = set.feature_stats();
    if stats.count() > 0 {
        params.std_mean = Array1::from(stats.mean().to_vec());
        params.std_var = Array1::from(stats.variance()).mapv(|v| v.max(VARIANCE_FLOOR));
    }
    train_from(params, set, config)
}

/// Continues training from existing parameters, keeping their statistics.
pub fn train_from(
    mut params: LamParams,
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<TrainOutcome, LamError> {
    config.validate()?;
    if params.feature_dim() != set.feature_dim() {
        return Err(LamError::Dimension {
            expected: params.feature_dim(),
            got: set.feature_dim(),
        });
    }
    params.mode = Mode::Train;
    let mut adam = Adam::new(config.learning_rate, &mut params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d1a3);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut lov, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch) {
            let (value, grads) = batch_loss_and_grads(&mut params, set, batch, &config.loss_mix)?;
            if !value.total.is_finite() || grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
                return Err(LamError::Diverged { step });
            }
            adam.update(&mut params, &grads);
            if !params.is_finite() {
                return Err(LamError::Diverged { step });
            }
            ce += value.ce;
            lov += value.lovasz;
            total += value.total;
            batches += 1;
            step += 1;
        }
        let b = batches as f64;
        log::debug!("epoch {epoch}: loss {:.6}", total / b);
        trace.push(EpochLoss {
            epoch,
            mean_ce: ce / b,
            mean_lovasz: lov / b,
            total: total / b,
        });
    }
    params.mode = Mode::Eval;
    Ok(TrainOutcome { params, trace })
}
