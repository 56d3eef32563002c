//! Learned Aggregation Model: a small MLP that scores each neighbor pair.
//!
//! Layout: input standardization with frozen statistics, then three
//! `dense -> batch-norm -> ReLU` blocks (32, 64, 128 channels by default) and
//! a dense head producing one scalar. Dense layers inside the blocks carry no
//! bias since batch-norm's shift subsumes it.
//!
//! Gradients are derived by hand for this fixed architecture; see
//! [`LamParams::backward`].

mod analysis;
mod loss;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use analysis::{
    neighbor_weights, weight_histograms, HistogramBin, HistogramReport, HistogramSlice,
    SliceHistogram, WeightSample,
};
pub use loss::{
    cross_entropy, cross_entropy_with_grad, lam_loss, lovasz_softmax, lovasz_softmax_with_grad,
    LossMix, LossValue,
};
pub use train::{
    batch_loss_and_grads, train_from, train_lam, EpochLoss, TrainConfig, TrainOutcome, TrainingSet,
};

use crate::io::{self, ByteReader, FormatError};

/// Batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Floor applied to standardization variances.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Version of the checkpoint layout and of the feature vector order it expects.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LamError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite input at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("all points are ignored")]
    AllIgnored,
    #[error("empty input")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: u32, classes: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty statistics stream")]
    EmptyStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One `dense -> batch-norm -> ReLU` block.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl HiddenLayer {
    pub fn width(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LamParams {
    pub classes: usize,
    pub std_mean: Array1<f64>,
    pub std_var: Array1<f64>,
    pub hidden: Vec<HiddenLayer>,
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
    pub mode: Mode,
}

/// Per-layer values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    pre_relu: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    last_hidden: Array2<f64>,
}

/// Gradients in the order of [`LamParams::trainable_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct LamGrads {
    pub tensors: Vec<Vec<f64>>,
}

pub const DEFAULT_HIDDEN: [usize; 3] = [32, 64, 128];

/// Feature-vector length for `classes` classes.
pub fn feature_dim(classes: usize) -> usize {
    2 * classes + 3
}

impl LamParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, identity batch-norm.
    pub fn init(classes: usize, hidden: &[usize], seed: u64) -> Self {
        let d = feature_dim(classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = d;
        let mut layers = Vec::with_capacity(hidden.len());
        for &width in hidden {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((width, fan_in), |_| rng.random_range(-bound..bound));
            layers.push(HiddenLayer {
                weight,
                gamma: Array1::ones(width),
                beta: Array1::zeros(width),
                running_mean: Array1::zeros(width),
                running_var: Array1::ones(width),
            });
            fan_in = width;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let head_weight = Array1::from_shape_fn(fan_in, |_| rng.random_range(-bound..bound));
        LamParams {
            classes,
            std_mean: Array1::zeros(d),
            std_var: Array1::ones(d),
            hidden: layers,
            head_weight,
            head_bias: 0.0,
            mode: Mode::Eval,
        }
    }

    /// Every trainable weight set to zero; scores are zero for any input.
    pub fn zeros(classes: usize, hidden: &[usize]) -> Self {
        let mut p = Self::init(classes, hidden, 0);
        for (_, t) in p.trainable_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.std_mean.len()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = self
            .std_mean
            .iter()
            .chain(self.std_var.iter())
            .all(|v| v.is_finite())
            && self.head_weight.iter().all(|v| v.is_finite())
            && self.head_bias.is_finite();
        for l in &self.hidden {
            ok &= l
                .weight
                .iter()
                .chain(l.gamma.iter())
                .chain(l.beta.iter())
                .chain(l.running_mean.iter())
                .chain(l.running_var.iter())
                .all(|v| v.is_finite());
        }
        ok
    }

    /// Mutable views of the trainable tensors, in a fixed order: per hidden
    /// layer weight, gamma, beta; then head weight and head bias.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            out.push((
                format!("hidden.{l}.weight"),
                layer.weight.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("hidden.{l}.gamma"),
                layer.gamma.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("hidden.{l}.beta"),
                layer.beta.as_slice_mut().unwrap(),
            ));
        }
        out.push((
            "head.weight".into(),
            self.head_weight.as_slice_mut().unwrap(),
        ));
        out.push((
            "head.bias".into(),
            std::slice::from_mut(&mut self.head_bias),
        ));
        out
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), LamError> {
        if x.ncols() != self.feature_dim() {
            return Err(LamError::Dimension {
                expected: self.feature_dim(),
                got: x.ncols(),
            });
        }
        if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(LamError::NonFinite { row, col });
        }
        Ok(())
    }

    fn standardize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let inv: Array1<f64> = self.std_var.mapv(|v| 1.0 / v.sqrt());
        let mut z = x.to_owned();
        z -= &self.std_mean;
        z *= &inv;
        z
    }

    /// Scores using running batch-norm statistics. Rows are independent.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<Array1<f64>, LamError> {
        self.check_input(&x)?;
        let mut h = self.standardize(&x);
        for layer in &self.hidden {
            let mut a = h.dot(&layer.weight.t());
            let scale: Array1<f64> = Zip::from(&layer.gamma)
                .and(&layer.running_var)
                .map_collect(|g, v| g / (v + BN_EPS).sqrt());
            let shift: Array1<f64> = Zip::from(&layer.beta)
                .and(&layer.running_mean)
                .and(&scale)
                .map_collect(|b, m, s| b - m * s);
            a *= &scale;
            a += &shift;
            a.mapv_inplace(|v| v.max(0.0));
            h = a;
        }
        Ok(h.dot(&self.head_weight) + self.head_bias)
    }

    /// Scores using batch statistics; running statistics are updated with
    /// momentum [`BN_MOMENTUM`].
    pub fn forward_train(
        &mut self,
        x: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, ForwardCache), LamError> {
        self.check_input(&x)?;
        let n = x.nrows();
        if n == 0 {
            return Err(LamError::Empty);
        }
        let mut h = self.standardize(&x);
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &mut self.hidden {
            let a = h.dot(&layer.weight.t());
            let mean = a.mean_axis(Axis(0)).unwrap();
            let centered = &a - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = &centered * &inv_std;
            let pre_relu = &xhat * &layer.gamma + &layer.beta;
            let out = pre_relu.mapv(|v| v.max(0.0));

            let unbiased = if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            };
            layer.running_mean = &layer.running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
            layer.running_var =
                &layer.running_var * (1.0 - BN_MOMENTUM) + &var * (BN_MOMENTUM * unbiased);

            caches.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                xhat,
                pre_relu,
                inv_std,
            });
        }
        let scores = h.dot(&self.head_weight) + self.head_bias;
        Ok((
            scores,
            ForwardCache {
                layers: caches,
                last_hidden: h,
            },
        ))
    }

    /// Forward pass in the current [`Mode`].
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Array1<f64>, LamError> {
        match self.mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => self.forward_train(x).map(|(s, _)| s),
        }
    }

    /// Gradients of a scalar loss given `d loss / d score` for every row of
    /// the training-mode forward pass that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, dscore: &Array1<f64>) -> LamGrads {
        let n = dscore.len() as f64;
        let d_head_w = cache.last_hidden.t().dot(dscore);
        let d_head_b = dscore.sum();
        let mut dh = outer(dscore, &self.head_weight);

        let mut per_layer = Vec::with_capacity(self.hidden.len());
        for (layer, c) in self.hidden.iter().zip(&cache.layers).rev() {
            let mut dy = dh;
            Zip::from(&mut dy).and(&c.pre_relu).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
            let d_gamma = (&dy * &c.xhat).sum_axis(Axis(0));
            let d_beta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &layer.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
            // d a = inv_std / n * (n dxhat - sum(dxhat) - xhat * sum(dxhat xhat))
            let mut da = &dxhat * n - &sum_dxhat;
            da -= &(&c.xhat * &sum_dxhat_xhat);
            da *= &(&c.inv_std / n);
            let d_weight = da.t().dot(&c.input);
            dh = da.dot(&layer.weight);
            per_layer.push((d_weight, d_gamma, d_beta));
        }
        per_layer.reverse();

        let mut tensors = Vec::with_capacity(3 * per_layer.len() + 2);
        for (w, g, b) in per_layer {
            tensors.push(w.iter().copied().collect());
            tensors.push(g.to_vec());
            tensors.push(b.to_vec());
        }
        tensors.push(d_head_w.to_vec());
        tensors.push(vec![d_head_b]);
        LamGrads { tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        let mut put = |name: &str, dims: &[usize], values: &[f64]| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(
            "std_mean",
            &[self.feature_dim()],
            self.std_mean.as_slice().unwrap(),
        );
        put(
            "std_var",
            &[self.feature_dim()],
            self.std_var.as_slice().unwrap(),
        );
        for (l, layer) in self.hidden.iter().enumerate() {
            let w = layer.weight.as_slice().unwrap();
            put(
                &format!("hidden.{l}.weight"),
                &[layer.weight.nrows(), layer.weight.ncols()],
                w,
            );
            let width = [layer.width()];
            put(
                &format!("hidden.{l}.gamma"),
                &width,
                layer.gamma.as_slice().unwrap(),
            );
            put(
                &format!("hidden.{l}.beta"),
                &width,
                layer.beta.as_slice().unwrap(),
            );
            put(
                &format!("hidden.{l}.running_mean"),
                &width,
                layer.running_mean.as_slice().unwrap(),
            );
            put(
                &format!("hidden.{l}.running_var"),
                &width,
                layer.running_var.as_slice().unwrap(),
            );
        }
        put(
            "head.weight",
            &[self.head_weight.len()],
            self.head_weight.as_slice().unwrap(),
        );
        put("head.bias", &[1], &[self.head_bias]);
        out
    }

    /// Loads a checkpoint in eval mode.
    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let d = r.u32()? as usize;
        let classes = r.u32()? as usize;
        if d != feature_dim(classes) {
            return Err(r.error(format!(
                "feature dimension {d} does not match {classes} classes"
            )));
        }
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>, usize)> = Vec::new();
        while r.remaining() > 0 {
            let at = r.offset();
            let len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| FormatError::Malformed {
                    offset: at,
                    message: "tensor name is not UTF-8".into(),
                })?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = dims.iter().product();
            if count.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(r.error(format!("tensor {name} extends past end of file")));
            }
            let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            tensors.push((name, dims, values, at));
        }
        let end = r.offset();
        type Tensors = Vec<(String, Vec<usize>, Vec<f64>, usize)>;
        let take =
            |tensors: &mut Tensors,
             name: &str,
             rank: usize|
             -> Result<(Vec<usize>, Vec<f64>), FormatError> {
                let pos = tensors.iter().position(|t| t.0 == name).ok_or_else(|| {
                    FormatError::Malformed {
                        offset: end,
                        message: format!("missing tensor {name}"),
                    }
                })?;
                let (_, dims, values, at) = tensors.remove(pos);
                if dims.len() != rank {
                    return Err(FormatError::Malformed {
                        offset: at,
                        message: format!("tensor {name} has rank {}", dims.len()),
                    });
                }
                Ok((dims, values))
            };
        let vec_of = |dims: &[usize], values: Vec<f64>, want: usize, name: &str| {
            if dims[0] != want {
                return Err(FormatError::Malformed {
                    offset: end,
                    message: format!("tensor {name} has length {}, expected {want}", dims[0]),
                });
            }
            Ok(Array1::from(values))
        };
        let (dims, v) = take(&mut tensors, "std_mean", 1)?;
        let std_mean = vec_of(&dims, v, d, "std_mean")?;
        let (dims, v) = take(&mut tensors, "std_var", 1)?;
        let std_var = vec_of(&dims, v, d, "std_var")?;
        let mut hidden = Vec::new();
        let mut fan_in = d;
        while tensors
            .iter()
            .any(|t| t.0 == format!("hidden.{}.weight", hidden.len()))
        {
            let l = hidden.len();
            let (dims, v) = take(&mut tensors, &format!("hidden.{l}.weight"), 2)?;
            if dims[1] != fan_in {
                return Err(FormatError::Malformed {
                    offset: end,
                    message: format!(
                        "hidden.{l}.weight has {} inputs, expected {fan_in}",
                        dims[1]
                    ),
                });
            }
            let width = dims[0];
            let weight = Array2::from_shape_vec((width, fan_in), v).unwrap();
            let mut field = |suffix: &str| -> Result<Array1<f64>, FormatError> {
                let name = format!("hidden.{l}.{suffix}");
                let (dims, v) = take(&mut tensors, &name, 1)?;
                vec_of(&dims, v, width, &name)
            };
            hidden.push(HiddenLayer {
                weight,
                gamma: field("gamma")?,
                beta: field("beta")?,
                running_mean: field("running_mean")?,
                running_var: field("running_var")?,
            });
            fan_in = width;
        }
        let (dims, v) = take(&mut tensors, "head.weight", 1)?;
        let head_weight = vec_of(&dims, v, fan_in, "head.weight")?;
        let (dims, v) = take(&mut tensors, "head.bias", 1)?;
        let head_bias = vec_of(&dims, v, 1, "head.bias")?[0];
        if let Some(extra) = tensors.first() {
            return Err(FormatError::Malformed {
                offset: extra.3,
                message: format!("unexpected tensor {}", extra.0),
            });
        }
        let params = LamParams {
            classes,
            std_mean,
            std_var,
            hidden,
            head_weight,
            head_bias,
            mode: Mode::Eval,
        };
        if !params.is_finite() || params.std_var.iter().any(|&v| v <= 0.0) {
            return Err(FormatError::Malformed {
                offset: 16,
                message: "checkpoint holds non-finite or non-positive statistics".into(),
            });
        }
        Ok(params)
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&io::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        io::write_atomic(path, &self.encode())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LAMW";

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Running per-feature mean and variance (Welford).
#[derive(Debug, Clone)]
pub struct FeatureStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(row) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn push_rows(&mut self, rows: ArrayView2<f64>) {
        for row in rows.rows() {
            self.push(row.as_slice().expect("row-major rows"));
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| s / n).collect()
    }
}

/// Feature whose variance was raised to [`VARIANCE_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceWarning {
    pub feature: usize,
    pub observed: f64,
}

/// Replaces the standardization statistics with those of a target-domain
/// feature stream. Nothing else changes.
pub fn modulate_statistics(
    params: &LamParams,
    stats: &FeatureStats,
) -> Result<(LamParams, Vec<VarianceWarning>), LamError> {
    if stats.count() == 0 {
        return Err(LamError::EmptyStream);
    }
    if stats.mean().len() != params.feature_dim() {
        return Err(LamError::Dimension {
            expected: params.feature_dim(),
            got: stats.mean().len(),
        });
    }
    let mut warnings = Vec::new();
    let var: Vec<f64> = stats
        .variance()
        .into_iter()
        .enumerate()
        .map(|(feature, v)| {
            if v < VARIANCE_FLOOR {
                warnings.push(VarianceWarning {
                    feature,
                    observed: v,
                });
                VARIANCE_FLOOR
            } else {
                v
            }
        })
        .collect();
    for w in &warnings {
        log::warn!(
            "feature {} has variance {:e}; floored at {VARIANCE_FLOOR:e}",
            w.feature,
            w.observed
        );
    }
    let mut out = params.clone();
    out.std_mean = Array1::from(stats.mean().to_vec());
    out.std_var = Array1::from(var);
    Ok((out, warnings))
}
