//! Cross-frame label refinement: every query point's label becomes the
//! kernel-weighted average of its neighbors' single-scan labels,
//! `ṽ(p) = Σ κ(p, p') v(p') / Σ κ(p, p')`.

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Point3;
pub use crate::lam::feature_dim;
use crate::lam::{LamError, LamParams, Mode};
use crate::neighbors::{DenseCloud, NeighborSet};
use crate::subsample::{PredictionMatrix, SubsampleError};

/// Feature vector layout version (`[distance, v(p), v(p'), offset / T,
/// sensor distance of p']`).
pub const PHI_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("non-finite feature at index {0}")]
    NonFinite(usize),
    #[error("{queries} queries but {neighborhoods} neighborhoods")]
    Shape {
        queries: usize,
        neighborhoods: usize,
    },
    #[error("class count mismatch: labels have {labels}, dense cloud has {dense}")]
    ClassMismatch { labels: usize, dense: usize },
    #[error("kernel model must be in eval mode")]
    TrainMode,
    #[error(transparent)]
    Lam(#[from] LamError),
    #[error(transparent)]
    Subsample(#[from] SubsampleError),
}

/// Writes Φ(p, p') for dense point `j` into `out` (length `2K + 3`).
pub fn phi_into(out: &mut [f64], p: &Point3, v_p: &[f64], dense: &DenseCloud, j: usize) {
    let k = v_p.len();
    out[0] = (p - dense.points[j]).norm();
    out[1..1 + k].copy_from_slice(v_p);
    out[1 + k..1 + 2 * k].copy_from_slice(dense.probs(j));
    out[1 + 2 * k] = dense.normalized_offset(j);
    out[2 + 2 * k] = dense.sensor_distance[j];
}

pub fn phi(p: &Point3, v_p: &[f64], dense: &DenseCloud, j: usize) -> Vec<f64> {
    let mut out = vec![0.0; feature_dim(v_p.len())];
    phi_into(&mut out, p, v_p, dense, j);
    out
}

/// Φ rows of all valid neighbors of one query, in neighbor order.
pub fn neighborhood_features(
    p: &Point3,
    v_p: &[f64],
    dense: &DenseCloud,
    set: &NeighborSet,
) -> Array2<f64> {
    let d = feature_dim(v_p.len());
    let mut rows = Array2::zeros((set.valid_count, d));
    for (r, (j, _)) in set.valid().enumerate() {
        phi_into(
            rows.row_mut(r).into_slice().unwrap(),
            p,
            v_p,
            dense,
            j as usize,
        );
    }
    rows
}

#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    /// Constant score: plain k-NN averaging.
    Uniform,
    /// `κ = exp(g(Φ))` with an eval-mode model.
    Lam(&'a LamParams),
}

impl Kernel<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Uniform => "uniform",
            Kernel::Lam(_) => "lam",
        }
    }

    /// Log-scores `g(Φ)` for a batch of feature rows.
    pub fn log_scores(&self, features: &Array2<f64>) -> Result<Vec<f64>, AggregateError> {
        match self {
            Kernel::Uniform => {
                if let Some(i) = features.iter().position(|v| !v.is_finite()) {
                    return Err(AggregateError::NonFinite(i % features.ncols().max(1)));
                }
                Ok(vec![0.0; features.nrows()])
            }
            Kernel::Lam(params) => {
                if params.mode != Mode::Eval {
                    return Err(AggregateError::TrainMode);
                }
                Ok(params.forward_eval(features.view())?.to_vec())
            }
        }
    }
}

/// Strictly positive score of one feature vector.
pub fn kernel_score(kernel: &Kernel, f: &[f64]) -> Result<f64, AggregateError> {
    if let Some(i) = f.iter().position(|v| !v.is_finite()) {
        return Err(AggregateError::NonFinite(i));
    }
    let row = Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("one row");
    Ok(kernel.log_scores(&row)?[0].exp())
}

/// Normalized weights `κ_j / Σ κ` from log-scores, shifted by their maximum
/// before exponentiation.
pub fn normalized_weights(log_scores: &[f64]) -> Vec<f64> {
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Refined label of one query.
pub fn refine_one(
    p: &Point3,
    v_p: &[f64],
    dense: &DenseCloud,
    set: &NeighborSet,
    kernel: &Kernel,
) -> Result<Vec<f64>, AggregateError> {
    let k = v_p.len();
    if set.valid_count == 0 {
        return Ok(v_p.to_vec());
    }
    let mut out = vec![0.0; k];
    match kernel {
        Kernel::Uniform => {
            for (j, _) in set.valid() {
                for (o, v) in out.iter_mut().zip(dense.probs(j as usize)) {
                    *o += v;
                }
            }
            let m = set.valid_count as f64;
            out.iter_mut().for_each(|o| *o /= m);
        }
        Kernel::Lam(_) => {
            let features = neighborhood_features(p, v_p, dense, set);
            let scores = kernel.log_scores(&features)?;
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ((j, _), s) in set.valid().zip(&scores) {
                let w = (s - max).exp();
                z += w;
                for (o, v) in out.iter_mut().zip(dense.probs(j as usize)) {
                    *o += w * v;
                }
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
    }
    Ok(out)
}

/// Refines the labels of every query point. `query_probs` rows are in query
/// order; the output is too.
pub fn refine_labels(
    query_points: &[Point3],
    query_probs: &PredictionMatrix,
    dense: &DenseCloud,
    neighborhoods: &[NeighborSet],
    kernel: &Kernel,
) -> Result<PredictionMatrix, AggregateError> {
    if query_points.len() != neighborhoods.len() || query_probs.rows() != query_points.len() {
        return Err(AggregateError::Shape {
            queries: query_points.len(),
            neighborhoods: neighborhoods.len(),
        });
    }
    let k = query_probs.classes();
    if !dense.is_empty() && dense.classes() != k {
        return Err(AggregateError::ClassMismatch {
            labels: k,
            dense: dense.classes(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..query_points.len())
        .into_par_iter()
        .map(|i| {
            refine_one(
                &query_points[i],
                query_probs.row(i),
                dense,
                &neighborhoods[i],
                kernel,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(PredictionMatrix::dense(k, rows.concat())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointCloud, RigidTransform};
    use crate::neighbors::{build_dense_cloud, knn_epsilon, SpatialIndex};
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_from(points: Vec<Point3>, probs: Vec<f64>, k: usize) -> DenseCloud {
        let cloud = PointCloud::from_points(points).unwrap();
        let pred = PredictionMatrix::dense(k, probs).unwrap();
        build_dense_cloud(&[(cloud, pred)], &[RigidTransform::identity()], 0, 0, 1).unwrap()
    }

    #[test]
    fn phi_layout() {
        let dense = dense_from(vec![Point3::new(3.0, 4.0, 0.0)], vec![0.25, 0.75], 2);
        let p = Point3::new(3.0, 4.0, 0.0);
        let f = phi(&p, &[0.25, 0.75], &dense, 0);
        assert_eq!(f, vec![0.0, 0.25, 0.75, 0.25, 0.75, 0.0, 5.0]);
        assert_eq!(feature_dim(2), 7);
    }

    #[test]
    fn offset_at_window_edge_normalizes_to_one() {
        let scans: Vec<_> = (0..3)
            .map(|f| {
                (
                    PointCloud::new(vec![Point3::x()], None, f).unwrap(),
                    PredictionMatrix::one_hot(2, &[0]).unwrap(),
                )
            })
            .collect();
        let dense = build_dense_cloud(&scans, &[RigidTransform::identity(); 3], 1, 1, 1).unwrap();
        assert_eq!(dense.normalized_offset(2), 1.0);
        assert_eq!(dense.normalized_offset(0), -1.0);
        let f = phi(&Point3::x(), &[1.0, 0.0], &dense, 2);
        assert_eq!(f[5], 1.0);
    }

    #[test]
    fn uniform_score_is_one_and_zero_lam_scores_one() {
        assert_eq!(kernel_score(&Kernel::Uniform, &[1.0; 7]).unwrap(), 1.0);
        let zero = LamParams::zeros(2, &[4, 4, 4]);
        assert_eq!(kernel_score(&Kernel::Lam(&zero), &[0.3; 7]).unwrap(), 1.0);
        assert!(matches!(
            kernel_score(&Kernel::Uniform, &[f64::NAN; 7]),
            Err(AggregateError::NonFinite(0))
        ));
    }

    #[test]
    fn train_mode_model_is_rejected() {
        let mut p = LamParams::init(2, &[4, 4, 4], 1);
        p.mode = Mode::Train;
        assert_eq!(
            kernel_score(&Kernel::Lam(&p), &[0.0; 7]),
            Err(AggregateError::TrainMode)
        );
    }

    /// Eval-mode forward evaluated one scalar at a time.
    fn scalar_forward(p: &LamParams, f: &[f64]) -> f64 {
        let mut h: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, x)| (x - p.std_mean[i]) / p.std_var[i].sqrt())
            .collect();
        for l in &p.hidden {
            let mut next = Vec::new();
            for o in 0..l.weight.nrows() {
                let mut a = 0.0;
                for i in 0..h.len() {
                    a += l.weight[(o, i)] * h[i];
                }
                let y = l.gamma[o] * (a - l.running_mean[o])
                    / (l.running_var[o] + crate::lam::BN_EPS).sqrt()
                    + l.beta[o];
                next.push(if y > 0.0 { y } else { 0.0 });
            }
            h = next;
        }
        h.iter()
            .zip(p.head_weight.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + p.head_bias
    }

    #[test]
    fn lam_score_matches_scalar_forward() {
        let mut p = LamParams::init(2, &[3, 3, 3], 9);
        p.std_mean = Array1::from(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.0, 10.0]);
        p.std_var = Array1::from(vec![1.5, 0.5, 0.25, 2.0, 1.0, 0.3, 25.0]);
        for l in &mut p.hidden {
            l.running_mean
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.1 * i as f64);
            l.running_var
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.5 + i as f64);
            l.beta.fill(0.2);
        }
        p.head_bias = -0.4;
        let f = [0.07, 0.9, 0.1, 0.3, 0.7, -0.5, 12.0];
        let got = kernel_score(&Kernel::Lam(&p), &f).unwrap();
        assert!((got - scalar_forward(&p, &f).exp()).abs() < 1e-6);
    }

    #[test]
    fn uniform_kernel_averages_one_hot_neighbors() {
        let dense = dense_from(
            vec![Point3::new(1.0, 0.0, 0.0), Point3::new(1.1, 0.0, 0.0)],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        );
        let index = SpatialIndex::build(&dense.points);
        let q = Point3::new(1.05, 0.0, 0.0);
        let set = knn_epsilon(&index, &q, 4, None);
        let out = refine_one(&q, &[0.9, 0.1], &dense, &set, &Kernel::Uniform).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_neighborhood_falls_back() {
        let dense = dense_from(vec![Point3::new(9.0, 0.0, 0.0)], vec![1.0, 0.0], 2);
        let index = SpatialIndex::build(&dense.points);
        let set = knn_epsilon(&index, &Point3::zeros(), 4, Some(0.2));
        let out = refine_one(
            &Point3::zeros(),
            &[0.3, 0.7],
            &dense,
            &set,
            &Kernel::Uniform,
        )
        .unwrap();
        assert_eq!(out, vec![0.3, 0.7]);
    }

    fn random_setup(
        seed: u64,
        n: usize,
        k: usize,
    ) -> (DenseCloud, Vec<Point3>, PredictionMatrix, Vec<NeighborSet>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let mut probs = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
            let s: f64 = row.iter().sum();
            probs.extend(row.iter().map(|v| v / s));
        }
        let dense = dense_from(pts.clone(), probs.clone(), k);
        let index = SpatialIndex::build(&dense.points);
        let sets: Vec<_> = pts
            .iter()
            .map(|q| knn_epsilon(&index, q, 12, Some(1.0)))
            .collect();
        (dense, pts, PredictionMatrix::dense(k, probs).unwrap(), sets)
    }

    #[test]
    fn lam_refinement_matches_brute_force() {
        let (dense, pts, probs, sets) = random_setup(3, 200, 3);
        let model = LamParams::init(3, &[8, 8, 8], 5);
        let out = refine_labels(&pts, &probs, &dense, &sets, &Kernel::Lam(&model)).unwrap();
        for (i, set) in sets.iter().enumerate() {
            let mut num = [0.0; 3];
            let mut z = 0.0;
            for (j, _) in set.valid() {
                let f = phi(&pts[i], probs.row(i), &dense, j as usize);
                let w = scalar_forward(&model, &f).exp();
                z += w;
                for c in 0..3 {
                    num[c] += w * dense.probs(j as usize)[c];
                }
            }
            for c in 0..3 {
                let want = if set.valid_count == 0 {
                    probs.row(i)[c]
                } else {
                    num[c] / z
                };
                assert!((out.row(i)[c] - want).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn head_bias_shift_leaves_refined_labels_unchanged(seed in any::<u64>(), shift in -20.0..20.0f64) {
            let (dense, pts, probs, sets) = random_setup(seed, 40, 2);
            let model = LamParams::init(2, &[4, 4, 4], seed);
            let mut shifted = model.clone();
            shifted.head_bias += shift;
            let a = refine_labels(&pts, &probs, &dense, &sets, &Kernel::Lam(&model)).unwrap();
            let b = refine_labels(&pts, &probs, &dense, &sets, &Kernel::Lam(&shifted)).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for i in 0..a.rows() {
                prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn neighbor_order_does_not_matter(seed in any::<u64>()) {
            let (dense, pts, probs, mut sets) = random_setup(seed, 40, 3);
            let model = LamParams::init(3, &[4, 4, 4], 2);
            let a = refine_labels(&pts, &probs, &dense, &sets, &Kernel::Lam(&model)).unwrap();
            for s in &mut sets {
                s.indices[..s.valid_count].reverse();
                s.distances[..s.valid_count].reverse();
            }
            let b = refine_labels(&pts, &probs, &dense, &sets, &Kernel::Lam(&model)).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn identical_neighbor_labels_are_a_fixed_point(seed in any::<u64>(), a in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..30).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
            let probs: Vec<f64> = (0..30).flat_map(|_| [a, 1.0 - a]).collect();
            let dense = dense_from(pts.clone(), probs.clone(), 2);
            let index = SpatialIndex::build(&dense.points);
            let sets: Vec<_> = pts.iter().map(|q| knn_epsilon(&index, q, 8, None)).collect();
            let pm = PredictionMatrix::dense(2, probs).unwrap();
            let out = refine_labels(&pts, &pm, &dense, &sets, &Kernel::Uniform).unwrap();
            for i in 0..30 {
                prop_assert!((out.row(i)[0] - a).abs() < 1e-12);
            }
        }
    }
}
