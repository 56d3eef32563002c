//! Distribution of normalized kernel weights κ/Z over neighbor properties.

use rayon::prelude::*;

use crate::aggregate::{neighborhood_features, normalized_weights, AggregateError, Kernel};
use crate::geometry::Point3;
use crate::neighbors::{DenseCloud, NeighborSet};
use crate::subsample::PredictionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramSlice {
    /// Temporal offset normalized to [-1, 1].
    Temporal,
    SensorDistance,
    /// Distance between the query and its neighbor.
    CenterDistance,
}

impl HistogramSlice {
    pub const ALL: [HistogramSlice; 3] = [
        HistogramSlice::Temporal,
        HistogramSlice::SensorDistance,
        HistogramSlice::CenterDistance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            HistogramSlice::Temporal => "temporal",
            HistogramSlice::SensorDistance => "sensor_distance",
            HistogramSlice::CenterDistance => "center_distance",
        }
    }

    fn value(&self, s: &WeightSample) -> f64 {
        match self {
            HistogramSlice::Temporal => s.temporal,
            HistogramSlice::SensorDistance => s.sensor_distance,
            HistogramSlice::CenterDistance => s.center_distance,
        }
    }
}

/// One neighbor pair with its normalized weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSample {
    pub temporal: f64,
    pub sensor_distance: f64,
    pub center_distance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: u64,
    pub weight_sum: f64,
}

impl HistogramBin {
    pub fn weight_mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.weight_sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceHistogram {
    pub slice: HistogramSlice,
    pub bins: Vec<HistogramBin>,
}

impl SliceHistogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub slices: Vec<SliceHistogram>,
}

impl HistogramReport {
    pub fn slice(&self, slice: HistogramSlice) -> Option<&SliceHistogram> {
        self.slices.iter().find(|s| s.slice == slice)
    }

    /// CSV with header `slice,bin_left,bin_right,count,normalized_weight_mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slice,bin_left,bin_right,count,normalized_weight_mean\n");
        for h in &self.slices {
            for b in &h.bins {
                s.push_str(&format!(
                    "{},{:.6},{:.6},{},{:.9}\n",
                    h.slice.name(),
                    b.left,
                    b.right,
                    b.count,
                    b.weight_mean()
                ));
            }
        }
        s
    }
}

/// Normalized weights of every valid neighbor pair, in query order.
pub fn neighbor_weights(
    query_points: &[Point3],
    query_probs: &PredictionMatrix,
    dense: &DenseCloud,
    neighborhoods: &[NeighborSet],
    kernel: &Kernel,
) -> Result<Vec<WeightSample>, AggregateError> {
    if query_points.len() != neighborhoods.len() || query_probs.rows() != query_points.len() {
        return Err(AggregateError::Shape {
            queries: query_points.len(),
            neighborhoods: neighborhoods.len(),
        });
    }
    let per_query: Vec<Vec<WeightSample>> = (0..query_points.len())
        .into_par_iter()
        .map(|q| {
            let set = &neighborhoods[q];
            if set.valid_count == 0 {
                return Ok(Vec::new());
            }
            let features = neighborhood_features(&query_points[q], query_probs.row(q), dense, set);
            let weights = normalized_weights(&kernel.log_scores(&features)?);
            Ok(set
                .valid()
                .zip(weights)
                .map(|((j, d), weight)| WeightSample {
                    temporal: dense.normalized_offset(j as usize),
                    sensor_distance: dense.sensor_distance[j as usize],
                    center_distance: d,
                    weight,
                })
                .collect())
        })
        .collect::<Result<_, AggregateError>>()?;
    Ok(per_query.concat())
}

/// Bins the samples per slice. Temporal bins span [-1, 1]; the distance slices
/// span their observed range.
pub fn weight_histograms(
    samples: &[WeightSample],
    slices: &[HistogramSlice],
    bins: usize,
) -> HistogramReport {
    let bins = bins.max(1);
    let slices = slices
        .iter()
        .map(|&slice| {
            let (lo, hi) = match slice {
                HistogramSlice::Temporal => (-1.0, 1.0),
                _ => samples
                    .iter()
                    .map(|s| slice.value(s))
                    .fold(None, |acc: Option<(f64, f64)>, x| match acc {
                        None => Some((x, x)),
                        Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
                    })
                    .unwrap_or((0.0, 0.0)),
            };
            let width = (hi - lo) / bins as f64;
            let mut out: Vec<HistogramBin> = (0..bins)
                .map(|b| HistogramBin {
                    left: lo + b as f64 * width,
                    right: if b + 1 == bins {
                        hi
                    } else {
                        lo + (b + 1) as f64 * width
                    },
                    count: 0,
                    weight_sum: 0.0,
                })
                .collect();
            for s in samples {
                let x = slice.value(s);
                let b = if width > 0.0 {
                    (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1)
                } else {
                    0
                };
                out[b].count += 1;
                out[b].weight_sum += s.weight;
            }
            SliceHistogram { slice, bins: out }
        })
        .collect();
    HistogramReport { slices }
}
