//! Pose-aligned multi-scan aggregation and fixed-size k-NN / ε-ball
//! neighborhoods over the aggregated cloud.

mod kdtree;

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

pub use kdtree::KdTree;

use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::io::{self, ByteReader, FormatError};
use crate::subsample::{PredictionMatrix, SubsampleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeighborError {
    #[error("no pose for frame {0}")]
    MissingPose(usize),
    #[error("reference frame {frame} outside a sequence of {len} scans")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error("prediction for frame {frame} has {rows} rows for {points} points")]
    PredictionShape {
        frame: usize,
        rows: usize,
        points: usize,
    },
    #[error("frames disagree on class count ({0} vs {1})")]
    ClassMismatch(usize, usize),
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error(transparent)]
    Subsample(#[from] SubsampleError),
}

/// Union of pose-aligned scans expressed in the frame of the reference scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCloud {
    pub points: Vec<Point3>,
    classes: usize,
    probs: Vec<f64>,
    /// `i - t` in frames.
    pub temporal_offset: Vec<i32>,
    /// Range of each point to its own sensor origin, measured before alignment.
    pub sensor_distance: Vec<f64>,
    pub source_frame: Vec<u32>,
    /// Half-width `T` of the temporal window.
    pub window: u32,
    pub reference_frame: u32,
    reference: Range<usize>,
}

impl DenseCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Dense-cloud indices holding the reference scan's own points, in scan order.
    pub fn reference_points(&self) -> Range<usize> {
        self.reference.clone()
    }

    /// Temporal offset scaled by the window into `[-1, 1]`; zero when `T = 0`.
    pub fn normalized_offset(&self, i: usize) -> f64 {
        if self.window == 0 {
            0.0
        } else {
            self.temporal_offset[i] as f64 / self.window as f64
        }
    }
}

/// Frames `t + j * stride` with `|j * stride| <= window`, clipped to the sequence.
pub fn window_frames(t: usize, window: u32, stride: u32, len: usize) -> Vec<usize> {
    let (t, w, s) = (t as i64, window as i64, stride.max(1) as i64);
    let reach = w / s;
    (-reach..=reach)
        .map(|j| t + j * s)
        .filter(|&i| i >= 0 && (i as usize) < len)
        .map(|i| i as usize)
        .collect()
}

/// Aggregates the scans of the window around frame `t` into frame `t`.
/// `poses[i]` maps scan `i` into a common global frame.
pub fn build_dense_cloud(
    scans: &[(PointCloud, PredictionMatrix)],
    poses: &[RigidTransform],
    t: usize,
    window: u32,
    stride: u32,
) -> Result<DenseCloud, NeighborError> {
    if stride == 0 {
        return Err(NeighborError::ZeroStride);
    }
    if t >= scans.len() {
        return Err(NeighborError::FrameOutOfRange {
            frame: t,
            len: scans.len(),
        });
    }
    let frames = window_frames(t, window, stride, scans.len());
    if let Some(&missing) = frames.iter().find(|&&i| i >= poses.len()) {
        return Err(NeighborError::MissingPose(missing));
    }
    let classes = scans[t].1.classes();
    let world_to_ref = poses[t].inverse();
    let total: usize = frames.iter().map(|&i| scans[i].0.len()).sum();

    let mut dense = DenseCloud {
        points: Vec::with_capacity(total),
        classes,
        probs: Vec::with_capacity(total * classes),
        temporal_offset: Vec::with_capacity(total),
        sensor_distance: Vec::with_capacity(total),
        source_frame: Vec::with_capacity(total),
        window,
        reference_frame: t as u32,
        reference: 0..0,
    };
    for &i in &frames {
        let (cloud, pred) = &scans[i];
        if pred.classes() != classes {
            return Err(NeighborError::ClassMismatch(classes, pred.classes()));
        }
        if pred.rows() != cloud.len() {
            return Err(NeighborError::PredictionShape {
                frame: i,
                rows: pred.rows(),
                points: cloud.len(),
            });
        }
        let pred = pred.to_parent_order(cloud.len())?;
        let align = world_to_ref.compose(&poses[i]);
        let start = dense.points.len();
        for p in cloud.points() {
            dense.sensor_distance.push(p.norm());
            dense.points.push(align.apply_point(p));
        }
        dense.probs.extend_from_slice(pred.probs());
        dense
            .temporal_offset
            .extend(std::iter::repeat_n(i as i32 - t as i32, cloud.len()));
        dense
            .source_frame
            .extend(std::iter::repeat_n(i as u32, cloud.len()));
        if i == t {
            dense.reference = start..dense.points.len();
        }
    }
    Ok(dense)
}

/// Read-only exact search structure over the points of a [`DenseCloud`].
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    tree: KdTree,
}

impl SpatialIndex {
    pub fn build(points: &[Point3]) -> Self {
        Self {
            tree: KdTree::build(points),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}

/// Fixed-capacity neighborhood; slots past `valid_count` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<u32>,
    pub distances: Vec<f64>,
    pub valid_count: usize,
}

impl NeighborSet {
    pub fn capacity(&self) -> usize {
        self.indices.len()
    }

    pub fn valid(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices[..self.valid_count]
            .iter()
            .copied()
            .zip(self.distances[..self.valid_count].iter().copied())
    }
}

/// The `k` nearest points of the index, then only those within `eps` when
/// given. Ties go to the lower dense-cloud index.
pub fn knn_epsilon(
    index: &SpatialIndex,
    query: &Point3,
    k: usize,
    eps: Option<f64>,
) -> NeighborSet {
    // A small margin on the squared radius keeps pruning from cutting points
    // that pass the final `distance <= eps` test after rounding.
    let max_dist2 = eps.map_or(f64::INFINITY, |e| e * e * (1.0 + 1e-9) + f64::MIN_POSITIVE);
    let found = index.tree.knn(query, k, max_dist2);
    let mut set = NeighborSet {
        indices: vec![0; k],
        distances: vec![0.0; k],
        valid_count: 0,
    };
    for (i, d2) in found {
        let d = d2.sqrt();
        if eps.is_some_and(|e| d > e) {
            continue;
        }
        set.indices[set.valid_count] = i;
        set.distances[set.valid_count] = d;
        set.valid_count += 1;
    }
    set
}

/// Neighborhoods of many queries, computed in parallel; output order follows
/// `queries`.
pub fn precompute_neighbors(
    index: &SpatialIndex,
    queries: &[Point3],
    k: usize,
    eps: Option<f64>,
) -> Vec<NeighborSet> {
    queries
        .par_iter()
        .map(|q| knn_epsilon(index, q, k, eps))
        .collect()
}

const NEIGHBOR_MAGIC: &[u8; 4] = b"LNBR";

/// Neighbor file: `LNBR`, u32 query count, u32 k, then per query k u32
/// indices, k f32 distances and a u16 valid count.
pub fn encode_neighbors(sets: &[NeighborSet], k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + sets.len() * (8 * k + 2));
    out.extend_from_slice(NEIGHBOR_MAGIC);
    out.extend_from_slice(&(sets.len() as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for s in sets {
        for slot in 0..k {
            let i = if slot < s.valid_count {
                s.indices[slot]
            } else {
                0
            };
            out.extend_from_slice(&i.to_le_bytes());
        }
        for slot in 0..k {
            let d = if slot < s.valid_count {
                s.distances[slot] as f32
            } else {
                0.0
            };
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(s.valid_count as u16).to_le_bytes());
    }
    out
}

pub fn decode_neighbors(bytes: &[u8]) -> Result<(Vec<NeighborSet>, usize), FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(NEIGHBOR_MAGIC)?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    if (k * 8 + 2).checked_mul(n) != Some(r.remaining()) {
        return Err(r.error(format!("body does not hold {n} neighborhoods of size {k}")));
    }
    let mut sets = Vec::with_capacity(n);
    for _ in 0..n {
        let indices = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let distances = (0..k)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        let at = r.offset();
        let valid_count = r.u16()? as usize;
        if valid_count > k {
            return Err(FormatError::Malformed {
                offset: at,
                message: format!("valid count {valid_count} exceeds k = {k}"),
            });
        }
        sets.push(NeighborSet {
            indices,
            distances,
            valid_count,
        });
    }
    r.finish()?;
    Ok((sets, k))
}

pub fn write_neighbors(path: &Path, sets: &[NeighborSet], k: usize) -> Result<(), FormatError> {
    io::write_atomic(path, &encode_neighbors(sets, k))
}

pub fn read_neighbors(path: &Path) -> Result<(Vec<NeighborSet>, usize), FormatError> {
    decode_neighbors(&io::read_file(path)?)
}
