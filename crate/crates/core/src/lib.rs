//! Unsupervised domain adaptation for LiDAR semantic segmentation by
//! self-training: projection and row subsampling to mimic other sensors,
//! within-frame ensembling, cross-frame neighbor aggregation with a learned
//! kernel, and class-balanced pseudo-label selection.

pub mod aggregate;
pub mod geometry;
pub mod io;
pub mod lam;
pub mod metrics;
pub mod neighbors;
pub mod selftrain;
pub mod subsample;
pub mod synth;
