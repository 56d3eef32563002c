//! Structured beam subsampling on the range image and within-frame averaging
//! of predictions made on the subsampled variants of a scan.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    project_to_range_image, GeometryError, PointCloud, RangeImageIndex, SensorConfig,
};
use crate::io::{self, ByteReader, FormatError};

const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubsampleError {
    #[error("invalid subsample spec: {0}")]
    InvalidSpec(String),
    #[error("row mask has {mask} rows, range image has {image}")]
    MaskLength { mask: usize, image: usize },
    #[error("parent point {0} does not appear in any prediction")]
    MissingPoint(usize),
    #[error("point index {index} out of range for parent of size {size}")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("predictions disagree on class count ({0} vs {1})")]
    ClassMismatch(usize, usize),
    #[error("invalid prediction matrix: {0}")]
    InvalidPrediction(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsampleMode {
    Random,
    Regular,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleSpec {
    pub mode: SubsampleMode,
    /// Target beams over source beams.
    pub ratio: f64,
    pub trials: usize,
    pub include_identity: bool,
}

impl SubsampleSpec {
    pub fn random(ratio: f64, trials: usize) -> Self {
        Self {
            mode: SubsampleMode::Random,
            ratio,
            trials,
            include_identity: true,
        }
    }

    pub fn validate(&self) -> Result<(), SubsampleError> {
        if !(self.ratio > 0.0) || !self.ratio.is_finite() {
            return Err(SubsampleError::InvalidSpec("ratio must be positive".into()));
        }
        if self.trials == 0 {
            return Err(SubsampleError::InvalidSpec("trials must be >= 1".into()));
        }
        if self.mode == SubsampleMode::Regular {
            self.regular_step()?;
        }
        Ok(())
    }

    /// Keep-every-`m`-th-row step for regular mode; only `r = 1/m` is allowed.
    fn regular_step(&self) -> Result<u32, SubsampleError> {
        if self.ratio >= 1.0 {
            return Ok(1);
        }
        let m = (1.0 / self.ratio).round();
        if (1.0 / m - self.ratio).abs() > 1e-9 {
            return Err(SubsampleError::InvalidSpec(format!(
                "regular mode needs a ratio of the form 1/m, got {}",
                self.ratio
            )));
        }
        Ok(m as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMask {
    pub keep: Vec<bool>,
}

impl RowMask {
    pub fn all(height: u32, keep: bool) -> Self {
        Self {
            keep: vec![keep; height as usize],
        }
    }

    pub fn kept_rows(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Random mode keeps each row independently with probability `min(1, r)`;
/// regular mode keeps rows `0, m, 2m, ...` for `r = 1/m`.
pub fn row_mask<R: Rng + ?Sized>(
    config: &SensorConfig,
    spec: &SubsampleSpec,
    rng: &mut R,
) -> Result<RowMask, SubsampleError> {
    spec.validate()?;
    let h = config.height;
    if spec.ratio >= 1.0 {
        return Ok(RowMask::all(h, true));
    }
    let keep = match spec.mode {
        SubsampleMode::Random => (0..h).map(|_| rng.random_bool(spec.ratio)).collect(),
        SubsampleMode::Regular => {
            let m = spec.regular_step()?;
            (0..h).map(|v| v % m == 0).collect()
        }
    };
    Ok(RowMask { keep })
}

/// Points whose range-image row is kept, in ascending parent order, and the
/// map from each output point to its parent index.
pub fn apply_row_mask(
    cloud: &PointCloud,
    index: &RangeImageIndex,
    mask: &RowMask,
) -> Result<(PointCloud, Vec<u32>), SubsampleError> {
    if mask.keep.len() != index.height as usize {
        return Err(SubsampleError::MaskLength {
            mask: mask.keep.len(),
            image: index.height as usize,
        });
    }
    let map: Vec<u32> = (0..cloud.len() as u32)
        .filter(|&i| mask.keep[index.row_of_point(i as usize) as usize])
        .collect();
    Ok((cloud.select(&map), map))
}

/// `trials` subsampled versions of `cloud`; with `include_identity` the first
/// entry is the untouched cloud.
pub fn make_ensemble<R: Rng + ?Sized>(
    cloud: &PointCloud,
    config: &SensorConfig,
    spec: &SubsampleSpec,
    rng: &mut R,
) -> Result<Vec<(PointCloud, Vec<u32>)>, SubsampleError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.trials);
    if spec.include_identity {
        out.push((cloud.clone(), (0..cloud.len() as u32).collect()));
    }
    if out.len() < spec.trials {
        let index = project_to_range_image(cloud, config)?;
        while out.len() < spec.trials {
            let mask = row_mask(config, spec, rng)?;
            out.push(apply_row_mask(cloud, &index, &mask)?);
        }
    }
    Ok(out)
}

/// Class-probability rows for a set of points. Row `i` belongs to parent
/// point `point_index[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    classes: usize,
    probs: Vec<f64>,
    point_index: Vec<u32>,
}

impl PredictionMatrix {
    pub fn new(
        classes: usize,
        probs: Vec<f64>,
        point_index: Vec<u32>,
    ) -> Result<Self, SubsampleError> {
        if classes == 0 {
            return Err(SubsampleError::InvalidPrediction("zero classes".into()));
        }
        if probs.len() != classes * point_index.len() {
            return Err(SubsampleError::InvalidPrediction(format!(
                "{} probabilities for {} rows of {} classes",
                probs.len(),
                point_index.len(),
                classes
            )));
        }
        for (r, row) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL
            {
                return Err(SubsampleError::InvalidPrediction(format!(
                    "row {r} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            classes,
            probs,
            point_index,
        })
    }

    /// Rows in parent order (`point_index = 0..n`).
    pub fn dense(classes: usize, probs: Vec<f64>) -> Result<Self, SubsampleError> {
        let n = probs.len().checked_div(classes).unwrap_or(0);
        Self::new(classes, probs, (0..n as u32).collect())
    }

    pub fn one_hot(classes: usize, labels: &[u32]) -> Result<Self, SubsampleError> {
        let mut probs = vec![0.0; classes * labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(SubsampleError::InvalidPrediction(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            probs[i * classes + l as usize] = 1.0;
        }
        Self::dense(classes, probs)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> usize {
        self.point_index.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn point_index(&self) -> &[u32] {
        &self.point_index
    }

    /// Index of the largest probability per row, lowest class on ties.
    pub fn argmax(&self) -> Vec<u32> {
        (0..self.rows())
            .map(|i| argmax(self.row(i)) as u32)
            .collect()
    }

    /// Rows re-ordered so that row `i` belongs to parent point `i`. Every
    /// parent point must appear exactly once.
    pub fn to_parent_order(&self, parent_size: usize) -> Result<PredictionMatrix, SubsampleError> {
        if self
            .point_index
            .iter()
            .enumerate()
            .all(|(i, &p)| p as usize == i)
            && self.rows() == parent_size
        {
            return Ok(self.clone());
        }
        within_frame_ensemble(std::slice::from_ref(self), parent_size)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.probs.len() * 4 + self.rows() * 4);
        out.extend_from_slice(PRED_MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &p in &self.probs {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        for &i in &self.point_index {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(PRED_MAGIC)?;
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let _flags = r.u32()?;
        let body = n
            .checked_mul(k)
            .and_then(|nk| nk.checked_add(n))
            .and_then(|c| c.checked_mul(4));
        match body {
            Some(b) if b == r.remaining() => {}
            _ => return Err(r.error(format!("body does not hold {n} rows of {k} classes"))),
        }
        let probs_start = r.offset();
        let mut probs = Vec::with_capacity(n * k);
        for _ in 0..n * k {
            probs.push(r.f32()? as f64);
        }
        let mut point_index = Vec::with_capacity(n);
        for _ in 0..n {
            point_index.push(r.u32()?);
        }
        r.finish()?;
        PredictionMatrix::new(k, probs, point_index).map_err(|e| FormatError::Malformed {
            offset: probs_start,
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&io::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        io::write_atomic(path, &self.encode())
    }
}

const PRED_MAGIC: &[u8; 4] = b"LPRB";

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = c;
        }
    }
    best
}

/// Per parent point, the mean of all rows that refer to it.
pub fn within_frame_ensemble(
    predictions: &[PredictionMatrix],
    parent_size: usize,
) -> Result<PredictionMatrix, SubsampleError> {
    let classes = match predictions.first() {
        Some(p) => p.classes,
        None if parent_size == 0 => 1,
        None => return Err(SubsampleError::MissingPoint(0)),
    };
    let mut sums = vec![0.0; parent_size * classes];
    let mut counts = vec![0u32; parent_size];
    for pred in predictions {
        if pred.classes != classes {
            return Err(SubsampleError::ClassMismatch(classes, pred.classes));
        }
        for (row, &parent) in pred.point_index.iter().enumerate() {
            let p = parent as usize;
            if p >= parent_size {
                return Err(SubsampleError::IndexOutOfRange {
                    index: parent,
                    size: parent_size,
                });
            }
            counts[p] += 1;
            for (acc, v) in sums[p * classes..(p + 1) * classes]
                .iter_mut()
                .zip(pred.row(row))
            {
                *acc += v;
            }
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(SubsampleError::MissingPoint(missing));
    }
    for (p, &c) in counts.iter().enumerate() {
        for v in &mut sums[p * classes..(p + 1) * classes] {
            *v /= c as f64;
        }
    }
    PredictionMatrix::dense(classes, sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> SensorConfig {
        SensorConfig::new(16, 32, 3.0, 25.0, 16).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-4.0..1.0),
                )
            })
            .collect();
        PointCloud::new(pts, Some((0..n).map(|i| i as f64).collect()), 3).unwrap()
    }

    #[test]
    fn ratio_one_keeps_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = row_mask(&small_config(), &SubsampleSpec::random(1.0, 1), &mut rng).unwrap();
        assert_eq!(mask.kept_rows(), 16);
        let mask = row_mask(&small_config(), &SubsampleSpec::random(2.0, 1), &mut rng).unwrap();
        assert_eq!(mask.kept_rows(), 16);
    }

    #[test]
    fn regular_half_keeps_even_rows() {
        let spec = SubsampleSpec {
            mode: SubsampleMode::Regular,
            ..SubsampleSpec::random(0.5, 1)
        };
        let mask = row_mask(&small_config(), &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let kept: Vec<usize> = (0..16).filter(|&v| mask.keep[v]).collect();
        assert_eq!(kept, vec![0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn regular_mode_rejects_non_reciprocal_ratio() {
        let spec = SubsampleSpec {
            mode: SubsampleMode::Regular,
            ..SubsampleSpec::random(0.4, 1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(SubsampleSpec::random(0.0, 1).validate().is_err());
        assert!(SubsampleSpec::random(0.5, 0).validate().is_err());
    }

    #[test]
    fn keep_all_and_drop_all_masks() {
        let cloud = random_cloud(300, 1);
        let index = project_to_range_image(&cloud, &small_config()).unwrap();
        let (same, map) = apply_row_mask(&cloud, &index, &RowMask::all(16, true)).unwrap();
        assert_eq!(same, cloud);
        assert_eq!(map, (0..300).collect::<Vec<u32>>());
        let (empty, map) = apply_row_mask(&cloud, &index, &RowMask::all(16, false)).unwrap();
        assert!(empty.is_empty() && map.is_empty());
    }

    #[test]
    fn single_row_mask_matches_row_pixels() {
        let cloud = random_cloud(2000, 2);
        let cfg = small_config();
        let index = project_to_range_image(&cloud, &cfg).unwrap();
        let mut mask = RowMask::all(16, false);
        mask.keep[5] = true;
        let (sub, map) = apply_row_mask(&cloud, &index, &mask).unwrap();
        let mut expected: Vec<u32> = (0..cfg.width)
            .flat_map(|u| index.points_of_pixel(u, 5).iter().copied())
            .collect();
        expected.sort_unstable();
        assert!(!expected.is_empty());
        assert_eq!(map, expected);
        assert_eq!(sub.len(), expected.len());
        assert_eq!(sub.intensity().unwrap()[0], expected[0] as f64);
    }

    #[test]
    fn mask_length_mismatch() {
        let cloud = random_cloud(10, 3);
        let index = project_to_range_image(&cloud, &small_config()).unwrap();
        assert_eq!(
            apply_row_mask(&cloud, &index, &RowMask::all(8, true)).unwrap_err(),
            SubsampleError::MaskLength { mask: 8, image: 16 }
        );
    }

    #[test]
    fn ensemble_shapes() {
        let cloud = random_cloud(400, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one = make_ensemble(
            &cloud,
            &small_config(),
            &SubsampleSpec::random(0.5, 1),
            &mut rng,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].0, cloud);
        let three = make_ensemble(
            &cloud,
            &small_config(),
            &SubsampleSpec::random(0.5, 3),
            &mut rng,
        )
        .unwrap();
        assert_eq!(three.len(), 3);
        assert_eq!(three[0].1.len(), 400);
        assert!(three[1].1.len() < 400 && three[2].1.len() < 400);
    }

    #[test]
    fn ensemble_is_seed_deterministic() {
        let cloud = random_cloud(400, 5);
        let run = |seed| {
            make_ensemble(
                &cloud,
                &small_config(),
                &SubsampleSpec::random(0.5, 4),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a, b);
        let bytes = |e: &Vec<(PointCloud, Vec<u32>)>| -> Vec<u8> {
            e.iter().flat_map(|(c, _)| io::encode_scan(c)).collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn single_identity_prediction_passes_through() {
        let p = PredictionMatrix::dense(2, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        assert_eq!(
            within_frame_ensemble(std::slice::from_ref(&p), 2).unwrap(),
            p
        );
    }

    #[test]
    fn two_appearances_are_averaged() {
        let a = PredictionMatrix::new(2, vec![0.2, 0.8], vec![0]).unwrap();
        let b = PredictionMatrix::new(2, vec![0.4, 0.6], vec![0]).unwrap();
        let out = within_frame_ensemble(&[a, b], 1).unwrap();
        assert!((out.row(0)[0] - 0.3).abs() < 1e-12 && (out.row(0)[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn missing_parent_point_is_an_error() {
        let a = PredictionMatrix::new(2, vec![0.5, 0.5], vec![1]).unwrap();
        assert_eq!(
            within_frame_ensemble(&[a], 2).unwrap_err(),
            SubsampleError::MissingPoint(0)
        );
    }

    #[test]
    fn out_of_range_parent_index() {
        let a = PredictionMatrix::new(2, vec![0.5, 0.5], vec![3]).unwrap();
        assert!(matches!(
            within_frame_ensemble(&[a], 2),
            Err(SubsampleError::IndexOutOfRange { index: 3, .. })
        ));
    }

    fn random_simplex_rows<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(n * k);
        for _ in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            v.extend(row.iter().map(|x| x / s));
        }
        v
    }

    #[test]
    fn ensemble_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (n, k) = (100usize, 4usize);
        let mut preds =
            vec![PredictionMatrix::dense(k, random_simplex_rows(&mut rng, n, k)).unwrap()];
        for _ in 0..4 {
            let idx: Vec<u32> = (0..n as u32).filter(|_| rng.random_bool(0.5)).collect();
            let probs = random_simplex_rows(&mut rng, idx.len(), k);
            preds.push(PredictionMatrix::new(k, probs, idx).unwrap());
        }
        // Oracle: gather every appearance per point, then average.
        let mut appearances: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
        for p in &preds {
            for r in 0..p.rows() {
                appearances[p.point_index()[r] as usize].push(p.row(r).to_vec());
            }
        }
        let out = within_frame_ensemble(&preds, n).unwrap();
        for i in 0..n {
            for c in 0..k {
                let mean =
                    appearances[i].iter().map(|r| r[c]).sum::<f64>() / appearances[i].len() as f64;
                assert!((out.row(i)[c] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prediction_codec_layout() {
        let p = PredictionMatrix::new(2, vec![0.25, 0.75], vec![9]).unwrap();
        let bytes = p.encode();
        assert_eq!(&bytes[0..4], b"LPRB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.25f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &9u32.to_le_bytes());
        assert_eq!(PredictionMatrix::decode(&bytes).unwrap(), p);
    }

    #[test]
    fn prediction_decode_errors_carry_offsets() {
        let mut bytes = PredictionMatrix::dense(2, vec![0.5, 0.5]).unwrap().encode();
        bytes[0] = b'X';
        assert!(matches!(
            PredictionMatrix::decode(&bytes),
            Err(FormatError::Malformed { offset: 0, .. })
        ));
        let bytes = PredictionMatrix::dense(2, vec![0.5, 0.5]).unwrap().encode();
        assert!(matches!(
            PredictionMatrix::decode(&bytes[..bytes.len() - 1]),
            Err(FormatError::Malformed { offset: 16, .. })
        ));
    }

    proptest! {
        #[test]
        fn ensemble_is_order_invariant_and_on_simplex(seed in any::<u64>(), trials in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, k) = (30usize, 3usize);
            let mut preds = vec![PredictionMatrix::dense(k, random_simplex_rows(&mut rng, n, k)).unwrap()];
            for _ in 1..trials {
                let idx: Vec<u32> = (0..n as u32).filter(|_| rng.random_bool(0.6)).collect();
                let probs = random_simplex_rows(&mut rng, idx.len(), k);
                preds.push(PredictionMatrix::new(k, probs, idx).unwrap());
            }
            let a = within_frame_ensemble(&preds, n).unwrap();
            preds.reverse();
            let b = within_frame_ensemble(&preds, n).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x >= 0.0);
            }
            for i in 0..n {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn prediction_codec_round_trips(seed in any::<u64>(), n in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<f64> = random_simplex_rows(&mut rng, n, 3).iter().map(|&p| p as f32 as f64).collect();
            let p = PredictionMatrix::new(3, rows, (0..n as u32).rev().collect()).unwrap();
            prop_assert_eq!(PredictionMatrix::decode(&p.encode()).unwrap(), p);
        }
    }
}
