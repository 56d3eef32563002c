//! Confusion matrices, per-class IoU and the static/dynamic condensation.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{pred} predictions but {truth} ground-truth labels")]
    Length { pred: usize, truth: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: u32, classes: usize },
    #[error("matrices differ: {0}")]
    Incompatible(String),
    #[error("grouping covers {got} classes, expected {expected}")]
    Grouping { expected: usize, got: usize },
}

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignore: Option<u32>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<u32>) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignore,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore(&self) -> Option<u32> {
        self.ignore
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// Adds one (prediction, truth) pair list; ignored truth labels are
    /// skipped.
    pub fn add(&mut self, pred: &[u32], truth: &[u32]) -> Result<(), MetricsError> {
        if pred.len() != truth.len() {
            return Err(MetricsError::Length {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == self.ignore {
                continue;
            }
            for l in [p, t] {
                if l as usize >= k {
                    return Err(MetricsError::Label {
                        label: l,
                        classes: k,
                    });
                }
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes || other.ignore != self.ignore {
            return Err(MetricsError::Incompatible(format!(
                "{} vs {} classes, ignore {:?} vs {:?}",
                self.classes, other.classes, self.ignore, other.ignore
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// CSV grid: header `truth\pred,0,1,...`, one row per truth class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for c in 0..self.classes {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(&t.to_string());
            for p in 0..self.classes {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix of `pred` against `truth`, accumulated in parallel chunks.
pub fn confusion(
    pred: &[u32],
    truth: &[u32],
    classes: usize,
    ignore: Option<u32>,
) -> Result<ConfusionMatrix, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    pred.par_chunks(1 << 16)
        .zip(truth.par_chunks(1 << 16))
        .map(|(p, t)| {
            let mut m = ConfusionMatrix::new(classes, ignore);
            m.add(p, t).map(|_| m)
        })
        .try_reduce(
            || ConfusionMatrix::new(classes, ignore),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// Percent; `None` where TP + FP + FN = 0.
    pub iou: Vec<Option<f64>>,
    /// Ground-truth points per class.
    pub support: Vec<u64>,
    /// Unweighted mean over classes with a defined IoU.
    pub miou: Option<f64>,
    pub ignore: Option<u32>,
}

/// Two-decimal percentage, as in `41.84`.
pub fn format_percent(v: f64) -> String {
    format!("{v:.2}")
}

impl IouReport {
    /// Classes left out of the mean.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.iou.len())
            .filter(|&c| self.iou[c].is_none())
            .collect()
    }

    pub fn miou_text(&self) -> String {
        self.miou.map_or("n/a".into(), format_percent)
    }

    /// CSV with header `class,iou,support`; undefined IoU renders as `n/a`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,support\n");
        for (c, (iou, support)) in self.iou.iter().zip(&self.support).enumerate() {
            let v = iou.map_or("n/a".into(), format_percent);
            s.push_str(&format!("{c},{v},{support}\n"));
        }
        s
    }

    /// JSON-like text summary.
    pub fn summary(&self) -> String {
        let ious: Vec<String> = self
            .iou
            .iter()
            .map(|v| v.map_or("null".into(), format_percent))
            .collect();
        let excluded: Vec<String> = self.excluded().iter().map(|c| c.to_string()).collect();
        let miou = self.miou.map_or("null".into(), format_percent);
        format!(
            "{{\n  \"miou\": {miou},\n  \"iou\": [{}],\n  \"support\": [{}],\n  \"excluded_from_mean\": [{}],\n  \"zero_denominator_policy\": \"excluded\"\n}}\n",
            ious.join(", "),
            self.support.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "),
            excluded.join(", ")
        )
    }
}

/// `IoU_c = TP / (TP + FP + FN) * 100`.
pub fn iou(matrix: &ConfusionMatrix) -> IouReport {
    let k = matrix.classes();
    let mut iou = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    for c in 0..k {
        let tp = matrix.get(c, c);
        let row = matrix.row_sum(c);
        let col = matrix.col_sum(c);
        let denom = row + col - tp;
        iou.push((denom > 0).then(|| tp as f64 / denom as f64 * 100.0));
        support.push(row);
    }
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    IouReport {
        iou,
        support,
        miou,
        ignore: matrix.ignore(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Static,
    Dynamic,
}

impl Group {
    fn index(self) -> usize {
        match self {
            Group::Static => 0,
            Group::Dynamic => 1,
        }
    }
}

/// Two-group confusion: row/column 0 is static, 1 is dynamic.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub counts: [[u64; 2]; 2],
    /// Row-normalized counts; empty rows stay zero.
    pub fractions: [[f64; 2]; 2],
    pub empty_rows: Vec<Group>,
}

impl Condensed {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred,static,dynamic\n");
        for (name, row) in ["static", "dynamic"].iter().zip(&self.fractions) {
            s.push_str(&format!("{name},{:.6},{:.6}\n", row[0], row[1]));
        }
        s
    }
}

/// Sums the matrix into static/dynamic blocks and row-normalizes.
pub fn condense_static_dynamic(
    matrix: &ConfusionMatrix,
    grouping: &[Group],
) -> Result<Condensed, MetricsError> {
    let k = matrix.classes();
    if grouping.len() != k {
        return Err(MetricsError::Grouping {
            expected: k,
            got: grouping.len(),
        });
    }
    let mut counts = [[0u64; 2]; 2];
    for t in 0..k {
        for p in 0..k {
            counts[grouping[t].index()][grouping[p].index()] += matrix.get(t, p);
        }
    }
    let mut fractions = [[0.0; 2]; 2];
    let mut empty_rows = Vec::new();
    for (g, group) in [Group::Static, Group::Dynamic].into_iter().enumerate() {
        let total = counts[g][0] + counts[g][1];
        if total == 0 {
            empty_rows.push(group);
            continue;
        }
        for p in 0..2 {
            fractions[g][p] = counts[g][p] as f64 / total as f64;
        }
    }
    Ok(Condensed {
        counts,
        fractions,
        empty_rows,
    })
}
