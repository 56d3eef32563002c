//! Cross-entropy and Lovász-Softmax on refined probability rows, with their
//! gradients with respect to the probabilities.

use crate::subsample::PredictionMatrix;

use super::LamError;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossMix {
    pub ce: f64,
    pub lovasz: f64,
}

impl Default for LossMix {
    fn default() -> Self {
        Self {
            ce: 1.0,
            lovasz: 1.0,
        }
    }
}

impl LossMix {
    pub fn validate(&self) -> Result<(), LamError> {
        if !(self.ce >= 0.0 && self.lovasz >= 0.0) || self.ce + self.lovasz == 0.0 {
            return Err(LamError::Config(
                "loss weights must be >= 0 and not both zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub ce: f64,
    pub lovasz: f64,
    pub total: f64,
}

fn check(probs: &[f64], labels: &[u32], classes: usize) -> Result<(), LamError> {
    if labels.is_empty() {
        return Err(LamError::Empty);
    }
    if probs.len() != labels.len() * classes {
        return Err(LamError::Dimension {
            expected: labels.len() * classes,
            got: probs.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(LamError::Label { label, classes });
    }
    Ok(())
}

/// Mean of `-ln max(p_y, 1e-12)`.
pub fn cross_entropy(probs: &[f64], labels: &[u32], classes: usize) -> Result<f64, LamError> {
    cross_entropy_with_grad(probs, labels, classes).map(|(l, _)| l)
}

pub fn cross_entropy_with_grad(
    probs: &[f64],
    labels: &[u32],
    classes: usize,
) -> Result<(f64, Vec<f64>), LamError> {
    check(probs, labels, classes)?;
    let n = labels.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let j = i * classes + y as usize;
        let p = probs[j];
        if p > PROB_FLOOR {
            loss -= p.ln();
            grad[j] = -1.0 / (n * p);
        } else {
            loss -= PROB_FLOOR.ln();
        }
    }
    Ok((loss / n, grad))
}

/// Gradient of the Lovász extension of the Jaccard loss for a ground-truth
/// indicator already sorted by decreasing error.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-Softmax averaged over the classes present in `labels`.
pub fn lovasz_softmax(probs: &[f64], labels: &[u32], classes: usize) -> Result<f64, LamError> {
    lovasz_softmax_with_grad(probs, labels, classes).map(|(l, _)| l)
}

pub fn lovasz_softmax_with_grad(
    probs: &[f64],
    labels: &[u32],
    classes: usize,
) -> Result<(f64, Vec<f64>), LamError> {
    check(probs, labels, classes)?;
    let n = labels.len();
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    let mut present = 0usize;
    let mut errors: Vec<(f64, usize)> = Vec::with_capacity(n);
    for c in 0..classes {
        if !labels.iter().any(|&y| y as usize == c) {
            continue;
        }
        present += 1;
        errors.clear();
        errors.extend((0..n).map(|i| {
            let fg = if labels[i] as usize == c { 1.0 } else { 0.0 };
            ((fg - probs[i * classes + c]).abs(), i)
        }));
        // Descending error; equal errors keep point order.
        errors.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let gt_sorted: Vec<bool> = errors
            .iter()
            .map(|&(_, i)| labels[i] as usize == c)
            .collect();
        let g = lovasz_grad(&gt_sorted);
        for (&(e, i), &gi) in errors.iter().zip(&g) {
            total += e * gi;
            // e = |fg - p|: decreasing in p for foreground, increasing otherwise.
            let sign = if labels[i] as usize == c { -1.0 } else { 1.0 };
            grad[i * classes + c] += sign * gi;
        }
    }
    let scale = 1.0 / present as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

/// Weighted loss and its gradient with respect to `probs`.
pub(crate) fn combined_with_grad(
    probs: &[f64],
    labels: &[u32],
    classes: usize,
    mix: &LossMix,
) -> Result<(LossValue, Vec<f64>), LamError> {
    let (ce, g_ce) = cross_entropy_with_grad(probs, labels, classes)?;
    let (lovasz, g_lov) = lovasz_softmax_with_grad(probs, labels, classes)?;
    let grad = g_ce
        .iter()
        .zip(&g_lov)
        .map(|(a, b)| mix.ce * a + mix.lovasz * b)
        .collect();
    Ok((
        LossValue {
            ce,
            lovasz,
            total: mix.ce * ce + mix.lovasz * lovasz,
        },
        grad,
    ))
}

/// `w_ce * CE + w_lovasz * Lovász` over points whose truth is not `ignore`.
pub fn lam_loss(
    refined: &PredictionMatrix,
    truth: &[u32],
    ignore: Option<u32>,
    mix: &LossMix,
) -> Result<LossValue, LamError> {
    mix.validate()?;
    if truth.len() != refined.rows() {
        return Err(LamError::Dimension {
            expected: refined.rows(),
            got: truth.len(),
        });
    }
    let k = refined.classes();
    let mut probs = Vec::with_capacity(refined.probs().len());
    let mut labels = Vec::with_capacity(truth.len());
    for (i, &y) in truth.iter().enumerate() {
        if Some(y) == ignore {
            continue;
        }
        probs.extend_from_slice(refined.row(i));
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(LamError::AllIgnored);
    }
    combined_with_grad(&probs, &labels, k, mix).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    /// Jaccard loss of class `c` when exactly the points in `wrong` are
    /// mispredicted, from set arithmetic.
    fn jaccard_loss(labels: &[u32], c: u32, wrong: &BTreeSet<usize>) -> f64 {
        let gt: BTreeSet<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let kept: BTreeSet<usize> = gt.difference(wrong).copied().collect();
        let union: BTreeSet<usize> = gt.union(wrong).copied().collect();
        1.0 - kept.len() as f64 / union.len() as f64
    }

    /// Lovász extension by its interpolation definition: sort errors, then
    /// weight each by the increment of the set function along the prefixes.
    fn lovasz_oracle(probs: &[f64], labels: &[u32], k: usize) -> f64 {
        let n = labels.len();
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..k as u32 {
            if !labels.contains(&c) {
                continue;
            }
            present += 1;
            let err: Vec<f64> = (0..n)
                .map(|i| {
                    let p = probs[i * k + c as usize];
                    if labels[i] == c {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| err[b].total_cmp(&err[a]));
            let mut prefix = BTreeSet::new();
            let mut prev = 0.0;
            for &i in &order {
                prefix.insert(i);
                let cur = jaccard_loss(labels, c, &prefix);
                sum += err[i] * (cur - prev);
                prev = cur;
            }
        }
        sum / present as f64
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (Vec<f64>, Vec<u32>) {
        let mut probs = Vec::with_capacity(n * k);
        for _ in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum();
            probs.extend(row.iter().map(|v| v / s));
        }
        let labels = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        (probs, labels)
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let labels = [0u32, 2, 1, 2];
        let p = PredictionMatrix::one_hot(3, &labels).unwrap();
        let v = lam_loss(&p, &labels, None, &LossMix::default()).unwrap();
        assert_eq!(v.ce, 0.0);
        assert_eq!(v.lovasz, 0.0);
        assert_eq!(v.total, 0.0);
    }

    #[test]
    fn uniform_binary_cross_entropy_is_ln2() {
        let p = PredictionMatrix::dense(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = lam_loss(
            &p,
            &[0, 1],
            None,
            &LossMix {
                ce: 1.0,
                lovasz: 0.0,
            },
        )
        .unwrap();
        assert!((v.ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn single_point_lovasz_is_the_error() {
        for e in [0.0, 0.1, 0.37, 0.9] {
            let l = lovasz_softmax(&[1.0 - e, e], &[0], 2).unwrap();
            assert!((l - e).abs() < 1e-15);
        }
    }

    #[test]
    fn all_ignored_is_an_error() {
        let p = PredictionMatrix::dense(2, vec![0.5, 0.5]).unwrap();
        assert_eq!(
            lam_loss(&p, &[7], Some(7), &LossMix::default()),
            Err(LamError::AllIgnored)
        );
    }

    #[test]
    fn ignored_points_do_not_count() {
        let p = PredictionMatrix::dense(2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let with = lam_loss(&p, &[0, 9], Some(9), &LossMix::default()).unwrap();
        let only = lam_loss(
            &PredictionMatrix::dense(2, vec![0.9, 0.1]).unwrap(),
            &[0],
            None,
            &LossMix::default(),
        )
        .unwrap();
        assert_eq!(with, only);
    }

    #[test]
    fn empty_and_bad_labels() {
        assert_eq!(lovasz_softmax(&[], &[], 3), Err(LamError::Empty));
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], &[4], 2),
            Err(LamError::Label { label: 4, .. })
        ));
    }

    #[test]
    fn floor_keeps_cross_entropy_finite() {
        let ce = cross_entropy(&[1.0, 0.0], &[1], 2).unwrap();
        assert!((ce - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn lovasz_matches_prefix_jaccard_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(1..=6);
            let (probs, labels) = random_instance(&mut rng, n, 3);
            let got = lovasz_softmax(&probs, &labels, 3).unwrap();
            let want = lovasz_oracle(&probs, &labels, 3);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn six_point_total_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (probs, labels) = random_instance(&mut rng, 6, 3);
        let ce_ref = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * 3 + y as usize].ln())
            .sum::<f64>()
            / 6.0;
        let want = ce_ref + lovasz_oracle(&probs, &labels, 3);
        let p = PredictionMatrix::dense(3, probs).unwrap();
        let got = lam_loss(&p, &labels, None, &LossMix::default()).unwrap();
        assert!((got.total - want).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (probs, labels) = random_instance(&mut rng, 6, 3);
        let mix = LossMix {
            ce: 0.7,
            lovasz: 1.3,
        };
        let (_, grad) = combined_with_grad(&probs, &labels, 3, &mix).unwrap();
        let h = 1e-6;
        for j in 0..probs.len() {
            let mut up = probs.clone();
            up[j] += h;
            let mut dn = probs.clone();
            dn[j] -= h;
            let f = |p: &[f64]| combined_with_grad(p, &labels, 3, &mix).unwrap().0.total;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6, "{j}: {fd} vs {}", grad[j]);
        }
    }

    proptest! {
        #[test]
        fn lovasz_is_bounded_and_positive_on_errors(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (probs, labels) = random_instance(&mut rng, n, 3);
            let l = lovasz_softmax(&probs, &labels, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            // Random rows are never exactly one-hot correct.
            prop_assert!(l > 0.0);
        }
    }
}
