//! Acceptance suite. Runs every acceptance criterion at its stated tolerance
//! and runtime bound and prints one PASS/FAIL line per criterion.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lidar_uda::aggregate::{kernel_score, refine_labels, Kernel};
use lidar_uda::geometry::{
    project_to_range_image, Point3, PointCloud, RigidTransform, SensorConfig,
};
use lidar_uda::lam::{
    batch_loss_and_grads, lovasz_softmax, modulate_statistics, train_lam, FeatureStats, LamParams,
    LossMix, Mode, TrainConfig, TrainingSet, DEFAULT_HIDDEN,
};
use lidar_uda::metrics::{condense_static_dynamic, confusion, iou, ConfusionMatrix, Group};
use lidar_uda::neighbors::{build_dense_cloud, knn_epsilon, precompute_neighbors, SpatialIndex};
use lidar_uda::selftrain::{
    cbst_select, generate_pseudo_labels, source_training_set, AdaptationConfig, AggregationConfig,
    CbstConfig, FlipNoise, KernelKind, MockPredictor, PseudoLabelSet,
};
use lidar_uda::subsample::{row_mask, PredictionMatrix, SubsampleSpec};
use lidar_uda::synth::{generate, SceneConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn hdl64_like() -> SensorConfig {
    SensorConfig {
        height: 64,
        width: 2048,
        fov_up: 3.0,
        fov_down: 25.0,
        beams: 64,
    }
}

fn clamp_floor(x: f64, size: u32) -> u32 {
    x.floor().clamp(0.0, (size - 1) as f64) as u32
}

/// Spherical projection evaluated directly from its definition.
fn oracle_pixel(p: [f64; 3], c: &SensorConfig) -> (u32, u32) {
    let [x, y, z] = p;
    let r = (x * x + y * y + z * z).sqrt();
    let u = 0.5 * (1.0 - y.atan2(x) / PI) * c.width as f64;
    let f = (c.fov_up + c.fov_down).to_radians();
    let v = (1.0 - ((z / r).asin() + c.fov_down.to_radians()) / f) * c.height as f64;
    (clamp_floor(u, c.width), clamp_floor(v, c.height))
}

fn projection_conformance() -> Outcome {
    let c = hdl64_like();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<[f64; 3]> = (0..10_000)
        .map(|_| {
            [
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-10.0..5.0),
            ]
        })
        .collect();
    let cloud =
        PointCloud::from_points(raw.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
            .map_err(|e| e.to_string())?;
    let index = project_to_range_image(&cloud, &c).map_err(|e| e.to_string())?;
    for (i, p) in raw.iter().enumerate() {
        let expected = oracle_pixel(*p, &c);
        ensure(index.pixel_of_point()[i] == expected, || {
            format!(
                "point {i}: batch {:?}, scalar {expected:?}",
                index.pixel_of_point()[i]
            )
        })?;
    }
    let worked = PointCloud::from_points(vec![
        Point3::new(10.0, 0.0, 0.0),
        Point3::new(0.0, 10.0, 0.0),
    ])
    .map_err(|e| e.to_string())?;
    let w = project_to_range_image(&worked, &c).map_err(|e| e.to_string())?;
    ensure(w.pixel_of_point()[0] == (1024, 6), || {
        format!("(10,0,0) -> {:?}", w.pixel_of_point()[0])
    })?;
    ensure(w.pixel_of_point()[1].0 == 512, || {
        format!("(0,10,0) -> {:?}", w.pixel_of_point()[1])
    })?;
    Ok("10000 points agree; u=1024, u=512, v=6 hold".into())
}

fn subsampling_statistics() -> Outcome {
    let c = hdl64_like();
    let spec = SubsampleSpec::random(0.5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let masks = 10_000;
    let h = c.height as usize;
    let mut per_row = vec![0u64; h];
    let mut fraction_sum = 0.0;
    for _ in 0..masks {
        let m = row_mask(&c, &spec, &mut rng).map_err(|e| e.to_string())?;
        fraction_sum += m.kept_rows() as f64 / h as f64;
        for (v, &k) in m.keep.iter().enumerate() {
            per_row[v] += k as u64;
        }
    }
    let mean = fraction_sum / masks as f64;
    ensure((mean - 0.5).abs() <= 0.02, || {
        format!("mean keep fraction {mean}")
    })?;
    let total: u64 = per_row.iter().sum();
    let expected = total as f64 / h as f64;
    let chi2: f64 = per_row
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new((h - 1) as f64)
        .map_err(|e| e.to_string())?
        .inverse_cdf(0.99);
    ensure(chi2 < critical, || {
        format!("chi-square {chi2:.2} >= {critical:.2}")
    })?;
    let regular = SubsampleSpec {
        mode: lidar_uda::subsample::SubsampleMode::Regular,
        ..SubsampleSpec::random(0.5, 2)
    };
    let m = row_mask(&c, &regular, &mut rng).map_err(|e| e.to_string())?;
    ensure(
        m.keep.iter().enumerate().all(|(v, &k)| k == (v % 2 == 0)),
        || "regular mask is not every other row".into(),
    )?;
    Ok(format!(
        "mean keep {mean:.4}, chi-square {chi2:.2} < {critical:.2}, regular keeps even rows"
    ))
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random frames along a straight path with random predictions.
fn random_sequence(
    rng: &mut ChaCha8Rng,
    frames: usize,
    points: usize,
    k: usize,
) -> (Vec<(PointCloud, PredictionMatrix)>, Vec<RigidTransform>) {
    let mut scans = Vec::new();
    let mut poses = Vec::new();
    for f in 0..frames {
        let pts: Vec<Point3> = (0..points)
            .map(|_| {
                Point3::new(
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let probs: Vec<f64> = (0..points).flat_map(|_| random_simplex(rng, k)).collect();
        let mut cloud = PointCloud::from_points(pts).unwrap();
        cloud.frame_id = f as u32;
        scans.push((cloud, PredictionMatrix::dense(k, probs).unwrap()));
        poses.push(RigidTransform::from_yaw_translation(
            0.02 * f as f64,
            Point3::new(0.3 * f as f64, 0.0, 0.0),
        ));
    }
    (scans, poses)
}

fn refinement_oracle() -> Outcome {
    let k = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (scans, poses) = random_sequence(&mut rng, 5, 1000, k);
    let dense = build_dense_cloud(&scans, &poses, 2, 2, 1).map_err(|e| e.to_string())?;
    let index = SpatialIndex::build(&dense.points);
    let queries = &dense.points[dense.reference_points()];
    let sets = precompute_neighbors(&index, queries, 60, None);
    let own = &scans[2].1;
    let params = LamParams::init(k, &DEFAULT_HIDDEN, 5);
    let mut worst: f64 = 0.0;
    let mut worst_simplex: f64 = 0.0;
    for (kernel, name) in [(Kernel::Uniform, "uniform"), (Kernel::Lam(&params), "lam")] {
        let refined =
            refine_labels(queries, own, &dense, &sets, &kernel).map_err(|e| e.to_string())?;
        for (q, set) in sets.iter().enumerate() {
            let v_p = own.row(q);
            let mut num = vec![0.0; k];
            let mut den = 0.0;
            for &j in &set.indices[..set.valid_count] {
                let j = j as usize;
                let w = match kernel {
                    Kernel::Uniform => 1.0,
                    Kernel::Lam(_) => {
                        let mut f = vec![(queries[q] - dense.points[j]).norm()];
                        f.extend_from_slice(v_p);
                        f.extend_from_slice(dense.probs(j));
                        f.push(dense.temporal_offset[j] as f64 / dense.window as f64);
                        f.push(dense.sensor_distance[j]);
                        kernel_score(&kernel, &f).map_err(|e| e.to_string())?
                    }
                };
                den += w;
                for c in 0..k {
                    num[c] += w * dense.probs(j)[c];
                }
            }
            let row = refined.row(q);
            for c in 0..k {
                let expected = num[c] / den;
                if name == "uniform" {
                    ensure(row[c] == expected, || {
                        format!(
                            "uniform mean differs at query {q}: {} vs {expected}",
                            row[c]
                        )
                    })?;
                }
                worst = worst.max((row[c] - expected).abs());
            }
            worst_simplex = worst_simplex.max((row.iter().sum::<f64>() - 1.0).abs());
            ensure(row.iter().all(|&v| v >= -1e-5), || {
                format!("negative probability at query {q}")
            })?;
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    ensure(worst_simplex <= 1e-5, || {
        format!("simplex deviation {worst_simplex:e}")
    })?;
    Ok(format!(
        "1000 queries, max deviation {worst:.1e}, simplex deviation {worst_simplex:.1e}"
    ))
}

fn knn_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut points: Vec<Point3> = (0..100_000)
        .map(|_| {
            Point3::new(
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
            )
        })
        .collect();
    // Exact duplicates exercise the index tie-break.
    for i in 0..500 {
        points[99_000 + i] = points[i * 7];
    }
    let index = SpatialIndex::build(&points);
    let (k, eps) = (60, 0.2);
    let mut filtered = 0usize;
    for qi in 0..100 {
        let q = if qi % 4 == 0 {
            points[qi * 13]
        } else {
            Point3::new(
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
            )
        };
        let mut all: Vec<(f64, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((q - p).norm_squared(), i as u32))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for e in [Some(eps), None] {
            let expected: Vec<u32> = all[..k]
                .iter()
                .filter(|(d2, _)| e.is_none_or(|e| d2.sqrt() <= e))
                .map(|&(_, i)| i)
                .collect();
            let got = knn_epsilon(&index, &q, k, e);
            let got: Vec<u32> = got.indices[..got.valid_count].to_vec();
            ensure(got == expected, || {
                format!("query {qi} eps {e:?}: got {got:?}, expected {expected:?}")
            })?;
            if e.is_some() {
                filtered += k - expected.len();
            }
        }
    }
    Ok(format!("100 queries over 100000 points identical to a full scan ({filtered} neighbors removed by eps)"))
}

/// Neighborhoods of a small random scene, as used for LAM training.
fn gradient_check() -> Outcome {
    let k = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (scans, poses) = random_sequence(&mut rng, 3, 60, k);
    let dense = build_dense_cloud(&scans, &poses, 1, 1, 1).map_err(|e| e.to_string())?;
    let index = SpatialIndex::build(&dense.points);
    let queries: Vec<Point3> = dense.points[dense.reference_points()]
        .iter()
        .take(3)
        .copied()
        .collect();
    let sets = precompute_neighbors(&index, &queries, 6, None);
    let own = PredictionMatrix::dense(k, (0..3).flat_map(|q| scans[1].1.row(q).to_vec()).collect())
        .unwrap();
    let mut set = TrainingSet::new(k);
    set.add_scan(&queries, &own, &dense, &sets, &[0, 1, 0], None)
        .map_err(|e| e.to_string())?;
    ensure(set.feature_dim() == 7 && set.len() == 3, || {
        "expected D = 7 and 3 neighborhoods".into()
    })?;
    let mix = LossMix::default();
    let (mut params, _) =
        modulate_statistics(&LamParams::init(k, &[4, 4, 4], 9), &set.feature_stats())
            .map_err(|e| e.to_string())?;
    params.mode = Mode::Train;
    let loss_at = |p: &LamParams| -> Result<f64, String> {
        let mut p = p.clone();
        Ok(batch_loss_and_grads(&mut p, &set, &[0, 1, 2], &mix)
            .map_err(|e| e.to_string())?
            .0
            .total)
    };
    let (_, grads) = batch_loss_and_grads(&mut params.clone(), &set, &[0, 1, 2], &mix)
        .map_err(|e| e.to_string())?;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for t in 0..grads.tensors.len() {
        for i in 0..grads.tensors[t].len() {
            let mut plus = params.clone();
            plus.trainable_mut()[t].1[i] += h;
            let mut minus = params.clone();
            minus.trainable_mut()[t].1[i] -= h;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let an = grads.tensors[t][i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
            count += 1;
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "{count} parameters, max relative error {worst:.2e}"
    ))
}

/// Lovász extension of the Jaccard loss evaluated from its set-function
/// definition: errors sorted descending, each weighted by the increase of
/// `|M| / |G ∪ M|` when its point joins the mistake set `M`.
fn lovasz_oracle(probs: &[f64], labels: &[u32], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..k as u32 {
        let fg: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if !fg.contains(&true) {
            continue;
        }
        present += 1;
        let err: Vec<f64> = (0..n)
            .map(|i| ((fg[i] as u8 as f64) - probs[i * k + c as usize]).abs())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let jaccard = |mistakes: &[usize]| -> f64 {
            let union = (0..n).filter(|i| fg[*i] || mistakes.contains(i)).count();
            mistakes.len() as f64 / union as f64
        };
        for i in 0..n {
            total += err[order[i]] * (jaccard(&order[..=i]) - jaccard(&order[..i]));
        }
    }
    total / present as f64
}

fn lovasz_oracle_check() -> Outcome {
    let k = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(1..=6);
        let probs: Vec<f64> = (0..n).flat_map(|_| random_simplex(&mut rng, k)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let got = lovasz_softmax(&probs, &labels, k).map_err(|e| e.to_string())?;
        worst = worst.max((got - lovasz_oracle(&probs, &labels, k)).abs());
        let perfect: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..k as u32).map(move |c| (c == y) as u8 as f64))
            .collect();
        let zero = lovasz_softmax(&perfect, &labels, k).map_err(|e| e.to_string())?;
        ensure(zero == 0.0, || format!("perfect prediction gives {zero}"))?;
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "500 instances, max deviation {worst:.1e}, perfect predictions give 0"
    ))
}

fn adaptation_benefit() -> Outcome {
    let accuracy = |sets: &[PseudoLabelSet], truth: &[Vec<u32>]| -> f64 {
        let per_frame: Vec<f64> = sets
            .iter()
            .zip(truth)
            .map(|(s, t)| {
                s.labels.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / t.len() as f64
            })
            .collect();
        per_frame.iter().sum::<f64>() / per_frame.len() as f64
    };
    let source = generate(&SceneConfig {
        frames: 20,
        seed: 1,
        ..Default::default()
    });
    let target = generate(&SceneConfig {
        frames: 20,
        seed: 2,
        ..Default::default()
    });
    // Flip probability grows with sensor range.
    let noise = |seed| FlipNoise {
        near_rate: 0.05,
        far_rate: 0.9,
        near_range: 6.0,
        far_range: 16.0,
        seed,
    };
    let teacher = MockPredictor::new(target.config.truth_rule())
        .with_noise(noise(7))
        .softened(0.7);
    let mut config = AdaptationConfig {
        sensor: target.config.sensor(),
        subsample: SubsampleSpec::random(0.5, 1),
        aggregation: AggregationConfig {
            kernel: KernelKind::Uniform,
            k: 60,
            eps: Some(0.2),
            window: 20,
            stride: 1,
            modulate: true,
        },
        ..Default::default()
    };
    let uniform = generate_pseudo_labels(&target.sequence, &teacher, None, &config, false)
        .map_err(|e| e.to_string())?;
    let raw: Vec<PseudoLabelSet> = uniform
        .within_frame
        .iter()
        .map(PseudoLabelSet::from_prediction)
        .collect();
    let flipped = 1.0 - accuracy(&raw, &target.labels);
    let (acc_raw, acc_uniform) = (
        accuracy(&raw, &target.labels),
        accuracy(&uniform.labels, &target.labels),
    );

    let source_model = MockPredictor::new(source.config.truth_rule())
        .with_noise(noise(8))
        .softened(0.7);
    let set = source_training_set(
        &source.sequence,
        &source.labels,
        &source_model,
        &config,
        20,
        None,
    )
    .map_err(|e| e.to_string())?;
    let trained = train_lam(&set, &TrainConfig::default()).map_err(|e| e.to_string())?;
    config.aggregation.kernel = KernelKind::Lam;
    let lam = generate_pseudo_labels(
        &target.sequence,
        &teacher,
        Some(&trained.params),
        &config,
        false,
    )
    .map_err(|e| e.to_string())?;
    let acc_lam = accuracy(&lam.labels, &target.labels);
    let detail = format!(
        "label noise {:.1}%, accuracy raw {:.2}%, uniform {:.2}%, lam {:.2}%",
        100.0 * flipped,
        100.0 * acc_raw,
        100.0 * acc_uniform,
        100.0 * acc_lam
    );
    ensure(acc_uniform - acc_raw >= 0.05, || {
        format!("uniform gain below 5 pp: {detail}")
    })?;
    ensure(acc_lam - acc_uniform >= 0.01, || {
        format!("lam gain below 1 pp: {detail}")
    })?;
    Ok(detail)
}

fn statistics_modulation() -> Outcome {
    let d = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..5000)
        .map(|_| {
            (0..d)
                .map(|c| {
                    40.0 + 3.0 * c as f64 + (c as f64 + 0.5) * 7.0 * rng.random_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();
    let mut stats = FeatureStats::new(d);
    for r in &rows {
        stats.push(r);
    }
    let params = LamParams::init(2, &[4, 4, 4], 1);
    let (once, _) = modulate_statistics(&params, &stats).map_err(|e| e.to_string())?;
    let (twice, _) = modulate_statistics(&once, &stats).map_err(|e| e.to_string())?;
    ensure(once == twice, || "modulation is not idempotent".into())?;
    let n = rows.len() as f64;
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for c in 0..d {
        let z: Vec<f64> = rows
            .iter()
            .map(|r| (r[c] - once.std_mean[c]) / once.std_var[c].sqrt())
            .collect();
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    ensure(worst_mean < 1e-6 && worst_var < 1e-6, || {
        format!("|mean| {worst_mean:e}, |var - 1| {worst_var:e}")
    })?;
    Ok(format!(
        "max |mean| {worst_mean:.1e}, max |var - 1| {worst_var:.1e}, idempotent"
    ))
}

fn cbst_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let classes = 5;
    let n = 2000;
    let labels: Vec<u32> = (0..n)
        .map(|_| rng.random_range(0..classes as u32 - 1))
        .collect();
    // Distinct confidences: a shuffled arithmetic progression.
    let mut confidence: Vec<f64> = (0..n)
        .map(|i| (i as f64 + 1.0) / (n as f64 + 1.0))
        .collect();
    confidence.shuffle(&mut rng);
    let mask = cbst_select(&labels, &confidence, classes, &CbstConfig { portion: 0.2 });
    for c in 0..classes as u32 {
        let n_c = labels.iter().filter(|&&l| l == c).count();
        let selected = labels
            .iter()
            .zip(&mask)
            .filter(|(&l, &m)| l == c && m)
            .count();
        let expected = (n_c as f64 * 0.2).ceil() as usize;
        let mut exact = n_c * 2 / 10;
        if exact * 10 < n_c * 2 {
            exact += 1;
        }
        ensure(selected == expected && selected == exact, || {
            format!("class {c}: {selected} of {n_c} selected")
        })?;
        let min_selected = labels
            .iter()
            .zip(&mask)
            .zip(&confidence)
            .filter(|((&l, &m), _)| l == c && m)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let max_rejected = labels
            .iter()
            .zip(&mask)
            .zip(&confidence)
            .filter(|((&l, &m), _)| l == c && !m)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        ensure(n_c == 0 || min_selected > max_rejected, || {
            format!("class {c}: selection is not the most confident")
        })?;
    }
    let all = cbst_select(&labels, &confidence, classes, &CbstConfig { portion: 1.0 });
    ensure(all.iter().all(|&m| m), || {
        "p = 1 does not select everything".into()
    })?;
    Ok("per-class counts equal ceil(0.2 n_c); p = 1 selects all".into())
}

fn metrics_cases() -> Outcome {
    // One class-0 hit, one class-0 point predicted as class 1.
    let r = iou(&confusion(&[0, 1], &[0, 0], 2, None).map_err(|e| e.to_string())?);
    ensure(
        r.iou == vec![Some(50.0), Some(0.0)] && r.miou_text() == "25.00",
        || {
            format!(
                "expected 50.0/0.0/25.0, got {:?} / {}",
                r.iou,
                r.miou_text()
            )
        },
    )?;

    // TP / (TP + FP + FN) tallied point by point; class 2 never occurs.
    let truth = [0, 0, 1, 3, 3, 3, 3, 1];
    let pred = [0, 1, 0, 3, 3, 0, 0, 1];
    let r = iou(&confusion(&pred, &truth, 4, None).map_err(|e| e.to_string())?);
    for c in 0..4u32 {
        let tp = truth
            .iter()
            .zip(&pred)
            .filter(|(&t, &p)| t == c && p == c)
            .count();
        let fp = truth
            .iter()
            .zip(&pred)
            .filter(|(&t, &p)| t != c && p == c)
            .count();
        let fn_ = truth
            .iter()
            .zip(&pred)
            .filter(|(&t, &p)| t == c && p != c)
            .count();
        let denom = tp + fp + fn_;
        let want = (denom > 0).then(|| 100.0 * tp as f64 / denom as f64);
        ensure(
            r.iou[c as usize].map(|v| (v - want.unwrap_or(f64::NAN)).abs() < 1e-12)
                == want.map(|_| true),
            || format!("class {c}: {:?} vs {want:?}", r.iou[c as usize]),
        )?;
    }

    // Condensation preserves mass and row-normalizes.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let truth: Vec<u32> = (0..5000).map(|_| rng.random_range(0..6)).collect();
    let pred: Vec<u32> = truth
        .iter()
        .map(|&t| {
            if rng.random_bool(0.7) {
                t
            } else {
                rng.random_range(0..6)
            }
        })
        .collect();
    let m = confusion(&pred, &truth, 6, None).map_err(|e| e.to_string())?;
    let grouping = [
        Group::Static,
        Group::Static,
        Group::Dynamic,
        Group::Static,
        Group::Dynamic,
        Group::Dynamic,
    ];
    let cond = condense_static_dynamic(&m, &grouping).map_err(|e| e.to_string())?;
    let mut hand = [[0u64; 2]; 2];
    for (&t, &p) in truth.iter().zip(&pred) {
        let g = |c: u32| (grouping[c as usize] == Group::Dynamic) as usize;
        hand[g(t)][g(p)] += 1;
    }
    ensure(cond.counts == hand, || {
        format!("condensed {:?} vs {hand:?}", cond.counts)
    })?;
    ensure(hand.iter().flatten().sum::<u64>() == m.total(), || {
        "mass not preserved".into()
    })?;
    for r in 0..2 {
        let row_total = (hand[r][0] + hand[r][1]) as f64;
        for c in 0..2 {
            ensure(
                cond.fractions[r][c] == hand[r][c] as f64 / row_total,
                || format!("fraction [{r}][{c}]"),
            )?;
        }
    }

    // Additivity under sharding.
    let mut sharded = ConfusionMatrix::new(6, Some(5));
    for (p, t) in pred.chunks(317).zip(truth.chunks(317)) {
        sharded
            .merge(&confusion(p, t, 6, Some(5)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    }
    ensure(
        sharded == confusion(&pred, &truth, 6, Some(5)).map_err(|e| e.to_string())?,
        || "sharded matrix differs".into(),
    )?;
    Ok("closed-form IoUs reproduced (50.0/0.0/25.0), condensation exact, sharding additive".into())
}

fn run_cli(args: &[&str], threads: usize) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lidar-uda"))
        .args(["--threads", &threads.to_string()])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`lidar-uda {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    ensure(fa == fb, || format!("file sets differ: {fa:?} vs {fb:?}"))?;
    for f in &fa {
        let (x, y) = (
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
        );
        ensure(x == y, || format!("{} differs", f.display()))?;
    }
    Ok(fa.len())
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    run_cli(
        &[
            "synthgen",
            "--out-dir",
            &p("target"),
            "--frames",
            "5",
            "--seed",
            "2",
        ],
        4,
    )?;
    run_cli(
        &[
            "synthgen",
            "--out-dir",
            &p("source"),
            "--frames",
            "5",
            "--seed",
            "1",
        ],
        4,
    )?;
    let config = "seed = 11\n\n[dataset]\nroot = target\nsource = source\n\n\
        [sensor.target]\nheight = 32\nwidth = 360\nfov_up = 3\nfov_down = 25\nbeams = 32\n\n\
        [sensor.source]\nheight = 32\nwidth = 360\nfov_up = 3\nfov_down = 25\nbeams = 32\n\n\
        [lam]\nquery_step = 40\n\n[adaptation]\niterations = 2\n\n\
        [mock]\nrule = height\nthresholds = -1.5, 0.3\nconfidence = 0.7\nnear_rate = 0.05\nfar_rate = 0.6\n\
        near_range = 6\nfar_range = 16\nnoise_seed = 7\n";
    std::fs::write(dir.join("run.ini"), config).map_err(|e| e.to_string())?;
    let cfg = p("run.ini");
    for (threads, name) in [(1, "lam_t1"), (8, "lam_t8")] {
        std::fs::create_dir_all(dir.join(name)).unwrap();
        run_cli(
            &[
                "-c",
                &cfg,
                "lam-train",
                "--out",
                &p(&format!("{name}/lam.lamw")),
            ],
            threads,
        )?;
    }
    same_tree(&dir.join("lam_t1"), &dir.join("lam_t8"))?;
    let ckpt = p("lam_t1/lam.lamw");
    for (threads, name) in [(1, "run_a"), (1, "run_b"), (8, "run_c")] {
        run_cli(
            &[
                "-c",
                &cfg,
                "pipeline",
                "--checkpoint",
                &ckpt,
                "--out-dir",
                &p(name),
            ],
            threads,
        )?;
    }
    let n = same_tree(&dir.join("run_a"), &dir.join("run_b"))?;
    same_tree(&dir.join("run_a"), &dir.join("run_c"))?;
    for required in [
        "iter_0/labels/000004.label",
        "iter_1/masks/000000.mask",
        "histogram.csv",
        "report.csv",
        "report.txt",
    ] {
        ensure(dir.join("run_a").join(required).exists(), || {
            format!("missing {required}")
        })?;
    }
    Ok(format!(
        "{n} pipeline files and the checkpoint byte-identical across 2 runs and 1 vs 8 threads"
    ))
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let secs = |s: u64| Some(Duration::from_secs(s));
    let criteria = [
        Criterion {
            name: "projection conformance",
            limit: secs(1),
            run: projection_conformance,
        },
        Criterion {
            name: "subsampling statistics",
            limit: secs(5),
            run: subsampling_statistics,
        },
        Criterion {
            name: "refinement matches brute-force weighted average",
            limit: secs(10),
            run: refinement_oracle,
        },
        Criterion {
            name: "k-NN exactness",
            limit: secs(30),
            run: knn_exactness,
        },
        Criterion {
            name: "LAM gradient check",
            limit: secs(10),
            run: gradient_check,
        },
        Criterion {
            name: "Lovasz-Softmax oracle",
            limit: secs(5),
            run: lovasz_oracle_check,
        },
        Criterion {
            name: "synthetic adaptation benefit",
            limit: secs(300),
            run: adaptation_benefit,
        },
        Criterion {
            name: "statistics modulation",
            limit: secs(1),
            run: statistics_modulation,
        },
        Criterion {
            name: "CBST selection counts",
            limit: secs(1),
            run: cbst_counts,
        },
        Criterion {
            name: "metrics",
            limit: None,
            run: metrics_cases,
        },
        Criterion {
            name: "end-to-end determinism",
            limit: None,
            run: end_to_end_determinism,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let mut result = (c.run)();
        let took = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&result, c.limit) {
            if took > limit {
                result = Err(format!("{detail}; took {took:.2?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {} ({detail}) [{took:.2?}]", c.name),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {} ({why}) [{took:.2?}]", c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
