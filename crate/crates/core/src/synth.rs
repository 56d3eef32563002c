//! Ray-cast synthetic driving sequences: a flat ground plane with poles and
//! box-shaped buildings, scanned by a spinning multi-beam sensor that drives
//! along a gently curving path. Ground truth is a height class in the world
//! frame: ground, low (below `low_height`), high.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{Point3, PointCloud, RigidTransform, SensorConfig};
use crate::io::{self, FormatError};
use crate::selftrain::{derive_seed, MockRule, Sequence};

pub const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub frames: usize,
    /// Meters traveled per frame.
    pub speed: f64,
    /// Heading change per frame, radians.
    pub yaw_rate: f64,
    pub mount_height: f64,
    pub beams: u32,
    pub columns: u32,
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
    /// Standard deviation of range noise, meters.
    pub range_noise: f64,
    /// Height above ground separating ground from low objects.
    pub ground_height: f64,
    /// Height separating low from high structure.
    pub low_height: f64,
    pub poles: usize,
    pub buildings: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            speed: 1.0,
            yaw_rate: 0.01,
            mount_height: 1.7,
            beams: 32,
            columns: 360,
            fov_up: 3.0,
            fov_down: 25.0,
            max_range: 40.0,
            range_noise: 0.01,
            ground_height: 0.2,
            low_height: 2.0,
            poles: 30,
            buildings: 12,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Range-image geometry matching the simulated beams.
    pub fn sensor(&self) -> SensorConfig {
        SensorConfig {
            height: self.beams,
            width: self.columns,
            fov_up: self.fov_up,
            fov_down: self.fov_down,
            beams: self.beams,
        }
    }

    /// The labeling rule that reproduces the ground truth in sensor
    /// coordinates (valid because the sensor never rolls or pitches).
    pub fn truth_rule(&self) -> MockRule {
        MockRule::HeightThreshold(vec![
            self.ground_height - self.mount_height,
            self.low_height - self.mount_height,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Obstacle {
    Cylinder {
        center: (f64, f64),
        radius: f64,
        height: f64,
    },
    Box {
        min: Point3,
        max: Point3,
    },
}

impl Obstacle {
    /// Smallest positive hit distance along a unit ray.
    fn hit(&self, o: &Point3, d: &Point3) -> Option<f64> {
        match *self {
            Obstacle::Cylinder {
                center,
                radius,
                height,
            } => {
                let (px, py) = (o.x - center.0, o.y - center.1);
                let a = d.x * d.x + d.y * d.y;
                if a < 1e-12 {
                    return None;
                }
                let b = 2.0 * (px * d.x + py * d.y);
                let c = px * px + py * py - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let z = o.z + t * d.z;
                (t > 1e-6 && (0.0..=height).contains(&z)).then_some(t)
            }
            Obstacle::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for axis in 0..3 {
                    if d[axis].abs() < 1e-12 {
                        if o[axis] < min[axis] || o[axis] > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[axis] - o[axis]) / d[axis];
                    let b = (max[axis] - o[axis]) / d[axis];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > 1e-6).then_some(t0)
            }
        }
    }
}

/// A generated sequence with per-point ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub sequence: Sequence,
    pub labels: Vec<Vec<u32>>,
    pub config: SceneConfig,
}

fn sensor_path(config: &SceneConfig) -> Vec<RigidTransform> {
    let mut poses = Vec::with_capacity(config.frames);
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..config.frames {
        poses.push(RigidTransform::from_yaw_translation(
            yaw,
            Point3::new(x, y, config.mount_height),
        ));
        x += config.speed * yaw.cos();
        y += config.speed * yaw.sin();
        yaw += config.yaw_rate;
    }
    poses
}

fn place_obstacles(config: &SceneConfig, path: &[RigidTransform]) -> Vec<Obstacle> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let along = config.frames as f64 * config.speed;
    let reach = config.max_range;
    let anchor = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(-reach..along + reach);
        let i = ((s / config.speed.max(1e-9)).floor().max(0.0) as usize)
            .min(path.len().saturating_sub(1));
        let pose = path
            .get(i)
            .copied()
            .unwrap_or_else(RigidTransform::identity);
        let extra = s - i as f64 * config.speed;
        (pose, extra)
    };
    let mut out = Vec::new();
    for _ in 0..config.poles {
        let (pose, extra) = anchor(&mut rng);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.random_range(3.5..9.0);
        let p = pose.apply_point(&Point3::new(extra, lateral, 0.0));
        out.push(Obstacle::Cylinder {
            center: (p.x, p.y),
            radius: rng.random_range(0.15..0.4),
            height: rng.random_range(1.0..6.0),
        });
    }
    for _ in 0..config.buildings {
        let (pose, extra) = anchor(&mut rng);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.random_range(11.0..16.0);
        let c = pose.apply_point(&Point3::new(extra, lateral, 0.0));
        let (hx, hy) = (rng.random_range(2.0..6.0), rng.random_range(2.0..5.0));
        let height = rng.random_range(1.2..8.0);
        out.push(Obstacle::Box {
            min: Point3::new(c.x - hx, c.y - hy, 0.0),
            max: Point3::new(c.x + hx, c.y + hy, height),
        });
    }
    out
}

/// Casts every beam of one frame; returns sensor-frame points and truth.
fn scan_frame(
    config: &SceneConfig,
    pose: &RigidTransform,
    obstacles: &[Obstacle],
    frame: usize,
) -> (PointCloud, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, frame as u64));
    let noise = Normal::new(0.0, config.range_noise.max(0.0)).expect("finite sigma");
    let origin = *pose.translation();
    let fov = config.fov_up + config.fov_down;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    for v in 0..config.beams {
        let pitch = (config.fov_up - (v as f64 + 0.5) * fov / config.beams as f64).to_radians();
        for u in 0..config.columns {
            let yaw = PI * (1.0 - 2.0 * (u as f64 + 0.5) / config.columns as f64);
            let local = Point3::new(
                pitch.cos() * yaw.cos(),
                pitch.cos() * yaw.sin(),
                pitch.sin(),
            );
            let dir = pose.rotation() * local;
            let mut best = if dir.z < -1e-9 {
                -origin.z / dir.z
            } else {
                f64::INFINITY
            };
            for o in obstacles {
                if let Some(t) = o.hit(&origin, &dir) {
                    best = best.min(t);
                }
            }
            let jitter = noise.sample(&mut rng);
            if !(best <= config.max_range) {
                continue;
            }
            let hit = origin + dir * best;
            let class = if hit.z < config.ground_height {
                0
            } else if hit.z < config.low_height {
                1
            } else {
                2
            };
            points.push(local * (best + jitter));
            intensity.push(
                (1.0 - best / config.max_range).clamp(0.0, 1.0) * (0.5 + 0.25 * class as f64),
            );
            labels.push(class);
        }
    }
    let cloud = PointCloud::new(points, Some(intensity), frame as u32)
        .expect("ray hits are finite and nonzero");
    (cloud, labels)
}

/// Generates the sequence; frames are ray-cast in parallel, each from its
/// own seeded stream.
pub fn generate(config: &SceneConfig) -> SyntheticSequence {
    let poses = sensor_path(config);
    let obstacles = place_obstacles(config, &poses);
    let frames: Vec<(PointCloud, Vec<u32>)> = (0..config.frames)
        .into_par_iter()
        .map(|i| scan_frame(config, &poses[i], &obstacles, i))
        .collect();
    let (scans, labels) = frames.into_iter().unzip();
    SyntheticSequence {
        sequence: Sequence { scans, poses },
        labels,
        config: config.clone(),
    }
}

/// Writes `velodyne/NNNNNN.bin`, `labels/NNNNNN.label` and `poses.txt`.
pub fn write_sequence(dir: &Path, data: &SyntheticSequence) -> Result<(), FormatError> {
    for (i, (scan, labels)) in data.sequence.scans.iter().zip(&data.labels).enumerate() {
        io::write_scan(&dir.join("velodyne").join(format!("{i:06}.bin")), scan)?;
        io::write_labels(&dir.join("labels").join(format!("{i:06}.label")), labels)?;
    }
    io::write_atomic(
        &dir.join("poses.txt"),
        io::format_poses(&data.sequence.poses).as_bytes(),
    )
}
