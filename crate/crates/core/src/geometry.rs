//! Point-cloud containers, rigid transforms, spherical range-image projection
//! and the point-cloud augmentations used for student training.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub type Point3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point {index} has zero range")]
    ZeroRange { index: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("intensity has {intensity} entries for {points} points")]
    IntensityLength { points: usize, intensity: usize },
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("invalid sensor config: {0}")]
    InvalidSensor(String),
    #[error("invalid augmentation spec: {0}")]
    InvalidAugmentation(String),
}

/// One LiDAR sweep in its own sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensity: Option<Vec<f64>>,
    pub frame_id: u32,
}

impl PointCloud {
    pub fn new(
        points: Vec<Point3>,
        intensity: Option<Vec<f64>>,
        frame_id: u32,
    ) -> Result<Self, GeometryError> {
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return Err(GeometryError::IntensityLength {
                    points: points.len(),
                    intensity: i.len(),
                });
            }
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self {
            points,
            intensity,
            frame_id,
        })
    }

    pub fn from_points(points: Vec<Point3>) -> Result<Self, GeometryError> {
        Self::new(points, None, 0)
    }

    pub fn empty(frame_id: u32) -> Self {
        Self {
            points: Vec::new(),
            intensity: None,
            frame_id,
        }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copy of the cloud with intensity removed.
    pub fn without_intensity(&self) -> Self {
        Self {
            points: self.points.clone(),
            intensity: None,
            frame_id: self.frame_id,
        }
    }

    /// Sub-cloud made of the given point indices, in the given order.
    pub fn select(&self, indices: &[u32]) -> Self {
        let points = indices.iter().map(|&i| self.points[i as usize]).collect();
        let intensity = self
            .intensity
            .as_ref()
            .map(|v| indices.iter().map(|&i| v[i as usize]).collect());
        Self {
            points,
            intensity,
            frame_id: self.frame_id,
        }
    }

    fn with_points(&self, points: Vec<Point3>) -> Self {
        Self {
            points,
            intensity: self.intensity.clone(),
            frame_id: self.frame_id,
        }
    }
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-6;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
            || ortho > ROTATION_TOL
            || (det - 1.0).abs() > ROTATION_TOL
        {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the z axis by `yaw` radians followed by a translation.
    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    /// Row-major 3x4 `[R | t]`, the layout of KITTI pose files.
    pub fn from_row_major_3x4(values: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// `compose(t1, t2)` applies `t2` first, then `t1`.
pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    cloud.with_points(cloud.points.iter().map(|p| t.apply_point(p)).collect())
}

/// Geometry of the spherical projection. Field-of-view values are in degrees;
/// `fov_down` is the positive magnitude of the below-horizon field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    pub height: u32,
    pub width: u32,
    pub fov_up: f64,
    pub fov_down: f64,
    pub beams: u32,
}

impl SensorConfig {
    pub fn new(
        height: u32,
        width: u32,
        fov_up: f64,
        fov_down: f64,
        beams: u32,
    ) -> Result<Self, GeometryError> {
        let cfg = Self {
            height,
            width,
            fov_up,
            fov_down,
            beams,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 64-beam HDL-64E style sensor (SemanticKITTI).
    pub fn hdl64() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_up: 3.0,
            fov_down: 25.0,
            beams: 64,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.height == 0 || self.width == 0 {
            return Err(GeometryError::InvalidSensor(
                "height and width must be >= 1".into(),
            ));
        }
        if self.beams == 0 {
            return Err(GeometryError::InvalidSensor("beams must be >= 1".into()));
        }
        let f = self.fov_up + self.fov_down;
        if !f.is_finite() || f <= 0.0 {
            return Err(GeometryError::InvalidSensor(
                "fov_up + fov_down must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_fov_rad(&self) -> f64 {
        (self.fov_up + self.fov_down).to_radians()
    }
}

/// Pixel `(u, v)` of a single point; `u` is the column, `v` the row.
///
/// The caller guarantees a finite, non-zero point.
#[inline]
pub fn pixel_of(p: &Point3, range: f64, config: &SensorConfig) -> (u32, u32) {
    let w = config.width as f64;
    let h = config.height as f64;
    let u = 0.5 * (1.0 - p.y.atan2(p.x) / PI) * w;
    let pitch = (p.z / range).asin();
    let v = (1.0 - (pitch + config.fov_down.to_radians()) / config.total_fov_rad()) * h;
    (clamp_floor(u, config.width), clamp_floor(v, config.height))
}

#[inline]
fn clamp_floor(x: f64, size: u32) -> u32 {
    let f = x.floor();
    if f < 0.0 {
        0
    } else if f >= size as f64 {
        size - 1
    } else {
        f as u32
    }
}

/// Spherical pixel assignment of every point of a scan. `points_of_pixel` is
/// stored in compressed row layout, pixels ordered row-major (`v * W + u`).
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImageIndex {
    pub height: u32,
    pub width: u32,
    pixel_of_point: Vec<(u32, u32)>,
    range_of_point: Vec<f64>,
    pixel_offsets: Vec<u32>,
    pixel_points: Vec<u32>,
}

impl RangeImageIndex {
    pub fn pixel_of_point(&self) -> &[(u32, u32)] {
        &self.pixel_of_point
    }

    pub fn range_of_point(&self) -> &[f64] {
        &self.range_of_point
    }

    pub fn row_of_point(&self, i: usize) -> u32 {
        self.pixel_of_point[i].1
    }

    pub fn points_of_pixel(&self, u: u32, v: u32) -> &[u32] {
        let p = (v * self.width + u) as usize;
        let (a, b) = (
            self.pixel_offsets[p] as usize,
            self.pixel_offsets[p + 1] as usize,
        );
        &self.pixel_points[a..b]
    }

    /// Points of one row, in ascending column order.
    pub fn points_of_row(&self, v: u32) -> &[u32] {
        let a = self.pixel_offsets[(v * self.width) as usize] as usize;
        let b = self.pixel_offsets[((v + 1) * self.width) as usize] as usize;
        &self.pixel_points[a..b]
    }

    pub fn len(&self) -> usize {
        self.pixel_of_point.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_of_point.is_empty()
    }
}

pub fn project_to_range_image(
    cloud: &PointCloud,
    config: &SensorConfig,
) -> Result<RangeImageIndex, GeometryError> {
    config.validate()?;
    let n = cloud.len();
    let mut pixel_of_point = Vec::with_capacity(n);
    let mut range_of_point = Vec::with_capacity(n);
    for (index, p) in cloud.points.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite { index });
        }
        let range = p.norm();
        if range == 0.0 {
            return Err(GeometryError::ZeroRange { index });
        }
        pixel_of_point.push(pixel_of(p, range, config));
        range_of_point.push(range);
    }

    let pixels = (config.height * config.width) as usize;
    let mut counts = vec![0u32; pixels + 1];
    for &(u, v) in &pixel_of_point {
        counts[(v * config.width + u) as usize + 1] += 1;
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let pixel_offsets = counts.clone();
    let mut cursor = counts;
    let mut pixel_points = vec![0u32; n];
    for (i, &(u, v)) in pixel_of_point.iter().enumerate() {
        let slot = &mut cursor[(v * config.width + u) as usize];
        pixel_points[*slot as usize] = i as u32;
        *slot += 1;
    }

    Ok(RangeImageIndex {
        height: config.height,
        width: config.width,
        pixel_of_point,
        range_of_point,
        pixel_offsets,
        pixel_points,
    })
}

/// Ranges of the four random augmentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    /// Degrees, symmetric about zero.
    pub rotation_range: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub scale_range: (f64, f64),
    /// Meters.
    pub translation_sigma: f64,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            rotation_range: 0.0,
            flip_x: false,
            flip_y: false,
            scale_range: (1.0, 1.0),
            translation_sigma: 0.0,
        }
    }

    pub fn basic() -> Self {
        Self {
            rotation_range: 45.0,
            flip_x: true,
            flip_y: true,
            scale_range: (0.95, 1.05),
            translation_sigma: 0.1,
        }
    }

    pub fn intense() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            translation_sigma: 0.5,
            ..Self::basic()
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || hi <= 0.0 || lo <= 0.0 {
            return Err(GeometryError::InvalidAugmentation(format!(
                "scale range [{lo}, {hi}] must be a nonempty positive interval"
            )));
        }
        if !(self.rotation_range >= 0.0) || !self.rotation_range.is_finite() {
            return Err(GeometryError::InvalidAugmentation(
                "rotation range must be >= 0".into(),
            ));
        }
        if !(self.translation_sigma >= 0.0) || !self.translation_sigma.is_finite() {
            return Err(GeometryError::InvalidAugmentation(
                "translation sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Rotate about z, flip, scale, then translate. The random draws are always
/// made in the same order so equal seeds give equal clouds.
pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<PointCloud, GeometryError> {
    spec.validate()?;
    let angle = uniform(rng, -spec.rotation_range, spec.rotation_range).to_radians();
    let flip_x = spec.flip_x && rng.random_bool(0.5);
    let flip_y = spec.flip_y && rng.random_bool(0.5);
    let scale = uniform(rng, spec.scale_range.0, spec.scale_range.1);
    let shift = if spec.translation_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.translation_sigma).expect("sigma validated");
        Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
    } else {
        Vector3::zeros()
    };

    let (s, c) = angle.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z);
            if flip_x {
                q.x = -q.x;
            }
            if flip_y {
                q.y = -q.y;
            }
            q * scale + shift
        })
        .collect();
    Ok(cloud.with_points(points))
}
