//! Spherical projection between point clouds and range images, and the
//! depth compression that maps range images into the model's `[-1, 1]` space.
//!
//! Pixel coordinates follow
//!
//! ```text
//! u = ½·(1 − atan2(y, x)/π)·W
//! v = (1 − (asin(z/d) − f_down)/(f_up − f_down))·H
//! ```
//!
//! with columns wrapping modulo `W` and rows clamped to `[0, H−1]`.

use std::f64::consts::PI;

use crate::cloud::{Point, PointCloud};
use crate::error::{bail, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    /// Upper elevation limit, radians.
    pub fov_up: f64,
    /// Lower elevation limit, radians.
    pub fov_down: f64,
    /// Maximum measurable range, meters.
    pub max_depth: f64,
}

impl SensorConfig {
    pub const DEFAULT_MAX_DEPTH: f64 = 80.0;

    pub fn new(height: usize, width: usize, fov_up_deg: f64, fov_down_deg: f64, max_depth: f64) -> Result<Self> {
        let cfg = Self {
            height,
            width,
            fov_up: fov_up_deg.to_radians(),
            fov_down: fov_down_deg.to_radians(),
            max_depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 32×1024, elevation (−30°, 10°).
    pub fn nuscenes() -> Self {
        Self::new(32, 1024, 10.0, -30.0, Self::DEFAULT_MAX_DEPTH).unwrap()
    }

    /// 64×1024, elevation (−25°, 3°).
    pub fn kitti() -> Self {
        Self::new(64, 1024, 3.0, -25.0, Self::DEFAULT_MAX_DEPTH).unwrap()
    }

    /// Small grid with the nuScenes field of view.
    pub fn toy(height: usize, width: usize) -> Self {
        Self::new(height, width, 10.0, -30.0, Self::DEFAULT_MAX_DEPTH).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            bail!(Config, "sensor grid must be at least 1x1, got {}x{}", self.height, self.width);
        }
        if !(self.fov_up > self.fov_down) {
            bail!(Config, "fov_up ({}) must exceed fov_down ({})", self.fov_up, self.fov_down);
        }
        if !(self.max_depth > 0.0) || !self.max_depth.is_finite() {
            bail!(Config, "max_depth must be positive, got {}", self.max_depth);
        }
        Ok(())
    }

    pub fn fov(&self) -> f64 {
        self.fov_up - self.fov_down
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Angular size of one column, radians.
    pub fn azimuth_pitch(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Angular size of one row, radians.
    pub fn elevation_pitch(&self) -> f64 {
        self.fov() / self.height as f64
    }

    /// Continuous `(u, v)` for a direction.
    pub fn pixel_coords(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        let d = (x * x + y * y + z * z).sqrt();
        let u = 0.5 * (1.0 - y.atan2(x) / PI) * self.width as f64;
        let v = (1.0 - ((z / d).asin() - self.fov_down) / self.fov()) * self.height as f64;
        (u, v)
    }

    /// Azimuth and elevation of the ray through the center of pixel `(row, col)`.
    pub fn pixel_center_angles(&self, row: usize, col: usize) -> (f64, f64) {
        // pixel centers sit half a pitch inside the cell
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        let azimuth = PI * (1.0 - 2.0 * u / self.width as f64);
        let elevation = self.fov_down + (1.0 - v / self.height as f64) * self.fov();
        (azimuth, elevation)
    }

    /// Unit direction of the pixel-center ray.
    pub fn pixel_ray(&self, row: usize, col: usize) -> [f64; 3] {
        let (az, el) = self.pixel_center_angles(row, col);
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }
}

/// Depth/intensity grid with a validity mask, row-major `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage<T> {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<T>,
    pub intensity: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> RangeImage<T> {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![T::zero(); n],
            intensity: vec![T::zero(); n],
            mask: vec![false; n],
        }
    }

    pub fn for_sensor(cfg: &SensorConfig) -> Self {
        Self::empty(cfg.height, cfg.width)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cast<U: Real>(&self) -> RangeImage<U> {
        RangeImage {
            height: self.height,
            width: self.width,
            depth: crate::scalar::cast_slice(&self.depth),
            intensity: crate::scalar::cast_slice(&self.intensity),
            mask: self.mask.clone(),
        }
    }

    fn check_dims(&self, cfg: &SensorConfig) -> Result<()> {
        if self.height != cfg.height || self.width != cfg.width {
            bail!(Shape, "range image is {}x{}, sensor is {}x{}", self.height, self.width, cfg.height, cfg.width);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub projected: usize,
    pub dropped_fov: usize,
    pub dropped_range: usize,
    /// Points that lost a pixel to a nearer return.
    pub occluded: usize,
}

/// Project a cloud into a range image; on collisions the nearest return wins.
pub fn project_points<T: Real>(cloud: &PointCloud<T>, cfg: &SensorConfig) -> (RangeImage<T>, ProjectionStats) {
    let mut img = RangeImage::for_sensor(cfg);
    let mut stats = ProjectionStats::default();
    let h = cfg.height as i64;
    let w = cfg.width as i64;
    for p in &cloud.points {
        let [x, y, z] = p.xyz_f64();
        let d = (x * x + y * y + z * z).sqrt();
        if !(d > 0.0) || d > cfg.max_depth {
            stats.dropped_range += 1;
            continue;
        }
        let elevation = (z / d).asin();
        if elevation < cfg.fov_down || elevation > cfg.fov_up {
            stats.dropped_fov += 1;
            continue;
        }
        let (u, v) = cfg.pixel_coords(x, y, z);
        let col = (u.floor() as i64).rem_euclid(w) as usize;
        let row = (v.floor() as i64).clamp(0, h - 1) as usize;
        let idx = img.index(row, col);
        let depth = T::c(d);
        if img.mask[idx] {
            stats.occluded += 1;
            if depth >= img.depth[idx] {
                continue;
            }
        } else {
            stats.projected += 1;
        }
        img.mask[idx] = true;
        img.depth[idx] = depth;
        img.intensity[idx] = p.intensity;
    }
    (img, stats)
}

/// One point per valid pixel, on the pixel-center ray at the stored depth.
pub fn unproject<T: Real>(img: &RangeImage<T>, cfg: &SensorConfig) -> Result<PointCloud<T>> {
    img.check_dims(cfg)?;
    let mut points = Vec::with_capacity(img.valid_count());
    for row in 0..img.height {
        for col in 0..img.width {
            let idx = img.index(row, col);
            if !img.mask[idx] {
                continue;
            }
            let d = img.depth[idx].f64();
            let [dx, dy, dz] = cfg.pixel_ray(row, col);
            points.push(Point::new(T::c(d * dx), T::c(d * dy), T::c(d * dz), img.intensity[idx]));
        }
    }
    Ok(PointCloud::new(points))
}

/// Logarithmic depth compression to `[0, 1]`.
pub fn compress_depth<T: Real>(depth: T, max_depth: f64) -> T {
    (depth + T::one()).log2() / T::c((max_depth + 1.0).log2())
}

pub fn expand_depth<T: Real>(normalized: T, max_depth: f64) -> T {
    (normalized * T::c((max_depth + 1.0).log2())).exp2() - T::one()
}

/// Encode to model space: channel-major `[depth; intensity]`, each `H·W`,
/// values in `[-1, 1]`. Invalid pixels take −1, the encoding of a zero depth.
pub fn encode_model_input<T: Real>(img: &RangeImage<T>, cfg: &SensorConfig) -> Result<Vec<T>> {
    img.check_dims(cfg)?;
    let n = img.height * img.width;
    let two = T::c(2.0);
    let mut out = vec![-T::one(); 2 * n];
    for i in 0..n {
        if !img.mask[i] {
            continue;
        }
        let d = img.depth[i];
        if d.f64() > cfg.max_depth || d < T::zero() {
            bail!(Range, "depth {} outside [0, {}] at pixel {}", d, cfg.max_depth, i);
        }
        out[i] = two * compress_depth(d, cfg.max_depth) - T::one();
        out[n + i] = two * img.intensity[i] - T::one();
    }
    Ok(out)
}

/// Inverse of [`encode_model_input`] over the pixels selected by `mask`.
/// Values are clamped to `[-1, 1]` before expansion.
pub fn decode_model_output<T: Real>(tensor: &[T], mask: &[bool], cfg: &SensorConfig) -> Result<RangeImage<T>> {
    let n = cfg.pixels();
    if tensor.len() != 2 * n || mask.len() != n {
        bail!(Shape, "expected {} model values and {} mask bits, got {} and {}", 2 * n, n, tensor.len(), mask.len());
    }
    let mut img = RangeImage::for_sensor(cfg);
    let half = T::c(0.5);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let xd = tensor[i].max(-T::one()).min(T::one());
        let xi = tensor[n + i].max(-T::one()).min(T::one());
        let d = expand_depth((xd + T::one()) * half, cfg.max_depth);
        img.depth[i] = d.min(T::c(cfg.max_depth));
        img.intensity[i] = (xi + T::one()) * half;
        img.mask[i] = true;
    }
    Ok(img)
}

/// Validity mask for a generated model-space tensor: a pixel is a return when
/// its decoded depth reaches `min_depth` meters.
pub fn infer_mask<T: Real>(tensor: &[T], cfg: &SensorConfig, min_depth: f64) -> Vec<bool> {
    let n = cfg.pixels();
    let threshold = 2.0 * compress_depth(min_depth, cfg.max_depth) - 1.0;
    tensor[..n].iter().map(|v| v.f64() >= threshold).collect()
}
