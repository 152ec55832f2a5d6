//! Deterministic synthetic LiDAR sequences: a flat ground patch, axis-aligned
//! boxes (moving) and square poles (static), ray-cast along the pixel-center
//! rays of a [`SensorConfig`] so every synthesized point projects back onto
//! its own pixel.
//!
//! Each point carries a class label, an instance id, its distance to the
//! nearest object boundary, and synthetic segmentation logits whose margin
//! shrinks near boundaries and at long range.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cloud::{Point, PointCloud};
use crate::error::{bail, Result};
use crate::geometry::SensorConfig;
use crate::io::Matrix32;
use crate::rigid::RigidTransform;
use crate::seed::rng_from_seed;

pub const CLASS_GROUND: u8 = 0;
pub const CLASS_BOX: u8 = 1;
pub const CLASS_POLE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_boxes: usize,
    pub n_poles: usize,
    pub n_frames: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
    pub ego_speed: (f64, f64),
    /// rad/s
    pub ego_yaw_rate: (f64, f64),
    pub box_speed: (f64, f64),
    /// Spawn distance of boxes from the first ego position.
    pub box_range: (f64, f64),
    pub pole_range: (f64, f64),
    /// Half-width of the square ground patch, meters.
    pub ground_extent: f64,
    pub sensor_height: f64,
    pub sensor: SensorConfig,
    /// Number of logit classes (≥ 3).
    pub n_classes: usize,
    /// Width of the ambiguous band around object boundaries, meters.
    pub boundary_band: f64,
    /// Range beyond which logits start losing confidence, meters.
    pub ambiguity_range: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_boxes: 3,
            n_poles: 2,
            n_frames: 6,
            frame_dt: 0.1,
            ego_speed: (3.0, 6.0),
            ego_yaw_rate: (-0.1, 0.1),
            box_speed: (0.0, 3.0),
            box_range: (6.0, 14.0),
            pole_range: (5.0, 20.0),
            ground_extent: 40.0,
            sensor_height: 1.8,
            sensor: SensorConfig::nuscenes(),
            n_classes: 4,
            boundary_band: 0.5,
            ambiguity_range: 30.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if self.n_frames == 0 {
            bail!(Config, "n_frames must be at least 1");
        }
        if !(self.ground_extent > 0.0) {
            bail!(Config, "ground extent must be positive, got {}", self.ground_extent);
        }
        if !(self.sensor_height > 0.0) || !(self.frame_dt > 0.0) {
            bail!(Config, "sensor height and frame interval must be positive");
        }
        if self.n_classes < 3 {
            bail!(Config, "need at least 3 classes (ground, box, pole), got {}", self.n_classes);
        }
        for (name, (lo, hi)) in [
            ("ego_speed", self.ego_speed),
            ("ego_yaw_rate", self.ego_yaw_rate),
            ("box_speed", self.box_speed),
            ("box_range", self.box_range),
            ("pole_range", self.pole_range),
        ] {
            if !(lo <= hi) {
                bail!(Config, "{} range is empty: ({}, {})", name, lo, hi);
            }
        }
        if !(self.boundary_band > 0.0) {
            bail!(Config, "boundary band must be positive");
        }
        Ok(())
    }
}

/// One synthesized window of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<PointCloud<f32>>,
    /// world ← sensor, one per frame.
    pub ego_poses: Vec<RigidTransform>,
    pub labels: Option<Vec<Vec<u8>>>,
    pub logits: Option<Vec<Matrix32>>,
    /// 0 for ground, `1..=n_boxes` for boxes, then poles.
    pub instances: Vec<Vec<u16>>,
    /// Distance from each point to the nearest object boundary, meters.
    pub boundary_distance: Vec<Vec<f32>>,
}

impl SequenceSample {
    /// Transform mapping frame `t` sensor coordinates to frame `t+1`.
    pub fn relative_motion(&self, t: usize) -> RigidTransform {
        self.ego_poses[t + 1].inverse().compose(&self.ego_poses[t])
    }

    pub fn is_static_class(label: u8) -> bool {
        label == CLASS_GROUND || label == CLASS_POLE
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    fn shifted(&self, dx: f64, dy: f64) -> Aabb {
        Aabb {
            lo: [self.lo[0] + dx, self.lo[1] + dy, self.lo[2]],
            hi: [self.hi[0] + dx, self.hi[1] + dy, self.hi[2]],
        }
    }

    /// Entry distance of a ray, if it hits in front of the origin.
    fn ray_entry(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.lo[a] - o[a]) * inv, (self.hi[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }

    /// Distance from a surface point to the nearest edge of the face it lies on.
    fn edge_distance(&self, p: [f64; 3]) -> f64 {
        // the face is the axis where p touches lo or hi
        let mut face = 0;
        let mut best = f64::INFINITY;
        for a in 0..3 {
            let gap = (p[a] - self.lo[a]).abs().min((p[a] - self.hi[a]).abs());
            if gap < best {
                best = gap;
                face = a;
            }
        }
        (0..3)
            .filter(|&a| a != face)
            .map(|a| (p[a] - self.lo[a]).min(self.hi[a] - p[a]).max(0.0))
            .fold(f64::INFINITY, f64::min)
    }

    fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.lo[0] - x).max(0.0).max(x - self.hi[0]);
        let dy = (self.lo[1] - y).max(0.0).max(y - self.hi[1]);
        (dx * dx + dy * dy).sqrt()
    }
}

struct Actor {
    shape: Aabb,
    velocity: [f64; 2],
    class: u8,
    instance: u16,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn ego_pose(t: f64, speed: f64, yaw_rate: f64, height: f64) -> RigidTransform {
    let heading = yaw_rate * t;
    let (x, y) = if yaw_rate.abs() < 1e-12 {
        (speed * t, 0.0)
    } else {
        let r = speed / yaw_rate;
        (r * heading.sin(), r * (1.0 - heading.cos()))
    };
    RigidTransform::from_yaw(heading, [x, y, height])
}

/// Generate a sequence; a pure function of `(config, seed)`.
pub fn synth_world(cfg: &SynthConfig, seed: u64) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let speed = uniform(&mut rng, cfg.ego_speed);
    let yaw_rate = uniform(&mut rng, cfg.ego_yaw_rate);

    let mut actors = Vec::with_capacity(cfg.n_boxes + cfg.n_poles);
    let sector = 2.0 * std::f64::consts::PI / cfg.n_boxes.max(1) as f64;
    for i in 0..cfg.n_boxes {
        let azimuth = sector * (i as f64 + 0.5) + uniform(&mut rng, (-0.15 * sector, 0.15 * sector));
        let range = uniform(&mut rng, cfg.box_range);
        let (len, wid, hgt) = (uniform(&mut rng, (3.0, 4.5)), uniform(&mut rng, (1.6, 2.0)), uniform(&mut rng, (1.4, 2.0)));
        let (cx, cy) = (range * azimuth.cos(), range * azimuth.sin());
        let v = uniform(&mut rng, cfg.box_speed);
        actors.push(Actor {
            shape: Aabb { lo: [cx - len / 2.0, cy - wid / 2.0, 0.0], hi: [cx + len / 2.0, cy + wid / 2.0, hgt] },
            velocity: [v, 0.0],
            class: CLASS_BOX,
            instance: (i + 1) as u16,
        });
    }
    let pole_sector = 2.0 * std::f64::consts::PI / cfg.n_poles.max(1) as f64;
    for i in 0..cfg.n_poles {
        let azimuth = pole_sector * i as f64 + uniform(&mut rng, (-0.1, 0.1));
        let range = uniform(&mut rng, cfg.pole_range);
        let (cx, cy) = (range * azimuth.cos(), range * azimuth.sin());
        actors.push(Actor {
            shape: Aabb { lo: [cx - 0.15, cy - 0.15, 0.0], hi: [cx + 0.15, cy + 0.15, 4.0] },
            velocity: [0.0, 0.0],
            class: CLASS_POLE,
            instance: (cfg.n_boxes + i + 1) as u16,
        });
    }

    let sensor = &cfg.sensor;
    let rays: Vec<[f64; 3]> = (0..sensor.height)
        .flat_map(|r| (0..sensor.width).map(move |c| (r, c)))
        .map(|(r, c)| sensor.pixel_ray(r, c))
        .collect();

    let mut sample = SequenceSample {
        frames: Vec::with_capacity(cfg.n_frames),
        ego_poses: Vec::with_capacity(cfg.n_frames),
        labels: Some(Vec::with_capacity(cfg.n_frames)),
        logits: Some(Vec::with_capacity(cfg.n_frames)),
        instances: Vec::with_capacity(cfg.n_frames),
        boundary_distance: Vec::with_capacity(cfg.n_frames),
    };

    for f in 0..cfg.n_frames {
        let t = f as f64 * cfg.frame_dt;
        let pose = ego_pose(t, speed, yaw_rate, cfg.sensor_height);
        let boxes: Vec<Aabb> = actors.iter().map(|a| a.shape.shifted(a.velocity[0] * t, a.velocity[1] * t)).collect();
        let origin = [pose.translation.x, pose.translation.y, pose.translation.z];

        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut instances = Vec::new();
        let mut boundary = Vec::new();
        let mut logits = Vec::new();
        for ray in &rays {
            let dir = pose.rotation * nalgebra::Vector3::from(*ray);
            let d = [dir.x, dir.y, dir.z];
            let mut hit: Option<(f64, usize)> = None;
            if d[2] < 0.0 {
                let s = -origin[2] / d[2];
                let gx = origin[0] + s * d[0];
                let gy = origin[1] + s * d[1];
                if gx.abs() <= cfg.ground_extent && gy.abs() <= cfg.ground_extent {
                    hit = Some((s, usize::MAX));
                }
            }
            for (k, b) in boxes.iter().enumerate() {
                if let Some(s) = b.ray_entry(origin, d) {
                    if hit.is_none_or(|(best, _)| s < best) {
                        hit = Some((s, k));
                    }
                }
            }
            let Some((s, who)) = hit else { continue };
            if s > sensor.max_depth {
                continue;
            }
            let world = [origin[0] + s * d[0], origin[1] + s * d[1], origin[2] + s * d[2]];
            let (class, instance, dist) = if who == usize::MAX {
                let dist = boxes.iter().map(|b| b.footprint_distance(world[0], world[1])).fold(f64::INFINITY, f64::min);
                (CLASS_GROUND, 0u16, dist)
            } else {
                (actors[who].class, actors[who].instance, boxes[who].edge_distance(world))
            };
            let base_intensity = match class {
                CLASS_GROUND => 0.2,
                CLASS_BOX => 0.6,
                _ => 0.8,
            };
            let noise: f64 = rng.sample(StandardNormal);
            let intensity = (base_intensity + 0.05 * noise).clamp(0.0, 1.0);
            points.push(Point::new((s * ray[0]) as f32, (s * ray[1]) as f32, (s * ray[2]) as f32, intensity as f32));

            let near_boundary = (1.0 - dist / cfg.boundary_band).clamp(0.0, 1.0);
            let far = ((s - cfg.ambiguity_range) / (sensor.max_depth - cfg.ambiguity_range).max(1e-9)).clamp(0.0, 1.0);
            let ambiguity = near_boundary.max(far);
            let margin = 6.0 * (1.0 - ambiguity);
            let confuser = ((class as usize) + 1) % 3;
            for c in 0..cfg.n_classes {
                let jitter: f64 = rng.sample(StandardNormal);
                let base = if c == class as usize {
                    margin
                } else if c == confuser {
                    0.0
                } else {
                    -2.0
                };
                logits.push((base + 0.3 * jitter) as f32);
            }
            labels.push(class);
            instances.push(instance);
            boundary.push(dist as f32);
        }
        let n = points.len();
        sample.frames.push(PointCloud::new(points));
        sample.ego_poses.push(pose);
        sample.labels.as_mut().unwrap().push(labels);
        sample.logits.as_mut().unwrap().push(Matrix32 { rows: n, cols: cfg.n_classes, data: logits });
        sample.instances.push(instances);
        sample.boundary_distance.push(boundary);
    }
    Ok(sample)
}

/// `n` points sampled uniformly on the surfaces of a small static scene:
/// a 20 m ground patch, four boxes and a pole, without a scan pattern.
pub fn surface_scene(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng_from_seed(seed);
    let boxes: Vec<([f64; 2], [f64; 3])> = (0..4)
        .map(|_| {
            let c = [r.random_range(-8.0..8.0), r.random_range(-8.0..8.0)];
            let s = [r.random_range(1.0..4.0), r.random_range(1.0..3.0), r.random_range(1.0..2.5)];
            (c, s)
        })
        .collect();
    let pole = [r.random_range(-8.0..8.0), r.random_range(-8.0..8.0)];
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let k = r.random_range(0..10);
        if k < 3 {
            pts.push([r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), 0.0]);
        } else if k < 9 {
            let (c, s) = boxes[r.random_range(0..4)];
            let (u, v) = (r.random_range(-0.5..0.5), r.random_range(-0.5..0.5));
            pts.push(match r.random_range(0..5) {
                0 => [c[0] + 0.5 * s[0], c[1] + u * s[1], (v + 0.5) * s[2]],
                1 => [c[0] - 0.5 * s[0], c[1] + u * s[1], (v + 0.5) * s[2]],
                2 => [c[0] + u * s[0], c[1] + 0.5 * s[1], (v + 0.5) * s[2]],
                3 => [c[0] + u * s[0], c[1] - 0.5 * s[1], (v + 0.5) * s[2]],
                _ => [c[0] + u * s[0], c[1] + v * s[1], s[2]],
            });
        } else {
            let a = r.random_range(0.0..std::f64::consts::TAU);
            pts.push([pole[0] + 0.15 * a.cos(), pole[1] + 0.15 * a.sin(), r.random_range(0.0..4.0)]);
        }
    }
    pts
}
