//! File formats.
//!
//! Point file (`.bin`), little-endian `f32` quadruples:
//! ```text
//! ┌───────┬───────┬───────┬───────────┐
//! │ x:f32 │ y:f32 │ z:f32 │ intensity │  × N
//! └───────┴───────┴───────┴───────────┘
//! ```
//!
//! Range container (`.u4dr`): `"U4DR"`, `version:u16`, `L:u16`, `H:u16`,
//! `W:u16`, then `L` frames of `[depth; intensity]` as row-major `f32` planes,
//! then `L·H·W` mask bytes.
//!
//! Matrix file (`.lgt`, logits and feature sets): `N:u32`, `C:u32`, then
//! `N·C` little-endian `f32`, row-major.

use std::fs;
use std::path::Path;

use crate::cloud::{Point, PointCloud};
use crate::error::{bail, Result};
use crate::geometry::RangeImage;

pub const POINT_RECORD_BYTES: usize = 16;
pub const RANGE_MAGIC: &[u8; 4] = b"U4DR";
pub const RANGE_VERSION: u16 = 1;
pub const RANGE_HEADER_BYTES: usize = 12;
pub const MATRIX_HEADER_BYTES: usize = 8;

#[inline]
fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

#[inline]
fn u16_at(bytes: &[u8], offset: usize) -> u16 {
    u16::from_le_bytes(bytes[offset..offset + 2].try_into().unwrap())
}

#[inline]
fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode_point_bin(bytes: &[u8]) -> Result<PointCloud<f32>> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        bail!(MalformedFile, "point file length {} is not a multiple of {}", bytes.len(), POINT_RECORD_BYTES);
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let v = [f32_at(rec, 0), f32_at(rec, 4), f32_at(rec, 8), f32_at(rec, 12)];
        if v.iter().any(|x| !x.is_finite()) {
            bail!(CorruptData, "non-finite value in point {}", i);
        }
        points.push(Point::new(v[0], v[1], v[2], v[3].clamp(0.0, 1.0)));
    }
    Ok(PointCloud::new(points))
}

pub fn encode_point_bin(cloud: &PointCloud<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_point_bin(path: impl AsRef<Path>) -> Result<PointCloud<f32>> {
    decode_point_bin(&fs::read(path)?)
}

pub fn write_point_bin(cloud: &PointCloud<f32>, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_point_bin(cloud);
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

/// A sequence of range images sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSequence {
    pub frames: Vec<RangeImage<f32>>,
}

impl RangeSequence {
    pub fn new(frames: Vec<RangeImage<f32>>) -> Self {
        Self { frames }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        match self.frames.first() {
            Some(f) => (self.frames.len(), f.height, f.width),
            None => (0, 0, 0),
        }
    }
}

pub fn encode_range_container(seq: &RangeSequence) -> Result<Vec<u8>> {
    let (l, h, w) = seq.dims();
    for (name, d) in [("L", l), ("H", h), ("W", w)] {
        if d > u16::MAX as usize {
            bail!(Range, "{} = {} exceeds 65535", name, d);
        }
    }
    let n = h * w;
    let mut out = Vec::with_capacity(RANGE_HEADER_BYTES + l * n * 9);
    out.extend_from_slice(RANGE_MAGIC);
    out.extend_from_slice(&RANGE_VERSION.to_le_bytes());
    for d in [l, h, w] {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for frame in &seq.frames {
        if frame.height != h || frame.width != w {
            bail!(Shape, "frame is {}x{}, sequence is {}x{}", frame.height, frame.width, h, w);
        }
        for plane in [&frame.depth, &frame.intensity] {
            for v in plane.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for frame in &seq.frames {
        out.extend(frame.mask.iter().map(|&m| m as u8));
    }
    Ok(out)
}

pub fn decode_range_container(bytes: &[u8]) -> Result<RangeSequence> {
    if bytes.len() < RANGE_HEADER_BYTES {
        bail!(Length, "container shorter than its {}-byte header", RANGE_HEADER_BYTES);
    }
    if &bytes[0..4] != RANGE_MAGIC {
        bail!(Format, "bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]));
    }
    let version = u16_at(bytes, 4);
    if version != RANGE_VERSION {
        bail!(Format, "unsupported container version {}", version);
    }
    let (l, h, w) = (u16_at(bytes, 6) as usize, u16_at(bytes, 8) as usize, u16_at(bytes, 10) as usize);
    let n = h * w;
    let expected = RANGE_HEADER_BYTES + l * n * 9;
    if bytes.len() != expected {
        bail!(Length, "container is {} bytes, header implies {}", bytes.len(), expected);
    }
    let mut frames = Vec::with_capacity(l);
    let mut offset = RANGE_HEADER_BYTES;
    let mask_base = RANGE_HEADER_BYTES + l * n * 8;
    for f in 0..l {
        let plane = |offset: &mut usize| {
            let v: Vec<f32> = (0..n).map(|i| f32_at(bytes, *offset + 4 * i)).collect();
            *offset += 4 * n;
            v
        };
        let depth = plane(&mut offset);
        let intensity = plane(&mut offset);
        let mut mask = Vec::with_capacity(n);
        for &b in &bytes[mask_base + f * n..mask_base + (f + 1) * n] {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                other => bail!(Format, "mask byte {} in frame {}", other, f),
            }
        }
        frames.push(RangeImage { height: h, width: w, depth, intensity, mask });
    }
    Ok(RangeSequence { frames })
}

pub fn write_range_container(seq: &RangeSequence, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_range_container(seq)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_range_container(path: impl AsRef<Path>) -> Result<RangeSequence> {
    decode_range_container(&fs::read(path)?)
}

/// Row-major `rows × cols` matrix of `f32`, e.g. per-point logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix32 {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

pub fn encode_matrix(m: &Matrix32) -> Result<Vec<u8>> {
    if m.data.len() != m.rows * m.cols {
        bail!(Shape, "matrix data length {} != {}x{}", m.data.len(), m.rows, m.cols);
    }
    let mut out = Vec::with_capacity(MATRIX_HEADER_BYTES + 4 * m.data.len());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix32> {
    if bytes.len() < MATRIX_HEADER_BYTES {
        bail!(Length, "matrix file shorter than its header");
    }
    let rows = u32_at(bytes, 0) as usize;
    let cols = u32_at(bytes, 4) as usize;
    let expected = MATRIX_HEADER_BYTES + 4 * rows * cols;
    if bytes.len() != expected {
        bail!(Length, "matrix file is {} bytes, header implies {}", bytes.len(), expected);
    }
    let data = (0..rows * cols).map(|i| f32_at(bytes, MATRIX_HEADER_BYTES + 4 * i)).collect();
    Ok(Matrix32 { rows, cols, data })
}

pub fn write_matrix(m: &Matrix32, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_matrix(m)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix32> {
    decode_matrix(&fs::read(path)?)
}

/// Decode logits that must align with a cloud of `expected_points` points.
pub fn decode_logits(bytes: &[u8], expected_points: usize) -> Result<Matrix32> {
    if bytes.len() < MATRIX_HEADER_BYTES {
        bail!(Alignment, "logit file has no records but the cloud has {} points", expected_points);
    }
    let m = decode_matrix(bytes)?;
    if m.rows != expected_points {
        bail!(Alignment, "logit file has {} records, cloud has {} points", m.rows, expected_points);
    }
    if m.cols < 2 {
        bail!(Input, "logits need at least 2 classes, got {}", m.cols);
    }
    Ok(m)
}

/// Raw, unnormalized logits for a companion cloud.
pub fn read_logits(path: impl AsRef<Path>, expected_points: usize) -> Result<Matrix32> {
    decode_logits(&fs::read(path)?, expected_points)
}

pub fn write_logits(m: &Matrix32, path: impl AsRef<Path>) -> Result<usize> {
    write_matrix(m, path)
}
