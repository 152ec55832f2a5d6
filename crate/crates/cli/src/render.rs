//! Top-down height-colored PPM renders.

use std::path::Path;

use u4d_core::Result;

/// Height range mapped onto the color ramp, meters.
const Z_RANGE: (f64, f64) = (-3.0, 5.0);

fn ramp(z: f64) -> [u8; 3] {
    let u = ((z - Z_RANGE.0) / (Z_RANGE.1 - Z_RANGE.0)).clamp(0.0, 1.0);
    let (r, g, b) = if u < 0.5 {
        let k = u * 2.0;
        (0.0, k, 1.0 - k)
    } else {
        let k = (u - 0.5) * 2.0;
        (k, 1.0 - k, 0.0)
    };
    [(55.0 + 200.0 * r) as u8, (55.0 + 200.0 * g) as u8, (55.0 + 200.0 * b) as u8]
}

/// `size × size` image covering `[−extent, extent]²`, x to the right and
/// y up. Each pixel shows the highest point that falls in it.
pub fn render_bev(xyz: &[[f64; 3]], size: usize, extent: f64) -> Vec<u8> {
    let mut top = vec![f64::NEG_INFINITY; size * size];
    let scale = size as f64 / (2.0 * extent);
    for p in xyz {
        let col = ((p[0] + extent) * scale).floor();
        let row = ((extent - p[1]) * scale).floor();
        if col < 0.0 || row < 0.0 || col >= size as f64 || row >= size as f64 {
            continue;
        }
        let i = row as usize * size + col as usize;
        if p[2] > top[i] {
            top[i] = p[2];
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", size, size).into_bytes();
    out.reserve(3 * size * size);
    for z in top {
        if z == f64::NEG_INFINITY {
            out.extend_from_slice(&[0, 0, 0]);
        } else {
            out.extend_from_slice(&ramp(z));
        }
    }
    out
}

pub fn write_bev(xyz: &[[f64; 3]], size: usize, extent: f64, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_bev(xyz, size, extent))?;
    Ok(())
}
