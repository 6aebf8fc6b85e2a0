//! Binary PPM output for images and attention heatmaps.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Maps `[-1, 1]` to `0..=255`, rounding half up.
pub fn to_byte(v: f32) -> u8 {
    let x = ((v as f64 + 1.0) * 0.5 * 255.0 + 0.5).floor();
    x.clamp(0.0, 255.0) as u8
}

fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Encodes a `[H, W, 3]` image in `[-1, 1]`.
pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::param(format!("image must be [H, W, 3], got {s:?}")));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    Ok(ppm(s[1], s[0], &bytes))
}

pub fn write_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_image(image)?)?;
    Ok(())
}

/// Black -> red -> yellow -> white, for `x` in `[0, 1]`.
pub fn hot(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
    [ch(x), ch(x - 1.0), ch(x - 2.0)]
}

/// Encodes a row-major `grid x grid` map, normalized by its maximum and
/// upsampled by `scale` with nearest-neighbour repetition.
pub fn encode_heatmap(values: &[f32], grid: usize, scale: usize) -> Result<Vec<u8>> {
    if values.len() != grid * grid || grid == 0 || scale == 0 {
        return Err(Error::param(format!(
            "heatmap needs {grid}x{grid} values and a positive scale, got {} values",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::param(
            "heatmap values must be finite and non-negative",
        ));
    }
    let max = values.iter().fold(0.0f32, |a, &b| a.max(b));
    let side = grid * scale;
    let mut rgb = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let v = values[(y / scale) * grid + x / scale];
            let norm = if max > 0.0 { (v / max) as f64 } else { 0.0 };
            rgb.extend_from_slice(&hot(norm));
        }
    }
    Ok(ppm(side, side, &rgb))
}

pub fn write_heatmap(values: &[f32], grid: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_heatmap(values, grid, 16)?)?;
    Ok(())
}
