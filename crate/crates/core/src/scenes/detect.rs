use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::scene::{SceneObject, CANVAS};
use crate::autodiff::Tensor;
use crate::vocab::{Color, Shape};

pub const MIN_BLOB_PIXELS: usize = 8;
/// Max RGB distance (in `[0, 1]` units) for a pixel to take a palette color.
pub const COLOR_THRESHOLD: f64 = 0.5;
const CIRCLE_FILL: f64 = std::f64::consts::FRAC_PI_4;
const TRIANGLE_FILL: f64 = 0.5;
/// Band half-width around the ideal fill ratios. Small rasterized shapes
/// drift well past the ideal: a radius-0.12 triangle fills 0.625 of its box.
const FILL_BAND: f64 = 0.15;
const SQUARE_MIN_FILL: f64 = 0.9;
const SQUARE_MIN_CORNER: f64 = 0.9;
const CIRCLE_MAX_CORNER: f64 = 0.6;
/// Top-half over bottom-half fill: about 1/3 for an upward triangle, 1 for
/// the symmetric shapes.
const TRIANGLE_MAX_TOP_BOTTOM: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Unknown,
}

impl ShapeClass {
    pub fn matches(self, shape: Shape) -> bool {
        matches!(
            (self, shape),
            (ShapeClass::Circle, Shape::Circle)
                | (ShapeClass::Square, Shape::Square)
                | (ShapeClass::Triangle, Shape::Triangle)
        )
    }

    /// Fill-ratio rules over the whole box, its halves and its corners.
    pub fn classify(f: &ShapeFeatures) -> Self {
        let near = |ideal: f64| (f.fill - ideal).abs() <= FILL_BAND;
        if f.fill >= SQUARE_MIN_FILL && f.corner >= SQUARE_MIN_CORNER {
            ShapeClass::Square
        } else if f.top_bottom <= TRIANGLE_MAX_TOP_BOTTOM && near(TRIANGLE_FILL) {
            ShapeClass::Triangle
        } else if f.corner <= CIRCLE_MAX_CORNER
            && f.top_bottom > TRIANGLE_MAX_TOP_BOTTOM
            && near(CIRCLE_FILL)
        {
            ShapeClass::Circle
        } else {
            ShapeClass::Unknown
        }
    }
}

/// Fill ratios of a blob inside its bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeatures {
    /// Pixel count over box area.
    pub fill: f64,
    /// Fill of the top half over fill of the bottom half.
    pub top_bottom: f64,
    /// Mean fill of the four corner cells, each a quarter of the box side.
    pub corner: f64,
}

impl ShapeFeatures {
    /// `mask` is row-major `w x h`, true where the blob is.
    pub fn measure(mask: &[bool], w: usize, h: usize) -> Self {
        let fill = |r0: usize, r1: usize, c0: usize, c1: usize| {
            let n: usize = (r0..r1)
                .map(|r| (c0..c1).filter(|&c| mask[r * w + c]).count())
                .sum();
            n as f64 / ((r1 - r0) * (c1 - c0)).max(1) as f64
        };
        let half = (h / 2).max(1);
        let bottom = fill(h - half, h, 0, w);
        let top_bottom = if bottom > 0.0 {
            fill(0, half, 0, w) / bottom
        } else {
            f64::INFINITY
        };
        let (kw, kh) = ((w / 4).max(1), (h / 4).max(1));
        let corner = (fill(0, kh, 0, kw)
            + fill(0, kh, w - kw, w)
            + fill(h - kh, h, 0, kw)
            + fill(h - kh, h, w - kw, w))
            / 4.0;
        Self {
            fill: fill(0, h, 0, w),
            top_bottom,
            corner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub color: Color,
    pub shape: ShapeClass,
    /// Pixel units, pixel centers at `+0.5`.
    pub centroid: (f64, f64),
    /// Inclusive `(col0, row0, col1, row1)`.
    pub bbox: (usize, usize, usize, usize),
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Detection {
    pub blobs: Vec<Blob>,
}

impl Detection {
    pub fn with_shape(&self, shape: Shape) -> impl Iterator<Item = &Blob> {
        self.blobs.iter().filter(move |b| b.shape.matches(shape))
    }
}

/// Whether some blob has the object's color and shape with its centroid
/// within `tol_px` pixels of the object's area centroid.
pub fn recovers(det: &Detection, object: &SceneObject, tol_px: f64) -> bool {
    let (cx, cy) = object.centroid();
    let (cx, cy) = (cx * CANVAS as f64, cy * CANVAS as f64);
    det.blobs.iter().any(|b| {
        b.color == object.color
            && b.shape.matches(object.shape)
            && (b.centroid.0 - cx).hypot(b.centroid.1 - cy) <= tol_px
    })
}

/// Nearest palette color, or `None` for background.
pub fn quantize(rgb: &[f32]) -> Option<Color> {
    let unit = |v: f32| (v as f64 + 1.0) / 2.0;
    let p = [unit(rgb[0]), unit(rgb[1]), unit(rgb[2])];
    let dist = |c: [f64; 3]| {
        ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
    };
    let background = dist([0.0, 0.0, 0.0]);
    let (color, d) = Color::ALL
        .iter()
        .map(|&c| {
            let rgb = c.rgb().map(|v| unit(v));
            (c, dist(rgb))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("palette is non-empty");
    (d <= COLOR_THRESHOLD && d < background).then_some(color)
}

/// Palette quantization, 4-connected components per color, and fill-ratio
/// shape classification. `image` is `[32, 32, 3]` in `[-1, 1]`.
pub fn detect(image: &Tensor<f32>) -> Detection {
    let n = CANVAS;
    let labels: Vec<Option<Color>> = image.data().chunks(3).map(quantize).collect();
    let mut seen = vec![false; n * n];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n * n {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            pixels.push(idx);
            let (r, c) = (idx / n, idx % n);
            let mut visit = |rr: usize, cc: usize| {
                let j = rr * n + cc;
                if !seen[j] && labels[j] == Some(color) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < n {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < n {
                visit(r, c + 1);
            }
        }
        if pixels.len() < MIN_BLOB_PIXELS {
            continue;
        }
        let (mut r0, mut c0, mut r1, mut c1) = (n, n, 0, 0);
        let (mut sx, mut sy) = (0.0, 0.0);
        for &idx in &pixels {
            let (r, c) = (idx / n, idx % n);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            sx += c as f64 + 0.5;
            sy += r as f64 + 0.5;
        }
        let count = pixels.len();
        let (w, h) = (c1 - c0 + 1, r1 - r0 + 1);
        let mut mask = vec![false; w * h];
        for &idx in &pixels {
            mask[(idx / n - r0) * w + idx % n - c0] = true;
        }
        blobs.push(Blob {
            color,
            shape: ShapeClass::classify(&ShapeFeatures::measure(&mask, w, h)),
            centroid: (sx / count as f64, sy / count as f64),
            bbox: (c0, r0, c1, r1),
            pixel_count: count,
        });
    }
    Detection { blobs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::scene::{render, Scene, SceneObject};

    #[test]
    fn background_has_no_blobs() {
        assert!(detect(&Tensor::full(&[32, 32, 3], -1.0)).blobs.is_empty());
    }

    #[test]
    fn disjoint_same_color_squares_are_two_blobs() {
        let sq = |x: f64| SceneObject {
            shape: Shape::Square,
            color: Color::Green,
            center: (x, 0.5),
            radius: 0.12,
        };
        let det = detect(&render(&Scene {
            objects: vec![sq(0.2), sq(0.75)],
        }));
        assert_eq!(det.blobs.len(), 2);
        assert!(det
            .blobs
            .iter()
            .all(|b| b.shape == ShapeClass::Square && b.color == Color::Green));
    }

    #[test]
    fn quantization_threshold() {
        assert_eq!(quantize(&[0.9, -0.9, -1.0]), Some(Color::Red));
        assert_eq!(quantize(&[-1.0, -1.0, -1.0]), None);
        assert_eq!(quantize(&[0.0, 0.0, 0.0]), None);
        assert_eq!(quantize(&[1.0, 0.9, -1.0]), Some(Color::Yellow));
    }

    #[test]
    fn smallest_and_largest_shapes_classify() {
        for shape in Shape::ALL {
            for radius in [0.12, 0.16, 0.2] {
                let o = SceneObject {
                    shape,
                    color: Color::Blue,
                    center: (0.5, 0.5),
                    radius,
                };
                let det = detect(&render(&Scene { objects: vec![o] }));
                assert_eq!(det.blobs.len(), 1);
                assert!(
                    det.blobs[0].shape.matches(shape),
                    "{shape:?} r={radius}: {:?}",
                    det.blobs[0]
                );
                assert!(recovers(&det, &o, 1.5));
            }
        }
    }

    #[test]
    fn ragged_blob_is_unknown() {
        // an L shape: full bottom row and left column
        let mut mask = vec![false; 36];
        for i in 0..6 {
            mask[30 + i] = true;
            mask[i * 6] = true;
        }
        let f = ShapeFeatures::measure(&mask, 6, 6);
        assert_eq!(ShapeClass::classify(&f), ShapeClass::Unknown);
    }

    #[test]
    fn tiny_speckle_is_ignored() {
        let mut img = Tensor::full(&[32, 32, 3], -1.0f32);
        for p in 0..7 {
            img.data_mut()[p * 3..][..3].copy_from_slice(&[1.0, -1.0, -1.0]);
        }
        assert!(detect(&img).blobs.is_empty());
    }
}
