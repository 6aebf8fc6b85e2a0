use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::PromptSpec;
use crate::error::{Error, Result};
use crate::vocab::{Color, Shape, Token};

pub const CANVAS: usize = 32;
pub const MIN_RADIUS: f64 = 0.12;
pub const MAX_RADIUS: f64 = 0.2;
/// Extra clearance between object bounding squares, in normalized units.
const GAP: f64 = 2.0 / CANVAS as f64;
const MAX_TRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Normalized `(x, y)`, y pointing down.
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneObject {
    /// Whether the pixel-space point `(px, py)` (normalized) is covered.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center;
        let r = self.radius;
        match self.shape {
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            Shape::Triangle => {
                py >= cy - r && py <= cy + r && (px - cx).abs() <= (py - cy + r) / 2.0
            }
        }
    }

    /// Area centroid in normalized coordinates. The upward triangle's sits a
    /// third of the radius below its box center.
    pub fn centroid(&self) -> (f64, f64) {
        let (cx, cy) = self.center;
        match self.shape {
            Shape::Triangle => (cx, cy + self.radius / 3.0),
            _ => (cx, cy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Caption `color shape [and color shape]` in object order.
    pub fn prompt(&self) -> Result<PromptSpec> {
        let mut tokens = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                tokens.push(Token::And);
            }
            tokens.push(Token::Color(o.color));
            tokens.push(Token::Shape(o.shape));
        }
        PromptSpec::from_tokens(&tokens)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.objects.len() > 2 {
            return Err(Error::param("scenes hold at most two objects"));
        }
        for o in &self.objects {
            let (cx, cy) = o.center;
            let r = o.radius;
            if !(MIN_RADIUS..=MAX_RADIUS).contains(&r)
                || cx - r < 0.0
                || cx + r > 1.0
                || cy - r < 0.0
                || cy + r > 1.0
            {
                return Err(Error::param(format!("object {o:?} leaves the canvas")));
            }
        }
        if let [a, b] = self.objects.as_slice() {
            let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
            if d <= a.radius + b.radius {
                return Err(Error::param("objects overlap"));
            }
        }
        Ok(())
    }
}

fn random_object<R: Rng + ?Sized>(rng: &mut R, shape: Shape, color: Color) -> SceneObject {
    let radius = rng.random_range(MIN_RADIUS..=MAX_RADIUS);
    let center = (
        rng.random_range(radius..=1.0 - radius),
        rng.random_range(radius..=1.0 - radius),
    );
    SceneObject {
        shape,
        color,
        center,
        radius,
    }
}

fn separated(a: &SceneObject, b: &SceneObject) -> bool {
    let need = a.radius + b.radius + GAP;
    (a.center.0 - b.center.0).abs() >= need || (a.center.1 - b.center.1).abs() >= need
}

/// Places objects with the given attributes at random non-overlapping spots.
pub fn place_objects<R: Rng + ?Sized>(rng: &mut R, attrs: &[(Shape, Color)]) -> Result<Scene> {
    if attrs.len() > 2 {
        return Err(Error::param("scenes hold at most two objects"));
    }
    for _ in 0..MAX_TRIES {
        let objects: Vec<_> = attrs
            .iter()
            .map(|&(s, c)| random_object(rng, s, c))
            .collect();
        if objects.len() < 2 || separated(&objects[0], &objects[1]) {
            return Ok(Scene { objects });
        }
    }
    Err(Error::Internal(format!(
        "could not place {} objects in {MAX_TRIES} tries",
        attrs.len()
    )))
}

/// Random scene with one or two objects (even odds) and its caption.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R) -> Result<(Scene, PromptSpec)> {
    let count = if rng.random_bool(0.5) { 1 } else { 2 };
    let attrs: Vec<_> = (0..count)
        .map(|_| {
            (
                Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                Color::ALL[rng.random_range(0..Color::ALL.len())],
            )
        })
        .collect();
    let scene = place_objects(rng, &attrs)?;
    let prompt = scene.prompt()?;
    Ok((scene, prompt))
}

/// Hard-edged raster on a black canvas, `[32, 32, 3]` in `[-1, 1]`.
pub fn render(scene: &Scene) -> Tensor<f32> {
    let mut img = Tensor::full(&[CANVAS, CANVAS, 3], -1.0f32);
    let data = img.data_mut();
    for i in 0..CANVAS {
        let py = (i as f64 + 0.5) / CANVAS as f64;
        for j in 0..CANVAS {
            let px = (j as f64 + 0.5) / CANVAS as f64;
            for o in &scene.objects {
                if o.contains(px, py) {
                    data[(i * CANVAS + j) * 3..][..3].copy_from_slice(&o.color.rgb());
                }
            }
        }
    }
    img
}
