//! Procedural segmentation scenes: circles, rotated rectangles and rotated
//! triangles painted over a flat background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{quantize, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Base colors: background, circle, rectangle, triangle.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.50, 0.50, 0.50],
    [0.80, 0.35, 0.30],
    [0.35, 0.70, 0.40],
    [0.35, 0.45, 0.80],
];

pub const MAX_CLASSES: usize = PALETTE.len();

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSpec {
    pub canvas: usize,
    /// Background plus up to three shape kinds.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent range as a fraction of the canvas side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-width of the uniform per-shape color offset.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            canvas: 64,
            classes: 4,
            min_shapes: 1,
            max_shapes: 4,
            min_extent: 0.12,
            max_extent: 0.28,
            noise: 0.08,
            color_jitter: 0.2,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!(
                "shapes data supports 2..={MAX_CLASSES} classes, got {}",
                self.classes
            )));
        }
        if self.canvas == 0 {
            return Err(Error::Config("canvas must be positive".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "min_shapes {} > max_shapes {}",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent) {
            return Err(Error::Config(
                "shape extents must satisfy 0 < min <= max".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Circle {
        radius: f64,
    },
    /// Half extents along the rotated axes.
    Rectangle {
        half_w: f64,
        half_h: f64,
    },
    /// Equilateral, vertices at distance `circumradius` from the center with
    /// one on the rotated `+v` axis.
    Triangle {
        circumradius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    /// Rotation in radians.
    pub angle: f64,
    pub geometry: Geometry,
    pub color: [f64; 3],
}

impl Shape {
    /// Whether the point `(x, y)` in canvas coordinates lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.geometry {
            Geometry::Circle { radius } => dx * dx + dy * dy <= radius * radius,
            Geometry::Rectangle { half_w, half_h } => u.abs() <= half_w && v.abs() <= half_h,
            Geometry::Triangle { circumradius } => {
                // Three half-planes at distance r/2 from the center.
                (0..3).all(|k| {
                    let a =
                        std::f64::consts::PI / 2.0 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    let (ns, nc) = a.sin_cos();
                    -(nc * u + ns * v) <= circumradius / 2.0
                })
            }
        }
    }
}

fn rng_for(spec: &ShapesSpec, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    rng
}

fn jittered(base: [f64; 3], jitter: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|v| {
        let off = if jitter > 0.0 {
            rng.random_range(-jitter..=jitter)
        } else {
            0.0
        };
        (v + off).clamp(0.0, 1.0)
    })
}

/// Background color and shapes of scene `index`, in painting order.
pub fn layout(spec: &ShapesSpec, index: u64) -> Result<([f64; 3], Vec<Shape>)> {
    spec.validate()?;
    Ok(draw_layout(spec, &mut rng_for(spec, index)))
}

fn draw_layout(spec: &ShapesSpec, rng: &mut ChaCha8Rng) -> ([f64; 3], Vec<Shape>) {
    let side = spec.canvas as f64;
    let background = jittered(PALETTE[0], spec.color_jitter, rng);
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..spec.classes) as u8;
        let extent = side * rng.random_range(spec.min_extent..=spec.max_extent);
        let cx = rng.random_range(0.0..side);
        let cy = rng.random_range(0.0..side);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let geometry = match class {
            1 => Geometry::Circle { radius: extent },
            2 => Geometry::Rectangle {
                half_w: extent * rng.random_range(0.6..=1.0),
                half_h: extent * rng.random_range(0.6..=1.0),
            },
            _ => Geometry::Triangle {
                circumradius: extent * 1.3,
            },
        };
        let color = jittered(PALETTE[class as usize], spec.color_jitter, rng);
        shapes.push(Shape {
            class,
            cx,
            cy,
            angle,
            geometry,
            color,
        });
    }
    (background, shapes)
}

/// Renders scene `index`. Pure in `(spec, index)`.
pub fn generate(spec: &ShapesSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = rng_for(spec, index);
    let (background, shapes) = draw_layout(spec, &mut rng);
    let n = spec.canvas;
    let hw = n * n;
    let mut label = vec![0u8; hw];
    let mut image = vec![0.0f64; 3 * hw];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = background;
            let mut class = 0u8;
            for s in &shapes {
                if s.contains(px, py) {
                    color = s.color;
                    class = s.class;
                }
            }
            let i = y * n + x;
            label[i] = class;
            for ch in 0..3 {
                image[ch * hw + i] = color[ch];
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut image {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut image {
        *v = quantize(*v);
    }
    Sample::new(Tensor::from_vec(&[3, n, n], image)?, label)
}
