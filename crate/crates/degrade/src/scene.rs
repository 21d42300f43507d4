//! Synthetic scenes: a textured background with oriented, class-coded objects.

use octnet_detect::{rotated_iou, RotatedBox};
use octnet_tensor::{Shape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{spec, Result};
use crate::image::snap_image;
use crate::rng::{stage_rng, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    /// Bands across the long axis.
    Stripes,
    Checker,
}

/// What objects of one class look like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub shape: ShapeKind,
    pub texture: Texture,
    /// Long side over short side.
    pub aspect: (f64, f64),
    pub color: [f64; 3],
}

/// Class looks, cycling with a shifted palette past the first five.
pub fn class_style(k: usize) -> ClassStyle {
    const BASE: [(ShapeKind, Texture, (f64, f64), [f64; 3]); 5] = [
        (ShapeKind::Rectangle, Texture::Solid, (1.0, 1.4), [0.95, 0.90, 0.80]),
        (ShapeKind::Rectangle, Texture::Stripes, (2.5, 4.0), [0.20, 0.30, 0.85]),
        (ShapeKind::Ellipse, Texture::Solid, (1.0, 1.3), [0.90, 0.25, 0.20]),
        (ShapeKind::Ellipse, Texture::Stripes, (2.0, 3.0), [0.25, 0.80, 0.30]),
        (ShapeKind::Rectangle, Texture::Checker, (1.4, 2.0), [0.95, 0.85, 0.15]),
    ];
    let (shape, texture, aspect, color) = BASE[k % BASE.len()];
    let turn = (k / BASE.len()) % 3;
    let mut rotated = color;
    rotated.rotate_left(turn);
    ClassStyle {
        shape,
        texture,
        aspect,
        color: rotated,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Side of the square canvas; a multiple of 64.
    pub size: usize,
    pub num_classes: usize,
    pub objects: (usize, usize),
    /// Range of the long side in pixels.
    pub object_size: (f64, f64),
    #[serde(default = "default_min_short")]
    pub min_short_side: f64,
    #[serde(default)]
    pub background: Background,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub allow_empty: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_short() -> f64 {
    4.0
}
fn default_retries() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub level: f64,
    /// Amplitude of the smooth value noise.
    pub amplitude: f64,
    /// Lattice spacing of the value noise in pixels.
    pub cell: usize,
    /// Amplitude of the per-pixel grain.
    pub grain: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            level: 0.35,
            amplitude: 0.15,
            cell: 32,
            grain: 0.03,
        }
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 128,
            num_classes: 5,
            objects: (2, 5),
            object_size: (12.0, 40.0),
            min_short_side: default_min_short(),
            background: Background::default(),
            max_retries: default_retries(),
            allow_empty: false,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(64) {
            return Err(spec(format!("scene size {} is not a positive multiple of 64", self.size)));
        }
        if self.num_classes == 0 {
            return Err(spec("scene needs at least one class"));
        }
        let (lo, hi) = self.objects;
        if lo > hi || (hi == 0 && !self.allow_empty) {
            return Err(spec(format!("bad object count range {lo}..={hi}")));
        }
        let (a, b) = self.object_size;
        if !(a > 0.0 && a <= b && b < self.size as f64) {
            return Err(spec(format!("object size range {a}..{b} must lie in (0, {})", self.size)));
        }
        if !(self.min_short_side > 0.0 && self.min_short_side <= a) {
            return Err(spec("min_short_side must be positive and at most the smallest long side"));
        }
        let bg = &self.background;
        if bg.cell == 0 || bg.amplitude < 0.0 || bg.grain < 0.0 || !(0.0..=1.0).contains(&bg.level) {
            return Err(spec("bad background parameters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1, 3, size, size)`.
    pub image: Tensor<f64>,
    pub boxes: Vec<RotatedBox>,
    /// Objects dropped because no free spot was found.
    pub skipped: usize,
}

/// Subsamples per pixel side used for coverage.
pub const SUPERSAMPLE: usize = 4;

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn background(spec: &SceneSpec, rng: &mut impl Rng) -> Tensor<f64> {
    let n = spec.size;
    let bg = &spec.background;
    let cells = n.div_ceil(bg.cell) + 1;
    let lattice: Vec<Vec<f64>> = (0..3).map(|_| (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let tint: [f64; 3] = [rng.random_range(0.9..1.1), rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)];
    let grain: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_fn(Shape::new(1, 3, n, n), |_, c, y, x| {
        let fy = y as f64 / bg.cell as f64;
        let fx = x as f64 / bg.cell as f64;
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (smoothstep(fy - iy as f64), smoothstep(fx - ix as f64));
        let l = &lattice[c];
        let at = |j: usize, i: usize| l[j * cells + i];
        let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
        let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
        let smooth = top * (1.0 - ty) + bot * ty;
        (bg.level * tint[c] + bg.amplitude * smooth + bg.grain * grain[y * n + x]).clamp(0.0, 1.0)
    })
}

/// Whether a point in the box's own frame lies in the object's shape.
fn inside_shape(kind: ShapeKind, u: f64, v: f64, w: f64, h: f64) -> bool {
    match kind {
        ShapeKind::Rectangle => u.abs() <= w / 2.0 && v.abs() <= h / 2.0,
        ShapeKind::Ellipse => (2.0 * u / w).powi(2) + (2.0 * v / h).powi(2) <= 1.0,
    }
}

fn texture_gain(t: Texture, u: f64, v: f64, w: f64) -> f64 {
    let period = (w / 4.0).max(3.0);
    match t {
        Texture::Solid => 1.0,
        Texture::Stripes => {
            if (u / period).floor().rem_euclid(2.0) == 0.0 {
                1.0
            } else {
                0.7
            }
        }
        Texture::Checker => {
            let a = (u / period).floor() + (v / period).floor();
            if a.rem_euclid(2.0) == 0.0 {
                1.0
            } else {
                0.65
            }
        }
    }
}

/// Fraction of each touched pixel covered by the shape, on a `SUPERSAMPLE`
/// grid. Returns `(y, x, coverage, mean texture gain)`.
pub fn coverage(b: &RotatedBox, kind: ShapeKind, texture: Texture, size: usize) -> Vec<(usize, usize, f64, f64)> {
    let (x0, y0, x1, y1) = b.bounds();
    let clampi = |v: f64| (v.max(0.0) as usize).min(size);
    let (xs, xe) = (clampi(x0.floor()), clampi(x1.ceil()));
    let (ys, ye) = (clampi(y0.floor()), clampi(y1.ceil()));
    let (s, c) = b.theta.sin_cos();
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = Vec::new();
    for py in ys..ye {
        for px in xs..xe {
            let mut hits = 0usize;
            let mut gain = 0.0;
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    let x = px as f64 + (i as f64 + 0.5) * step - b.cx;
                    let y = py as f64 + (j as f64 + 0.5) * step - b.cy;
                    let (u, v) = (x * c + y * s, -x * s + y * c);
                    if inside_shape(kind, u, v, b.w, b.h) {
                        hits += 1;
                        gain += texture_gain(texture, u, v, b.w);
                    }
                }
            }
            if hits > 0 {
                out.push((py, px, hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64, gain / hits as f64));
            }
        }
    }
    out
}

fn fits(b: &RotatedBox, size: usize) -> bool {
    let n = size as f64;
    b.corners().iter().all(|&(x, y)| (0.0..=n).contains(&x) && (0.0..=n).contains(&y))
}

/// Renders scene `image_id` of the spec. The same `(spec, image_id)` always gives
/// the same pixels and boxes.
pub fn synth_scene(spec: &SceneSpec, image_id: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, image_id, Stage::Scene);
    let mut image = background(spec, &mut rng);
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut boxes: Vec<RotatedBox> = Vec::with_capacity(count);
    let mut skipped = 0;
    for _ in 0..count {
        let class_id = rng.random_range(0..spec.num_classes);
        let style = class_style(class_id);
        let mut placed = None;
        for _ in 0..spec.max_retries {
            let long = rng.random_range(spec.object_size.0..=spec.object_size.1);
            let aspect = rng.random_range(style.aspect.0..=style.aspect.1);
            let short = (long / aspect).max(spec.min_short_side);
            let theta = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            let margin = long / 2.0;
            let n = spec.size as f64;
            let cx = rng.random_range(margin..=n - margin);
            let cy = rng.random_range(margin..=n - margin);
            let cand = RotatedBox::new(cx, cy, long, short, theta, class_id)?;
            if !fits(&cand, spec.size) {
                continue;
            }
            let mut clear = true;
            for other in &boxes {
                if rotated_iou(&cand, other)? > 0.0 {
                    clear = false;
                    break;
                }
            }
            if clear {
                placed = Some(cand);
                break;
            }
        }
        let Some(b) = placed else {
            skipped += 1;
            continue;
        };
        for (y, x, cov, gain) in coverage(&b, style.shape, style.texture, spec.size) {
            for (ch, &col) in style.color.iter().enumerate() {
                let under = image.at(0, ch, y, x);
                image.set(0, ch, y, x, under * (1.0 - cov) + col * gain * cov);
            }
        }
        boxes.push(b);
    }
    if boxes.is_empty() && !spec.allow_empty {
        return Err(spec_err(image_id));
    }
    Ok(Scene {
        image: snap_image(&image),
        boxes,
        skipped,
    })
}

fn spec_err(image_id: u64) -> crate::DegradeError {
    spec(format!("scene {image_id} ended up with no objects; allow_empty is off"))
}
