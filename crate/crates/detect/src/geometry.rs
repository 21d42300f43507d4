//! Oriented rectangles and their intersection-over-union.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{DetectError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Radians, in `[-pi/2, pi/2)`.
    pub theta: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Maps an angle onto `[-pi/2, pi/2)`; a rectangle is symmetric under a half turn.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can round up to exactly PI.
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

impl RotatedBox {
    /// Ground-truth box; the angle is normalized.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64, class_id: usize) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
            class_id,
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h, self.theta].iter().all(|v| v.is_finite());
        if !finite {
            return Err(DetectError::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(DetectError::InvalidBox(format!("extents {}x{} must be positive", self.w, self.h)));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(DetectError::InvalidBox(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (for a y-up frame; the order is
    /// consistent either way, which is all clipping needs).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (self.w / 2.0, self.h / 2.0);
        [(-dx, -dy), (dx, -dy), (dx, dy), (-dx, dy)].map(|(x, y)| (self.cx + x * c - y * s, self.cy + x * s + y * c))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (px, py) = (x - self.cx, y - self.cy);
        let u = px * c + py * s;
        let v = -px * s + py * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Axis-aligned bounds `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let c = self.corners();
        let xs = c.map(|p| p.0);
        let ys = c.map(|p| p.1);
        let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min(xs), min(ys), max(xs), max(ys))
    }
}

/// Signed shoelace area; positive for counter-clockwise vertices.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    a / 2.0
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Sutherland-Hodgman clipping of `subject` by the convex, counter-clockwise `clip`.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// Area of intersection over area of union, by polygon clipping. Class ids and
/// scores are ignored.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> Result<f64> {
    for r in [a, b] {
        if !(r.w > 0.0 && r.h > 0.0) || !r.area().is_finite() {
            return Err(DetectError::InvalidBox(format!("degenerate box {}x{}", r.w, r.h)));
        }
    }
    // Cheap reject on circumscribed circles.
    let reach = (a.w.hypot(a.h) + b.w.hypot(b.h)) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) >= reach {
        return Ok(0.0);
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners())).abs();
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_normalization_range() {
        for t in [-10.0, -PI, -FRAC_PI_2, 0.0, FRAC_PI_2, PI, 7.5] {
            let n = normalize_angle(t);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&n), "{t} -> {n}");
            assert!(((t - n) / PI - ((t - n) / PI).round()).abs() < 1e-12);
        }
        assert_eq!(normalize_angle(FRAC_PI_2), -FRAC_PI_2);
    }

    #[test]
    fn corners_are_counter_clockwise() {
        let b = RotatedBox::new(3.0, -1.0, 4.0, 2.0, 0.3, 0).unwrap();
        assert!((polygon_area(&b.corners()) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(RotatedBox::new(0.0, 0.0, 0.0, 1.0, 0.0, 0).is_err());
        let mut b = RotatedBox::new(0.0, 0.0, 1.0, 1.0, 0.0, 0).unwrap();
        let ok = b;
        b.h = 0.0;
        assert!(rotated_iou(&ok, &b).is_err());
        assert!(RotatedBox::new(0.0, 0.0, 1.0, 1.0, 0.0, 0).unwrap().with_score(1.5).validate().is_err());
    }
}
