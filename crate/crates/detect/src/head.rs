//! Anchor-free dense head: one prediction per location on every pyramid level.

use octnet_tensor::{Conv2d, Graph, Module, Param, Scalar, Shape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DetectError, Result};
use crate::geometry::{normalize_angle, RotatedBox};
use crate::nms::nms_rotated;

/// Box channels: dx, dy, log w, log h, sin 2θ, cos 2θ.
pub const BOX_CHANNELS: usize = 6;

/// Strides of P2..P6 relative to the input image.
pub const PYRAMID_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    #[serde(default = "default_depth")]
    pub tower_depth: usize,
    /// Width of the tower convolutions; `None` keeps the input width.
    #[serde(default)]
    pub tower_width: Option<usize>,
    #[serde(default = "default_prior")]
    pub prior_prob: f64,
    /// Positives lie within `radius * stride` of a box center.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// A box goes to the level whose stride times this is nearest its size.
    #[serde(default = "default_size_per_stride")]
    pub size_per_stride: f64,
    #[serde(default = "default_beta")]
    pub smooth_l1_beta: f64,
    #[serde(default = "default_score_thresh")]
    pub score_thresh: f64,
    #[serde(default = "default_nms_thresh")]
    pub nms_thresh: f64,
    #[serde(default = "default_max_dets")]
    pub max_dets: usize,
}

fn default_depth() -> usize {
    4
}
fn default_prior() -> f64 {
    0.01
}
fn default_radius() -> f64 {
    1.5
}
fn default_size_per_stride() -> f64 {
    4.0
}
fn default_beta() -> f64 {
    1.0 / 9.0
}
fn default_score_thresh() -> f64 {
    0.05
}
fn default_nms_thresh() -> f64 {
    0.5
}
fn default_max_dets() -> usize {
    100
}

impl HeadConfig {
    pub fn new(num_classes: usize, in_channels: usize) -> Self {
        Self {
            num_classes,
            in_channels,
            tower_depth: default_depth(),
            tower_width: None,
            prior_prob: default_prior(),
            radius: default_radius(),
            size_per_stride: default_size_per_stride(),
            smooth_l1_beta: default_beta(),
            score_thresh: default_score_thresh(),
            nms_thresh: default_nms_thresh(),
            max_dets: default_max_dets(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectError::Invalid(format!("head config: {m}")));
        if self.num_classes == 0 || self.in_channels == 0 || self.tower_width == Some(0) {
            return bad("class count and widths must be positive");
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)");
        }
        if !(self.radius > 0.0 && self.size_per_stride > 0.0 && self.smooth_l1_beta > 0.0) {
            return bad("radius, size_per_stride and smooth_l1_beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_thresh) {
            return bad("thresholds must lie in [0, 1]");
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.tower_width.unwrap_or(self.in_channels)
    }
}

/// Predictions for one level.
pub struct LevelOutput<'g, T: Scalar> {
    /// `(B, num_classes, H, W)` logits.
    pub cls: Var<'g, T>,
    /// `(B, 6, H, W)` box parameters.
    pub reg: Var<'g, T>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct DetectionHead<T> {
    pub config: HeadConfig,
    pub cls_tower: Vec<Conv2d<T>>,
    pub box_tower: Vec<Conv2d<T>>,
    pub cls_out: Conv2d<T>,
    pub box_out: Conv2d<T>,
}

impl<T: Scalar> DetectionHead<T> {
    pub fn new(config: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width();
        let tower = |tag: &str, rng: &mut _| -> Vec<Conv2d<T>> {
            (0..config.tower_depth)
                .map(|i| {
                    let c_in = if i == 0 { config.in_channels } else { w };
                    Conv2d::same(&format!("head.{tag}{i}"), c_in, w, 3, true, rng)
                })
                .collect()
        };
        let cls_tower = tower("cls", rng);
        let box_tower = tower("box", rng);
        let top = if config.tower_depth == 0 { config.in_channels } else { w };
        let mut cls_out = Conv2d::same("head.cls_out", top, config.num_classes, 3, true, rng);
        let mut box_out = Conv2d::same("head.box_out", top, BOX_CHANNELS, 3, true, rng);
        // Small output weights keep the initial loss near the prior.
        cls_out.weight.value = cls_out.weight.value.scale(T::lit(0.1));
        box_out.weight.value = box_out.weight.value.scale(T::lit(0.1));
        let prior = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        if let Some(b) = &mut cls_out.bias {
            b.value = Tensor::full(b.value.shape(), T::lit(prior));
        }
        Ok(Self {
            config,
            cls_tower,
            box_tower,
            cls_out,
            box_out,
        })
    }

    fn run_tower<'g>(tower: &[Conv2d<T>], g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let mut y = x.clone();
        for conv in tower {
            y = conv.forward(g, &y)?.relu();
        }
        Ok(y)
    }

    /// Applies the shared towers to each level. `levels[i]` has stride
    /// `PYRAMID_STRIDES[i]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, levels: &[Var<'g, T>]) -> Result<Vec<LevelOutput<'g, T>>> {
        if levels.is_empty() || levels.len() > PYRAMID_STRIDES.len() {
            return Err(DetectError::Invalid(format!("head takes 1 to 5 levels, got {}", levels.len())));
        }
        levels
            .iter()
            .zip(PYRAMID_STRIDES)
            .map(|(x, stride)| {
                if x.shape().c != self.config.in_channels {
                    return Err(DetectError::Invalid(format!(
                        "head expects {} channels, level at stride {stride} has {}",
                        self.config.in_channels,
                        x.shape().c
                    )));
                }
                let cls = self.cls_out.forward(g, &Self::run_tower(&self.cls_tower, g, x)?)?;
                let reg = self.box_out.forward(g, &Self::run_tower(&self.box_tower, g, x)?)?;
                Ok(LevelOutput { cls, reg, stride })
            })
            .collect()
    }
}

impl<T: Scalar> Module<T> for DetectionHead<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.cls_tower.visit(f);
        self.box_tower.visit(f);
        self.cls_out.visit(f);
        self.box_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.cls_tower.visit_mut(f);
        self.box_tower.visit_mut(f);
        self.cls_out.visit_mut(f);
        self.box_out.visit_mut(f);
    }
}

/// Regression target of a box seen from location center `(px, py)` at `stride`.
pub fn encode(b: &RotatedBox, px: f64, py: f64, stride: f64) -> [f64; BOX_CHANNELS] {
    let (s2, c2) = (2.0 * b.theta).sin_cos();
    [
        (b.cx - px) / stride,
        (b.cy - py) / stride,
        (b.w / stride).ln(),
        (b.h / stride).ln(),
        s2,
        c2,
    ]
}

/// Inverse of [`encode`]. Log extents are clamped so a wild prediction stays finite.
pub fn decode(p: &[f64; BOX_CHANNELS], px: f64, py: f64, stride: f64, class_id: usize, score: f64) -> RotatedBox {
    let lw = p[2].clamp(-8.0, 8.0);
    let lh = p[3].clamp(-8.0, 8.0);
    let theta = if p[4] == 0.0 && p[5] == 0.0 { 0.0 } else { 0.5 * p[4].atan2(p[5]) };
    RotatedBox {
        cx: px + p[0] * stride,
        cy: py + p[1] * stride,
        w: stride * lw.exp(),
        h: stride * lh.exp(),
        theta: normalize_angle(theta),
        class_id,
        score: Some(score),
    }
}

/// Pixel center of cell `(x, y)` at `stride`.
pub fn cell_center(x: usize, y: usize, stride: usize) -> (f64, f64) {
    ((x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64)
}

/// Index of the level a box is assigned to.
pub fn level_for(b: &RotatedBox, strides: &[usize], size_per_stride: f64) -> usize {
    let size = (b.w * b.h).sqrt();
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (i, &s) in strides.iter().enumerate() {
        let gap = (size / (size_per_stride * s as f64)).log2().abs();
        if gap < best_gap {
            best_gap = gap;
            best = i;
        }
    }
    best
}

/// Dense targets for every level.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub cls: Vec<Tensor<T>>,
    pub reg: Vec<Tensor<T>>,
    /// 1 on the box channels of positive locations.
    pub mask: Vec<Tensor<T>>,
    pub num_pos: usize,
}

/// Center-sampling assignment. A location is positive for a box when it lies at
/// the box's level within `radius * stride` of the center; the cell holding the
/// center is always positive. Overlaps go to the smaller box.
pub fn assign<T: Scalar>(cfg: &HeadConfig, shapes: &[Shape], gts: &[Vec<RotatedBox>]) -> Result<Targets<T>> {
    let strides = &PYRAMID_STRIDES[..shapes.len()];
    let batch = shapes.first().map_or(0, |s| s.b);
    if gts.len() != batch {
        return Err(DetectError::Invalid(format!("{} ground-truth lists for batch {batch}", gts.len())));
    }
    let mut cls: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s.with_c(cfg.num_classes))).collect();
    let mut reg: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s.with_c(BOX_CHANNELS))).collect();
    let mut mask: Vec<Tensor<T>> = reg.clone();
    let mut num_pos = 0;
    for (b, boxes) in gts.iter().enumerate() {
        // Owner area per (level, cell).
        let mut owner: Vec<Vec<f64>> = shapes.iter().map(|s| vec![f64::INFINITY; s.h * s.w]).collect();
        for gt in boxes {
            gt.validate()?;
            if gt.class_id >= cfg.num_classes {
                return Err(DetectError::InvalidBox(format!("class {} outside {} classes", gt.class_id, cfg.num_classes)));
            }
            let l = level_for(gt, strides, cfg.size_per_stride);
            let (s, sh) = (strides[l], shapes[l]);
            let reach = cfg.radius * s as f64;
            let center_cell = (
                ((gt.cx / s as f64).floor().max(0.0) as usize).min(sh.w - 1),
                ((gt.cy / s as f64).floor().max(0.0) as usize).min(sh.h - 1),
            );
            for y in 0..sh.h {
                for x in 0..sh.w {
                    let (px, py) = cell_center(x, y, s);
                    let near = (px - gt.cx).hypot(py - gt.cy) <= reach;
                    if !(near || (x, y) == center_cell) || owner[l][y * sh.w + x] <= gt.area() {
                        continue;
                    }
                    if owner[l][y * sh.w + x].is_infinite() {
                        num_pos += 1;
                    }
                    owner[l][y * sh.w + x] = gt.area();
                    for k in 0..cfg.num_classes {
                        cls[l].set(b, k, y, x, T::zero());
                    }
                    cls[l].set(b, gt.class_id, y, x, T::one());
                    for (c, v) in encode(gt, px, py, s as f64).into_iter().enumerate() {
                        reg[l].set(b, c, y, x, T::lit(v));
                        mask[l].set(b, c, y, x, T::one());
                    }
                }
            }
        }
    }
    Ok(Targets { cls, reg, mask, num_pos })
}

pub struct Loss<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub cls: f64,
    /// Exactly 0 when there are no positives.
    pub reg: f64,
    pub num_pos: usize,
}

/// BCE over all class logits plus smooth-L1 over positive box channels, both
/// divided by the positive count (at least 1).
pub fn detection_loss<'g, T: Scalar>(cfg: &HeadConfig, outputs: &[LevelOutput<'g, T>], targets: &Targets<T>) -> Result<Loss<'g, T>> {
    if outputs.len() != targets.cls.len() {
        return Err(DetectError::Invalid("targets and outputs cover different levels".into()));
    }
    let norm = T::lit(1.0 / targets.num_pos.max(1) as f64);
    let mut cls_terms = Vec::with_capacity(outputs.len());
    let mut reg_terms = Vec::with_capacity(outputs.len());
    for (i, o) in outputs.iter().enumerate() {
        cls_terms.push(o.cls.bce_with_logits_sum(&targets.cls[i], None)?);
        if targets.num_pos > 0 {
            reg_terms.push(o.reg.smooth_l1_sum(&targets.reg[i], &targets.mask[i], T::lit(cfg.smooth_l1_beta))?);
        }
    }
    let cls = Var::sum_all(&cls_terms)?.scale(norm);
    let cls_value = cls.value().data()[0].as_f64();
    if reg_terms.is_empty() {
        return Ok(Loss {
            total: cls,
            cls: cls_value,
            reg: 0.0,
            num_pos: 0,
        });
    }
    let reg = Var::sum_all(&reg_terms)?.scale(norm);
    let reg_value = reg.value().data()[0].as_f64();
    Ok(Loss {
        total: cls.add(&reg)?,
        cls: cls_value,
        reg: reg_value,
        num_pos: targets.num_pos,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Thresholded, suppressed detections for each image of the batch.
pub fn decode_detections<T: Scalar>(cfg: &HeadConfig, outputs: &[LevelOutput<'_, T>]) -> Result<Vec<Vec<RotatedBox>>> {
    let batch = outputs.first().map_or(0, |o| o.cls.shape().b);
    let mut per_image = vec![Vec::new(); batch];
    for o in outputs {
        let (cls, reg) = (o.cls.value(), o.reg.value());
        let s = cls.shape();
        for (b, dets) in per_image.iter_mut().enumerate() {
            for y in 0..s.h {
                for x in 0..s.w {
                    let (px, py) = cell_center(x, y, o.stride);
                    let mut p = [0.0; BOX_CHANNELS];
                    for (c, v) in p.iter_mut().enumerate() {
                        *v = reg.at(b, c, y, x).as_f64();
                    }
                    for k in 0..s.c {
                        let score = sigmoid(cls.at(b, k, y, x).as_f64());
                        if score >= cfg.score_thresh {
                            dets.push(decode(&p, px, py, o.stride as f64, k, score));
                        }
                    }
                }
            }
        }
    }
    per_image
        .into_iter()
        .map(|dets| {
            let mut kept = nms_rotated(&dets, cfg.nms_thresh)?;
            kept.truncate(cfg.max_dets);
            Ok(kept)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let b = RotatedBox::new(37.0, 21.5, 18.0, 7.0, 0.6, 2).unwrap();
        let p = encode(&b, 36.0, 20.0, 8.0);
        let d = decode(&p, 36.0, 20.0, 8.0, 2, 0.9);
        for (u, v) in [(b.cx, d.cx), (b.cy, d.cy), (b.w, d.w), (b.h, d.h), (b.theta, d.theta)] {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn level_follows_box_size() {
        let box_of = |size: f64| RotatedBox::new(50.0, 50.0, size, size, 0.0, 0).unwrap();
        assert_eq!(level_for(&box_of(16.0), &PYRAMID_STRIDES, 4.0), 0);
        assert_eq!(level_for(&box_of(32.0), &PYRAMID_STRIDES, 4.0), 1);
        assert_eq!(level_for(&box_of(1000.0), &PYRAMID_STRIDES, 4.0), 4);
    }
}
