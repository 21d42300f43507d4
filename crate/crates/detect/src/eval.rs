//! VOC-style matching and average precision.

use serde::{Deserialize, Serialize};

use crate::error::{DetectError, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::nms::score_order;

pub const VOC_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Scores of the detections, descending.
    pub scores: Vec<f64>,
    /// True positive flag per detection, aligned with `scores`.
    pub tp: Vec<bool>,
    /// Index into the input detections per entry of `scores`.
    pub order: Vec<usize>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn empty(num_gt: usize) -> Self {
        Self {
            scores: Vec::new(),
            tp: Vec::new(),
            order: Vec::new(),
            gt_matched: vec![false; num_gt],
        }
    }

    /// Appends another image's matches and re-sorts by score. Ties keep the
    /// earlier image first.
    pub fn merge(parts: &[MatchResult]) -> MatchResult {
        let mut rows: Vec<(f64, bool)> = Vec::new();
        for p in parts {
            rows.extend(p.scores.iter().copied().zip(p.tp.iter().copied()));
        }
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&a, &b| rows[b].0.total_cmp(&rows[a].0).then(a.cmp(&b)));
        MatchResult {
            scores: idx.iter().map(|&i| rows[i].0).collect(),
            tp: idx.iter().map(|&i| rows[i].1).collect(),
            order: idx,
            gt_matched: parts.iter().flat_map(|p| p.gt_matched.iter().copied()).collect(),
        }
    }
}

/// Greedy matching in score order. Each detection takes the highest-IoU
/// still-unmatched ground truth of its class when that IoU reaches `iou_thresh`;
/// otherwise it is a false positive.
pub fn match_detections(dets: &[RotatedBox], gts: &[RotatedBox], iou_thresh: f64) -> Result<MatchResult> {
    let order = score_order(dets);
    let mut gt_matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.class_id != dets[d].class_id {
                continue;
            }
            let iou = rotated_iou(&dets[d], gt)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                gt_matched[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(MatchResult {
        scores: order.iter().map(|&i| dets[i].score.unwrap_or(0.0)).collect(),
        tp,
        order,
        gt_matched,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    Continuous,
}

/// Precision and recall after each detection in score order.
pub fn pr_curve(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        out.push((t as f64 / num_gt as f64, t as f64 / (t + f) as f64));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApOutcome {
    pub ap: f64,
    /// Set when there was no ground truth to recall; `ap` is then 0.
    pub no_ground_truth: bool,
}

pub fn average_precision(m: &MatchResult, num_gt: usize, method: ApMethod) -> ApOutcome {
    if num_gt == 0 {
        return ApOutcome {
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let curve = pr_curve(&m.tp, num_gt);
    let ap = match method {
        ApMethod::ElevenPoint => {
            let mut sum = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                // Recall thresholds are compared with a hair of slack so that 0.3
                // counts as reached when 3 of 10 are found.
                let p = curve
                    .iter()
                    .filter(|(rec, _)| *rec >= r - 1e-12)
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
                sum += p;
            }
            sum / 11.0
        }
        ApMethod::Continuous => {
            let mut envelope: Vec<(f64, f64)> = curve.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
            }
            let mut prev_r = 0.0;
            let mut area = 0.0;
            for (r, p) in envelope {
                area += (r - prev_r) * p;
                prev_r = r;
            }
            area
        }
    };
    ApOutcome {
        ap,
        no_ground_truth: false,
    }
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(DetectError::Invalid("mean AP over an empty class list".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// One image's detections and ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub dets: Vec<RotatedBox>,
    pub gts: Vec<RotatedBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_dets: usize,
    pub no_ground_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class: Vec<ClassScore>,
    /// Mean over classes that have ground truth.
    pub map: f64,
}

/// Per-class AP over a dataset, matching within each image.
pub fn evaluate(images: &[ImageResult], num_classes: usize, iou_thresh: f64, method: ApMethod) -> Result<Evaluation> {
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut parts = Vec::with_capacity(images.len());
        let mut num_gt = 0;
        let mut num_dets = 0;
        for img in images {
            let dets: Vec<RotatedBox> = img.dets.iter().filter(|d| d.class_id == k).copied().collect();
            let gts: Vec<RotatedBox> = img.gts.iter().filter(|g| g.class_id == k).copied().collect();
            num_gt += gts.len();
            num_dets += dets.len();
            parts.push(match_detections(&dets, &gts, iou_thresh)?);
        }
        let merged = MatchResult::merge(&parts);
        let out = average_precision(&merged, num_gt, method);
        per_class.push(ClassScore {
            class_id: k,
            ap: out.ap,
            num_gt,
            num_dets,
            no_ground_truth: out.no_ground_truth,
        });
    }
    let present: Vec<f64> = per_class.iter().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    Ok(Evaluation {
        map: mean_ap(&present)?,
        per_class,
    })
}
