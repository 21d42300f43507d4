//! Greedy per-class suppression.

use crate::geometry::{rotated_iou, RotatedBox};
use crate::error::Result;

/// Indices of `dets` ordered by descending score, ties by insertion index.
pub fn score_order(dets: &[RotatedBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (dets[a].score.unwrap_or(0.0), dets[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    order
}

/// Keeps the highest-scoring box and drops any same-class box overlapping a kept
/// one by more than `iou_thresh`. Returns kept indices in score order.
pub fn nms_indices(dets: &[RotatedBox], iou_thresh: f64) -> Result<Vec<usize>> {
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && dets[j].class_id == dets[i].class_id && rotated_iou(&dets[i], &dets[j])? > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

pub fn nms_rotated(dets: &[RotatedBox], iou_thresh: f64) -> Result<Vec<RotatedBox>> {
    Ok(nms_indices(dets, iou_thresh)?.into_iter().map(|i| dets[i]).collect())
}
