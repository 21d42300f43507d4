//! Rotated-box geometry, suppression, VOC-style scoring and a dense head.

mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod jsonl;
pub mod nms;

pub use error::{DetectError, Result};
pub use eval::{average_precision, evaluate, match_detections, mean_ap, ApMethod, ApOutcome, Evaluation, ImageResult, MatchResult};
pub use geometry::{rotated_iou, RotatedBox};
pub use head::{assign, decode_detections, detection_loss, DetectionHead, HeadConfig, LevelOutput, Loss, Targets};
pub use nms::nms_rotated;
