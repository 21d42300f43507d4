//! Experiment configuration and its content hash.

use std::path::{Path, PathBuf};

use octnet_core::{BackboneConfig, NeckConfig, Variant};
use octnet_degrade::{DatasetSpec, DegradationSpec, SceneSpec};
use octnet_detect::{ApMethod, HeadConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckKind {
    Ocsafpn,
    BaselineFpn,
}

/// Head settings; class count and input width come from the data and neck.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSettings {
    pub tower_depth: usize,
    pub tower_width: Option<usize>,
    pub prior_prob: f64,
    pub radius: f64,
    pub size_per_stride: f64,
    pub smooth_l1_beta: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
}

impl Default for HeadSettings {
    fn default() -> Self {
        let h = HeadConfig::new(1, 1);
        Self {
            tower_depth: 2,
            tower_width: Some(32),
            prior_prob: h.prior_prob,
            radius: h.radius,
            size_per_stride: h.size_per_stride,
            smooth_l1_beta: h.smooth_l1_beta,
            score_thresh: h.score_thresh,
            nms_thresh: h.nms_thresh,
            max_dets: h.max_dets,
        }
    }
}

impl HeadSettings {
    pub fn to_head_config(&self, num_classes: usize, in_channels: usize) -> HeadConfig {
        HeadConfig {
            num_classes,
            in_channels,
            tower_depth: self.tower_depth,
            tower_width: self.tower_width,
            prior_prob: self.prior_prob,
            radius: self.radius,
            size_per_stride: self.size_per_stride,
            smooth_l1_beta: self.smooth_l1_beta,
            score_thresh: self.score_thresh,
            nms_thresh: self.nms_thresh,
            max_dets: self.max_dets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; relative paths resolve against the output directory.
    pub dir: PathBuf,
    pub scene: SceneSpec,
    pub train: usize,
    pub test: usize,
    /// Named degradation presets built next to the clean set.
    pub presets: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            scene: SceneSpec::default(),
            train: 500,
            test: 100,
            presets: octnet_degrade::PRESETS.iter().map(|p| p.0.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Fractions of `steps` after which the rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Image set trained on.
    pub set: String,
    /// Random horizontal flips.
    pub flip: bool,
    /// Gradients with a larger global norm are scaled down to it.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 1000,
            batch_size: 4,
            warmup_steps: 100,
            decay_at: vec![0.7, 0.9],
            decay_factor: 0.1,
            set: octnet_degrade::dataset::CLEAN.to_string(),
            flip: true,
            clip_grad_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    /// Learning rate at a zero-based step: linear warmup, then step decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decays = self.decay_at.iter().filter(|&&f| step as f64 >= f * self.steps as f64).count();
        self.lr * warm * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    /// Image sets to score; empty means every set in the dataset.
    pub sets: Vec<String>,
    pub iou_thresh: f64,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            sets: Vec::new(),
            iou_thresh: octnet_detect::eval::VOC_IOU,
            ap_method: ApMethod::ElevenPoint,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub backbone: BackboneConfig,
    pub neck: NeckKind,
    pub neck_config: NeckConfig,
    pub head: HeadSettings,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    /// Output directory. Not part of the hash, so a rerun elsewhere matches.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "ocsafpn".into(),
            backbone: BackboneConfig::default(),
            neck: NeckKind::Ocsafpn,
            neck_config: NeckConfig::default(),
            head: HeadSettings::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

fn digest(value: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this text is canonical.
    let text = serde_json::to_string(value).expect("config values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

impl ExperimentConfig {
    /// The plain-backbone, vanilla-pyramid twin of the default.
    pub fn baseline() -> Self {
        Self {
            name: "baseline_fpn".into(),
            backbone: BackboneConfig::plain(BackboneConfig::default().width_scale),
            neck: NeckKind::BaselineFpn,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.neck_config.validate()?;
        if self.neck == NeckKind::Ocsafpn && self.backbone.variant != Variant::Octave {
            return Err(invalid("the ocsafpn neck needs the octave backbone"));
        }
        self.dataset_spec()?.validate()?;
        self.head_config(self.data.scene.num_classes).validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(invalid("train needs positive steps, batch size and lr, and momentum in [0, 1)"));
        }
        if t.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("clip_grad_norm must be positive"));
        }
        if t.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) || !(t.decay_factor > 0.0) {
            return Err(invalid("decay_at fractions must lie in [0, 1] with a positive decay_factor"));
        }
        if !["train", "test"].contains(&self.eval.split.as_str()) {
            return Err(invalid(format!("unknown eval split {:?}", self.eval.split)));
        }
        Ok(())
    }

    pub fn head_config(&self, num_classes: usize) -> HeadConfig {
        self.head.to_head_config(num_classes, self.neck_config.out_channels)
    }

    /// Scene and degradation seeds follow `seeds.data`.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let scene = SceneSpec { seed: self.seeds.data, ..self.data.scene.clone() };
        let presets: Vec<&str> = self.data.presets.iter().map(String::as_str).collect();
        Ok(DatasetSpec::with_presets(scene, self.data.train, self.data.test, &presets, self.seeds.data)?)
    }

    pub fn degradation(&self, preset: &str) -> Result<DegradationSpec> {
        Ok(DegradationSpec::preset(preset, self.seeds.data)?)
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("struct").remove("out");
        // Paths may differ between reruns; the dataset is identified by its content.
        v["data"].as_object_mut().expect("struct").remove("dir");
        digest(&v)
    }

    /// Hash of what determines the dataset contents.
    pub fn data_hash(&self) -> String {
        let spec = self.dataset_spec().map(|s| serde_json::to_value(s).expect("spec serializes"));
        digest(&spec.unwrap_or(serde_json::Value::Null))
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data.dir.is_absolute() {
            self.data.dir.clone()
        } else {
            self.out.join(&self.data.dir)
        }
    }
}
