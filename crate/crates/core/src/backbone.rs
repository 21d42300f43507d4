//! Residual backbone of octave bottlenecks and its plain twin.

use octnet_tensor::{BatchNorm2d, Deconv2d, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Cbr;
use crate::error::{config, CoreError, Result};
use crate::octave::{OctVar, OctaveBn, OctaveConv, OctaveFeature, Split};

/// Channel widths of stages 2..5 before dividing by the width scale.
pub const REFERENCE_WIDTHS: [usize; 4] = [256, 512, 1024, 2048];
pub const REFERENCE_STEM: usize = 64;
/// Input extents must be multiples of this (the coarsest pyramid stride).
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Octave,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub width_scale: usize,
    /// Low-frequency share for stages 2..4; stage 5 is always high-only.
    pub alpha: f64,
    pub blocks_per_stage: [usize; 4],
    pub variant: Variant,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width_scale: 8,
            alpha: 0.5,
            blocks_per_stage: [1, 1, 1, 1],
            variant: Variant::Octave,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn plain(width_scale: usize) -> Self {
        Self {
            width_scale,
            variant: Variant::Plain,
            ..Self::default()
        }
    }

    pub fn octave(width_scale: usize) -> Self {
        Self {
            width_scale,
            ..Self::default()
        }
    }

    pub fn stem_width(&self) -> usize {
        REFERENCE_STEM / self.width_scale
    }

    /// Total output channels of stages 2..5.
    pub fn stage_widths(&self) -> [usize; 4] {
        REFERENCE_WIDTHS.map(|w| w / self.width_scale)
    }

    /// Low-frequency share of stage `s` in `0..4`.
    pub fn stage_alpha(&self, s: usize) -> f64 {
        match self.variant {
            Variant::Plain => 0.0,
            Variant::Octave if s == 3 => 0.0,
            Variant::Octave => self.alpha,
        }
    }

    pub fn stage_splits(&self) -> Result<[Split; 4]> {
        let widths = self.stage_widths();
        let mut out = [Split::plain(0); 4];
        for s in 0..4 {
            out[s] = exact_split(widths[s], self.stage_alpha(s))?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8, 16].contains(&self.width_scale) {
            return Err(config(format!("width_scale {} not in {{1, 2, 4, 8, 16}}", self.width_scale)));
        }
        if self.in_channels == 0 {
            return Err(config("in_channels must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(config("every stage needs at least one block"));
        }
        if self.variant == Variant::Octave && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config(format!("octave variant needs alpha in (0, 1), got {}", self.alpha)));
        }
        for (s, &w) in self.stage_widths().iter().enumerate() {
            if w % 4 != 0 {
                return Err(config(format!("stage {} width {w} not divisible by 4", s + 2)));
            }
            let a = self.stage_alpha(s);
            exact_split(w, a)?;
            exact_split(w / 4, a)?;
        }
        Ok(())
    }
}

/// Split that must land on whole channels.
fn exact_split(c: usize, alpha: f64) -> Result<Split> {
    let low = alpha * c as f64;
    if (low - low.round()).abs() > 1e-9 {
        return Err(config(format!("alpha {alpha} splits {c} channels into {low}")));
    }
    Split::new(c, alpha)
}

/// Tensor outputs of the backbone, levels 2..5 in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy<T> {
    pub levels: Vec<OctaveFeature<T>>,
}

impl<T: Scalar> Hierarchy<T> {
    /// `level` in `2..=5`.
    pub fn level(&self, level: usize) -> &OctaveFeature<T> {
        &self.levels[level - 2]
    }

    pub fn o5(&self) -> &Tensor<T> {
        &self.levels[3].high
    }
}

/// Graph-side outputs of the backbone, levels 2..5 in order.
#[derive(Clone)]
pub struct HierarchyVars<'g, T> {
    pub levels: Vec<OctVar<'g, T>>,
}

impl<'g, T: Scalar> HierarchyVars<'g, T> {
    pub fn level(&self, level: usize) -> &OctVar<'g, T> {
        &self.levels[level - 2]
    }

    pub fn to_hierarchy(&self) -> Hierarchy<T> {
        Hierarchy {
            levels: self.levels.iter().map(|l| l.to_feature()).collect(),
        }
    }

    pub fn constant(g: &'g Graph<T>, h: &Hierarchy<T>) -> Self {
        Self {
            levels: h.levels.iter().map(|f| OctVar::constant(g, f)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub conv: OctaveConv<T>,
    pub bn: OctaveBn<T>,
}

crate::module_fields!(Projection { conv, bn });

/// 1x1 reduce, 3x3, 1x1 expand, with a residual shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    pub conv1: OctaveConv<T>,
    pub bn1: OctaveBn<T>,
    pub conv2: OctaveConv<T>,
    pub bn2: OctaveBn<T>,
    pub conv3: OctaveConv<T>,
    pub bn3: OctaveBn<T>,
    pub shortcut: Option<Projection<T>>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(name: &str, input: Split, output: Split, mid: Split, rng: &mut impl Rng) -> Self {
        let shortcut = (input != output).then(|| Projection {
            conv: OctaveConv::new(&format!("{name}.proj"), input, output, 1, rng),
            bn: OctaveBn::new(&format!("{name}.proj_bn"), output),
        });
        Self {
            conv1: OctaveConv::new(&format!("{name}.conv1"), input, mid, 1, rng),
            bn1: OctaveBn::new(&format!("{name}.bn1"), mid),
            conv2: OctaveConv::new(&format!("{name}.conv2"), mid, mid, 3, rng),
            bn2: OctaveBn::new(&format!("{name}.bn2"), mid),
            conv3: OctaveConv::new(&format!("{name}.conv3"), mid, output, 1, rng),
            bn3: OctaveBn::new(&format!("{name}.bn3"), output),
            shortcut,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &OctVar<'g, T>) -> Result<OctVar<'g, T>> {
        let y = self.bn1.forward(g, &self.conv1.forward(g, x)?)?.relu();
        let y = self.bn2.forward(g, &self.conv2.forward(g, &y)?)?.relu();
        let y = self.bn3.forward(g, &self.conv3.forward(g, &y)?)?;
        let skip = match &self.shortcut {
            Some(p) => p.bn.forward(g, &p.conv.forward(g, x)?)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu())
    }
}

crate::module_fields!(Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, shortcut });

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub stem: Vec<Cbr<T>>,
    pub stages: Vec<Vec<Bottleneck<T>>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let sw = cfg.stem_width();
        let stem = vec![
            Cbr::new("backbone.stem0", cfg.in_channels, sw, 4, 2, 1, rng),
            Cbr::new("backbone.stem1", sw, sw, 4, 2, 1, rng),
        ];
        let widths = cfg.stage_widths();
        let splits = cfg.stage_splits()?;
        let mut input = Split::plain(sw);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let output = splits[s];
            // The middle convs follow the output split, except when the stage
            // collapses to high-only, where they keep the incoming split.
            let mid_alpha = if cfg.stage_alpha(s) > 0.0 {
                cfg.stage_alpha(s)
            } else {
                input.low as f64 / input.total() as f64
            };
            let mid = exact_split(widths[s] / 4, mid_alpha)?;
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage[s]);
            for b in 0..cfg.blocks_per_stage[s] {
                let name = format!("backbone.s{}.b{b}", s + 2);
                blocks.push(Bottleneck::new(&name, input, output, mid, rng));
                input = output;
            }
            stages.push(blocks);
        }
        Ok(Self {
            config: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn level_splits(&self) -> [Split; 4] {
        self.config.stage_splits().expect("validated at build")
    }

    /// Checks an input shape without running anything.
    pub fn check_input(&self, shape: octnet_tensor::Shape) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(config(format!(
                "backbone expects {} input channels, got {}",
                self.config.in_channels, shape.c
            )));
        }
        if shape.h == 0 || !shape.h.is_multiple_of(INPUT_MULTIPLE) || shape.w == 0 || !shape.w.is_multiple_of(INPUT_MULTIPLE) {
            return Err(config(format!(
                "image extents {}x{} must be positive multiples of {INPUT_MULTIPLE}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, image: &Var<'g, T>) -> Result<HierarchyVars<'g, T>> {
        self.check_input(image.shape())?;
        let mut x = image.clone();
        for cbr in &self.stem {
            x = cbr.forward(g, &x)?;
        }
        let mut x = OctVar::plain(x);
        let mut levels = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = x.downsample()?;
            }
            for block in blocks {
                x = block.forward(g, &x)?;
            }
            levels.push(x.clone());
        }
        Ok(HierarchyVars { levels })
    }

    pub fn infer(&self, image: &Tensor<T>) -> Result<Hierarchy<T>> {
        let g = Graph::inference();
        let x = g.constant(image.clone());
        Ok(self.forward(&g, &x)?.to_hierarchy())
    }
}

crate::module_fields!(Backbone { stem, stages });

#[derive(Clone, Debug)]
pub struct AdapterBranch<T> {
    pub deconv: Deconv2d<T>,
    pub bn: BatchNorm2d<T>,
}

crate::module_fields!(AdapterBranch { deconv, bn });

/// Lifts each low map to its high map's resolution with a deconvolution, BN and
/// ReLU, then appends it to the high map's channels.
#[derive(Clone, Debug)]
pub struct LowFreqAdapter<T> {
    /// One branch per level 2..5; `None` where the level is high-only.
    pub branches: Vec<Option<AdapterBranch<T>>>,
}

impl<T: Scalar> LowFreqAdapter<T> {
    pub fn new(splits: &[Split], rng: &mut impl Rng) -> Self {
        let branches = splits
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (s.low > 0).then(|| {
                    let name = format!("adapter.l{}", i + 2);
                    AdapterBranch {
                        deconv: Deconv2d::double(&format!("{name}.deconv"), s.low, s.low, false, rng),
                        bn: BatchNorm2d::new(&format!("{name}.bn"), s.low),
                    }
                })
            })
            .collect();
        Self { branches }
    }

    /// Merges one level; the low map must be present.
    pub fn merge<'g>(branch: &AdapterBranch<T>, g: &'g Graph<T>, x: &OctVar<'g, T>) -> Result<Var<'g, T>> {
        let low = x
            .low
            .as_ref()
            .ok_or_else(|| CoreError::Structure("adapter applied to a feature without a low map".into()))?;
        let up = branch.bn.forward(g, &branch.deconv.forward(g, low)?)?.relu();
        Ok(Var::concat(&[&x.high, &up])?)
    }

    /// Single-tensor maps C2..C5 for a vanilla pyramid.
    pub fn forward<'g>(&self, g: &'g Graph<T>, h: &HierarchyVars<'g, T>) -> Result<Vec<Var<'g, T>>> {
        if h.levels.len() != self.branches.len() {
            return Err(CoreError::Structure("adapter level count mismatch".into()));
        }
        self.branches
            .iter()
            .zip(&h.levels)
            .map(|(b, x)| match b {
                Some(b) => Self::merge(b, g, x),
                None if x.low.is_none() => Ok(x.high.clone()),
                None => Err(CoreError::Structure("adapter has no branch for a low map".into())),
            })
            .collect()
    }

    /// Output widths per level given the input splits.
    pub fn widths(splits: &[Split]) -> Vec<usize> {
        splits.iter().map(|s| s.total()).collect()
    }
}

crate::module_fields!(LowFreqAdapter { branches });

#[cfg(test)]
mod tests {
    use super::*;
    use octnet_tensor::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_splits() {
        let splits = BackboneConfig::octave(1).stage_splits().unwrap();
        let pairs: Vec<(usize, usize)> = splits.iter().map(|s| (s.high, s.low)).collect();
        assert_eq!(pairs, [(128, 128), (256, 256), (512, 512), (2048, 0)]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = BackboneConfig::octave(3);
        assert!(cfg.validate().is_err());
        cfg.width_scale = 8;
        cfg.alpha = 0.3;
        assert!(cfg.validate().is_err());
        cfg.alpha = 1.0;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.blocks_per_stage = [1, 0, 1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn octave_and_plain_have_equal_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Backbone::<f64>::new(&BackboneConfig::octave(8), &mut rng).unwrap();
        let b = Backbone::<f64>::new(&BackboneConfig::plain(8), &mut rng).unwrap();
        assert_eq!(a.num_params(), b.num_params());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = BackboneConfig::octave(4);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<BackboneConfig>(&text).unwrap(), cfg);
    }
}
