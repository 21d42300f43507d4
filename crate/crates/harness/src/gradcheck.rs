//! A registry of double-precision gradient checks, one per op or block.

use std::fmt;

use octnet_core::{
    Attention, BackboneConfig, Cbr, HierarchyVars, Inception, NeckConfig, OctVar, OcsaFpn, OctaveConv, Split, TopdownSource,
};
use octnet_detect::{assign, detection_loss, DetectionHead, HeadConfig, RotatedBox};
use octnet_tensor::{
    grad_check_module, randomize_biases, BatchNorm2d, Conv2d, Deconv2d, GradCheckOptions, GradCheckReport, Graph, LeafSet,
    Mode, Param, PoolMode, Shape, Tensor, UpsampleMode, Var, WithInput,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;

type Runner = Box<dyn Fn() -> Result<GradCheckReport>>;

pub struct Check {
    pub name: String,
    run: Runner,
}

impl Check {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<GradCheckReport> + 'static) -> Self {
        Self { name: name.into(), run: Box::new(run) }
    }
}

/// Outcome of one registered check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    /// Set when the check itself errored.
    pub error: Option<String>,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => write!(f, "{verdict} {:<24} error: {e}", self.name),
            None => write!(f, "{verdict} {:<24} max_rel_error {:.3e} over {} coords", self.name, self.max_rel_error, self.checked),
        }
    }
}

pub fn run_checks(checks: &[Check], tol: f64) -> Vec<CheckLine> {
    checks
        .iter()
        .map(|c| match (c.run)() {
            Ok(r) => CheckLine {
                name: c.name.clone(),
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                passed: r.max_rel_error <= tol && r.checked > 0,
                error: None,
            },
            Err(e) => CheckLine { name: c.name.clone(), max_rel_error: f64::NAN, checked: 0, passed: false, error: Some(e.to_string()) },
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rnd(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::seeded_randn(shape, seed)
}

/// Random weighted sum, so the loss depends on every output element.
fn probe<'g>(v: &Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    Ok(v.dot_const(&rnd(v.shape(), seed))?)
}

fn default_opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn sampled(n: usize, seed: u64) -> GradCheckOptions {
    GradCheckOptions { max_coords: Some(n), seed, ..GradCheckOptions::default() }
}

fn leaves(shapes: &[Shape], seed: u64) -> LeafSet<f64> {
    LeafSet(shapes.iter().enumerate().map(|(i, &s)| Param::new(format!("x{i}"), rnd(s, seed + i as u64))).collect())
}

fn conv2d() -> Result<GradCheckReport> {
    let mut conv = Conv2d::<f64>::new("conv", 2, 3, 3, 2, 1, true, &mut rng(1));
    let mut m = WithInput::new(&mut conv, rnd(Shape::new(2, 2, 5, 5), 2));
    grad_check_module(&mut m, EPS, &default_opts(), |g, m| probe(&m.module.forward(g, &g.param(&m.input))?, 3))
}

fn deconv2d() -> Result<GradCheckReport> {
    let mut de = Deconv2d::<f64>::double("deconv", 3, 2, true, &mut rng(4));
    let mut m = WithInput::new(&mut de, rnd(Shape::new(2, 3, 3, 3), 5));
    grad_check_module(&mut m, EPS, &default_opts(), |g, m| probe(&m.module.forward(g, &g.param(&m.input))?, 6))
}

fn pool2d() -> Result<GradCheckReport> {
    let mut x = leaves(&[Shape::new(2, 2, 4, 6)], 7);
    grad_check_module(&mut x, EPS, &default_opts(), |g, x: &LeafSet<f64>| {
        let v = g.param(&x.0[0]);
        let terms = [
            probe(&v.pool2d(2, PoolMode::Average)?, 8)?,
            probe(&v.pool2d(2, PoolMode::Max)?, 9)?,
            probe(&v.window_pool(3, 1, 1, PoolMode::Max)?, 10)?,
        ];
        Ok(Var::sum_all(&terms)?)
    })
}

fn upsample(mode: UpsampleMode, seed: u64) -> Result<GradCheckReport> {
    let mut x = leaves(&[Shape::new(2, 2, 3, 4)], seed);
    grad_check_module(&mut x, EPS, &default_opts(), move |g, x: &LeafSet<f64>| {
        let v = g.param(&x.0[0]);
        let terms = [probe(&v.upsample(2, mode)?, seed + 1)?, probe(&v.upsample(4, mode)?, seed + 2)?];
        Ok(Var::sum_all(&terms)?)
    })
}

fn batchnorm2d(mode: Mode) -> Result<GradCheckReport> {
    let mut bn = BatchNorm2d::<f64>::new("bn", 3);
    bn.gamma.value = rnd(bn.gamma.value.shape(), 13);
    bn.beta.value = rnd(bn.beta.value.shape(), 14);
    bn.running_mean.value = rnd(bn.running_mean.value.shape(), 15);
    bn.running_var.value = rnd(bn.running_var.value.shape(), 16).map(|v| v * v + 0.5);
    let mut m = WithInput::new(&mut bn, rnd(Shape::new(2, 3, 3, 4), 17));
    let opts = GradCheckOptions { mode, ..default_opts() };
    grad_check_module(&mut m, EPS, &opts, |g, m| probe(&m.module.forward(g, &g.param(&m.input))?, 18))
}

const OCT_IN: Split = Split { high: 2, low: 2 };
const OCT_OUT: Split = Split { high: 3, low: 1 };

fn octave_fixture(seed: u64) -> (OctaveConv<f64>, LeafSet<f64>) {
    let mut conv = OctaveConv::<f64>::new("oct", OCT_IN, OCT_OUT, 3, &mut rng(seed));
    randomize_biases(&mut conv, seed + 1);
    let x = leaves(&[Shape::new(2, OCT_IN.high, 6, 6), Shape::new(2, OCT_IN.low, 3, 3)], seed + 2);
    (conv, x)
}

fn octave_loss<'g>(g: &'g Graph<f64>, conv: &OctaveConv<f64>, x: &LeafSet<f64>) -> Result<Var<'g, f64>> {
    let v = OctVar::new(g.param(&x.0[0]), Some(g.param(&x.0[1])))?;
    let y = conv.forward(g, &v)?;
    let low = y.low.as_ref().ok_or_else(|| HarnessError::Numeric("octave output lost its low map".into()))?;
    Ok(probe(&y.high, 21)?.add(&probe(low, 22)?)?)
}

/// Every weight of all four paths plus both inputs.
fn octave_conv() -> Result<GradCheckReport> {
    let mut m = octave_fixture(19);
    grad_check_module(&mut m, EPS, &default_opts(), |g, (conv, x): &(OctaveConv<f64>, LeafSet<f64>)| octave_loss(g, conv, x))
}

/// Only the params of one path are perturbed; the check fails if the path is absent.
fn octave_path(path: &'static str) -> Result<GradCheckReport> {
    let mut m = octave_fixture(23);
    let prefix = format!("oct.{path}.");
    let mut found = false;
    octnet_tensor::Module::visit_mut(&mut m, &mut |p: &mut Param<f64>| {
        p.trainable = p.name.starts_with(&prefix);
        found |= p.trainable;
    });
    if !found {
        return Err(HarnessError::Validation(format!("octave conv has no {path} path")));
    }
    grad_check_module(&mut m, EPS, &default_opts(), |g, (conv, x): &(OctaveConv<f64>, LeafSet<f64>)| octave_loss(g, conv, x))
}

fn cbr() -> Result<GradCheckReport> {
    let mut block = Cbr::<f64>::same("cbr", 3, 4, 3, &mut rng(24));
    let mut m = WithInput::new(&mut block, rnd(Shape::new(2, 3, 5, 5), 25));
    grad_check_module(&mut m, EPS, &default_opts(), |g, m| probe(&m.module.forward(g, &g.param(&m.input))?, 26))
}

fn inception_block() -> Result<GradCheckReport> {
    let mut block = Inception::<f64>::new("inception", 3, 8, &mut rng(27))?;
    randomize_biases(&mut block, 28);
    let mut m = WithInput::new(&mut block, rnd(Shape::new(1, 3, 5, 5), 29));
    grad_check_module(&mut m, EPS, &default_opts(), |g, m| probe(&m.module.forward(g, &g.param(&m.input))?, 30))
}

fn attention_block() -> Result<GradCheckReport> {
    let mut block = Attention::<f64>::new("attention", 8, 4, &mut rng(31))?;
    let mut m = WithInput::new(&mut block, rnd(Shape::new(2, 8, 4, 4), 32));
    grad_check_module(&mut m, EPS, &default_opts(), |g, m| probe(&m.module.forward(g, &g.param(&m.input))?, 33))
}

const NECK_WIDTH_SCALE: usize = 16;

fn neck_splits() -> Result<[Split; 4]> {
    Ok(BackboneConfig::octave(NECK_WIDTH_SCALE).stage_splits()?)
}

/// Octave maps of a 64x64 input: high at n/4 .. n/32, low at half that.
fn hierarchy_leaves(splits: &[Split; 4], seed: u64) -> LeafSet<f64> {
    let mut v = Vec::new();
    for (k, s) in splits.iter().enumerate() {
        let e = 64 >> (k + 2);
        v.push(Param::new(format!("o{}h", k + 2), rnd(Shape::new(2, s.high, e, e), seed + 2 * k as u64)));
        if s.low > 0 {
            v.push(Param::new(format!("o{}l", k + 2), rnd(Shape::new(2, s.low, e / 2, e / 2), seed + 2 * k as u64 + 1)));
        }
    }
    LeafSet(v)
}

fn hierarchy_vars<'g>(g: &'g Graph<f64>, splits: &[Split; 4], x: &LeafSet<f64>) -> Result<HierarchyVars<'g, f64>> {
    let mut it = x.0.iter();
    let levels = splits
        .iter()
        .map(|s| {
            let high = g.param(it.next().expect("high leaf"));
            let low = (s.low > 0).then(|| g.param(it.next().expect("low leaf")));
            Ok(OctVar::new(high, low)?)
        })
        .collect::<Result<_>>()?;
    Ok(HierarchyVars { levels })
}

/// All four fused levels, with the hierarchy as inputs.
fn fuse_level() -> Result<GradCheckReport> {
    let splits = neck_splits()?;
    let cfg = NeckConfig { out_channels: 8, ..NeckConfig::default() };
    let mut neck = OcsaFpn::<f64>::new(&cfg, &splits, NECK_WIDTH_SCALE, &mut rng(34))?;
    randomize_biases(&mut neck, 35);
    let mut m = (neck, hierarchy_leaves(&splits, 36));
    grad_check_module(&mut m, EPS, &sampled(3, 37), |g, (neck, x): &(OcsaFpn<f64>, LeafSet<f64>)| {
        let h = hierarchy_vars(g, &splits, x)?;
        let terms = octnet_core::neck::LEVELS
            .into_iter()
            .map(|i| probe(&neck.fuse_level(i, g, &h)?, 40 + i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::sum_all(&terms)?)
    })
}

/// Top-down reconstruction from fused maps, for both top-down sources.
fn build_pyramid() -> Result<GradCheckReport> {
    let splits = neck_splits()?;
    let cfg = NeckConfig { out_channels: 4, ..NeckConfig::default() };
    let mut worst: Option<GradCheckReport> = None;
    for source in [TopdownSource::M, TopdownSource::P] {
        let mut neck = OcsaFpn::<f64>::new(&cfg, &splits, NECK_WIDTH_SCALE, &mut rng(44))?;
        neck.config.topdown_source = source;
        // Fused levels are not exercised here; the inputs stand in for them.
        neck.levels.clear();
        let ms = leaves(&(0..4).map(|k| Shape::new(2, 4, 16 >> k, 16 >> k)).collect::<Vec<_>>(), 45);
        let mut m = (neck, ms);
        let r = grad_check_module(&mut m, EPS, &default_opts(), |g, (neck, ms): &(OcsaFpn<f64>, LeafSet<f64>)| {
            let inputs: Vec<Var<f64>> = ms.0.iter().map(|p| g.param(p)).collect();
            let p = neck.build_pyramid(g, &inputs)?;
            let terms = p.levels.iter().enumerate().map(|(t, v)| probe(v, 50 + t as u64)).collect::<Result<Vec<_>>>()?;
            Ok::<_, HarnessError>(Var::sum_all(&terms)?)
        })?;
        worst = Some(match worst {
            Some(w) if w.max_rel_error >= r.max_rel_error => GradCheckReport { checked: w.checked + r.checked, ..w },
            Some(w) => GradCheckReport { checked: w.checked + r.checked, ..r },
            None => r,
        });
    }
    Ok(worst.expect("two sources"))
}

/// Head forward plus the full detection loss over five levels.
fn detection_head() -> Result<GradCheckReport> {
    let mut cfg = HeadConfig::new(2, 4);
    cfg.tower_depth = 2;
    let mut head = DetectionHead::<f64>::new(cfg, &mut rng(56))?;
    randomize_biases(&mut head, 57);
    let shapes: Vec<Shape> = octnet_detect::head::PYRAMID_STRIDES.iter().map(|s| Shape::new(2, 4, 64 / s, 64 / s)).collect();
    let gts = vec![
        vec![RotatedBox::new(20.0, 24.0, 14.0, 8.0, 0.4, 0)?, RotatedBox::new(44.0, 40.0, 30.0, 26.0, -0.2, 1)?],
        vec![RotatedBox::new(32.0, 30.0, 60.0, 40.0, 1.1, 1)?],
    ];
    let targets = assign::<f64>(&head.config, &shapes, &gts)?;
    let mut m = (head, leaves(&shapes, 58));
    grad_check_module(&mut m, EPS, &sampled(12, 59), |g, (head, x): &(DetectionHead<f64>, LeafSet<f64>)| {
        let levels: Vec<Var<f64>> = x.0.iter().map(|p| g.param(p)).collect();
        let out = head.forward(g, &levels)?;
        Ok(detection_loss(&head.config, &out, &targets)?.total)
    })
}

/// Every block the suite covers, in report order.
pub fn registry() -> Vec<Check> {
    let mut checks = vec![
        Check::new("conv2d", conv2d),
        Check::new("deconv2d", deconv2d),
        Check::new("pool2d", pool2d),
        Check::new("upsample_nearest", || upsample(UpsampleMode::Nearest, 11)),
        Check::new("upsample_bilinear", || upsample(UpsampleMode::Bilinear, 12)),
        Check::new("batchnorm2d", || batchnorm2d(Mode::Train)),
        Check::new("batchnorm2d_eval", || batchnorm2d(Mode::Eval)),
        Check::new("octave_conv", octave_conv),
    ];
    for path in ["hh", "hl", "lh", "ll"] {
        checks.push(Check::new(format!("octave_conv.{path}"), move || octave_path(path)));
    }
    checks.extend([
        Check::new("cbr", cbr),
        Check::new("inception_block", inception_block),
        Check::new("attention_block", attention_block),
        Check::new("fuse_level", fuse_level),
        Check::new("build_pyramid", build_pyramid),
        Check::new("detection_head", detection_head),
    ]);
    checks
}

/// Runs the registry, optionally only the checks whose name contains `filter`.
pub fn cmd_gradcheck(filter: Option<&str>) -> Vec<CheckLine> {
    let checks: Vec<Check> = registry().into_iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))).collect();
    run_checks(&checks, TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let names: Vec<String> = registry().into_iter().map(|c| c.name).collect();
        let set: std::collections::BTreeSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn line_format() {
        let line = CheckLine { name: "conv2d".into(), max_rel_error: 1.5e-9, checked: 84, passed: true, error: None };
        assert_eq!(line.to_string(), "PASS conv2d                   max_rel_error 1.500e-9 over 84 coords");
    }
}
