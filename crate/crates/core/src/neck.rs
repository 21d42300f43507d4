//! Dense cross-frequency fusion into M2..M5, the P2..P6 pyramid on top of it,
//! and a lateral/top-down baseline pyramid.

use octnet_tensor::{Conv2d, Graph, Module, Param, PoolMode, Scalar, UpsampleMode, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::HierarchyVars;
use crate::blocks::{Attention, Cbr, Inception, Resample, ResampleBlock};
use crate::error::{config, CoreError, Result};
use crate::octave::Split;

pub const LEVELS: [usize; 4] = [2, 3, 4, 5];
/// Width each donor sends to M2 at reference scale; doubles per level.
pub const BASE_CONTRIBUTION: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopdownSource {
    /// Upsample `M_{t+1}`.
    M,
    /// Upsample `P_{t+1}`.
    P,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    pub near_enabled: bool,
    pub far_enabled: bool,
    pub attention_enabled: bool,
    pub fusion_enabled: bool,
    pub out_channels: usize,
    pub topdown_source: TopdownSource,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            near_enabled: true,
            far_enabled: true,
            attention_enabled: true,
            fusion_enabled: true,
            out_channels: 64,
            topdown_source: TopdownSource::M,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(config("out_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    High,
    Low,
    /// The undivided top level.
    Whole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proximity {
    SameLevel,
    Near,
    Far,
}

impl Proximity {
    pub fn of(donor: usize, target: usize) -> Self {
        match donor.abs_diff(target) {
            0 => Proximity::SameLevel,
            1 => Proximity::Near,
            _ => Proximity::Far,
        }
    }
}

/// How a donor map is brought to the target's width and extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampler {
    /// Inception block, then bilinear by `2^up` (nonzero only for a same-level low map).
    Inception { up: u32 },
    /// A single CBR whose kernel and stride absorb any extent change.
    CbrOnly { kernel: usize, stride: usize },
    /// 1x1 CBR then bilinear by `2^m`.
    Up(u32),
    /// 1x1 CBR then `m` average pools.
    Down(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Connection {
    pub donor: usize,
    pub component: Component,
    pub target: usize,
    pub enabled: bool,
    pub proximity: Proximity,
    pub resampler: Resampler,
    pub channels: usize,
}

impl Connection {
    pub fn label(&self) -> String {
        let c = match self.component {
            Component::High => "h",
            Component::Low => "l",
            Component::Whole => "",
        };
        format!("O{}{c}", self.donor)
    }
}

/// Every (donor, component, target) triple in fixed order: targets ascending,
/// then donors ascending with high before low.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionPlan {
    pub connections: Vec<Connection>,
}

impl ConnectionPlan {
    /// Enabled connections into `target`, in concatenation order.
    pub fn donors(&self, target: usize) -> impl Iterator<Item = &Connection> {
        self.connections.iter().filter(move |c| c.enabled && c.target == target)
    }

    pub fn donor_labels(&self, target: usize) -> Vec<String> {
        self.donors(target).map(|c| c.label()).collect()
    }

    pub fn concat_width(&self, target: usize) -> usize {
        self.donors(target).map(|c| c.channels).sum()
    }
}

fn round_up4(c: usize) -> usize {
    c.div_ceil(4).max(1) * 4
}

/// Per-donor width sent into `M_target`.
pub fn contribution_width(target: usize, width_scale: usize, fusion_enabled: bool) -> usize {
    if fusion_enabled {
        round_up4((BASE_CONTRIBUTION << (target - 2)) / width_scale)
    } else {
        round_up4(BASE_CONTRIBUTION / width_scale)
    }
}

/// Spatial extent of a donor in units of the level-2 high map extent, as a
/// log2 shrink factor.
fn donor_shrink(donor: usize, component: Component) -> u32 {
    (donor - 2) as u32 + u32::from(component == Component::Low)
}

fn resampler(donor: usize, component: Component, target: usize, fusion: bool) -> Resampler {
    let from = donor_shrink(donor, component);
    let to = (target - 2) as u32;
    if fusion {
        if donor == target {
            return Resampler::Inception { up: from - to };
        }
        if target == donor + 1 {
            return match component {
                Component::High => Resampler::CbrOnly { kernel: 2, stride: 2 },
                _ => Resampler::CbrOnly { kernel: 1, stride: 1 },
            };
        }
    }
    match from.cmp(&to) {
        std::cmp::Ordering::Equal => Resampler::CbrOnly { kernel: 1, stride: 1 },
        std::cmp::Ordering::Greater => Resampler::Up(from - to),
        std::cmp::Ordering::Less => Resampler::Down(to - from),
    }
}

/// The full dense wiring with toggles applied.
pub fn plan_connections(levels: &[usize], cfg: &NeckConfig, width_scale: usize) -> ConnectionPlan {
    let mut donors = Vec::new();
    for &j in levels {
        if j == 5 {
            donors.push((j, Component::Whole));
        } else {
            donors.push((j, Component::High));
            donors.push((j, Component::Low));
        }
    }
    let mut connections = Vec::new();
    for &i in levels {
        for &(j, component) in &donors {
            let proximity = Proximity::of(j, i);
            let enabled = match proximity {
                Proximity::SameLevel => true,
                Proximity::Near => cfg.near_enabled,
                Proximity::Far => cfg.far_enabled,
            };
            connections.push(Connection {
                donor: j,
                component,
                target: i,
                enabled,
                proximity,
                resampler: resampler(j, component, i, cfg.fusion_enabled),
                channels: contribution_width(i, width_scale, cfg.fusion_enabled),
            });
        }
    }
    ConnectionPlan { connections }
}

/// The module realizing one connection.
#[derive(Clone, Debug)]
pub enum DonorMapper<T> {
    Inception { block: Inception<T>, up: u32 },
    Cbr(Cbr<T>),
    Resample(ResampleBlock<T>),
}

impl<T: Scalar> DonorMapper<T> {
    fn new(name: &str, c_in: usize, conn: &Connection, rng: &mut impl Rng) -> Result<Self> {
        let c = conn.channels;
        Ok(match conn.resampler {
            Resampler::Inception { up } => DonorMapper::Inception {
                block: Inception::new(name, c_in, c, rng)?,
                up,
            },
            Resampler::CbrOnly { kernel, stride } => DonorMapper::Cbr(Cbr::new(name, c_in, c, kernel, stride, 0, rng)),
            Resampler::Up(m) => DonorMapper::Resample(ResampleBlock::new(name, c_in, c, Resample::Up(m), rng)?),
            Resampler::Down(m) => DonorMapper::Resample(ResampleBlock::new(name, c_in, c, Resample::Down(m), rng)?),
        })
    }

    fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            DonorMapper::Inception { block, up } => {
                let y = block.forward(g, x)?;
                if *up == 0 {
                    Ok(y)
                } else {
                    Resample::Up(*up).apply(&y)
                }
            }
            DonorMapper::Cbr(c) => c.forward(g, x),
            DonorMapper::Resample(r) => r.forward(g, x),
        }
    }
}

impl<T: Scalar> Module<T> for DonorMapper<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            DonorMapper::Inception { block, .. } => block.visit(f),
            DonorMapper::Cbr(c) => c.visit(f),
            DonorMapper::Resample(r) => r.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            DonorMapper::Inception { block, .. } => block.visit_mut(f),
            DonorMapper::Cbr(c) => c.visit_mut(f),
            DonorMapper::Resample(r) => r.visit_mut(f),
        }
    }
}

/// Intermediate map `M_i`: mapped donors, concatenation, CBR, optional attention.
#[derive(Clone, Debug)]
pub struct FusionLevel<T> {
    pub target: usize,
    pub connections: Vec<Connection>,
    pub mappers: Vec<DonorMapper<T>>,
    pub fuse: Cbr<T>,
    pub attention: Option<Attention<T>>,
}

crate::module_fields!(FusionLevel { mappers, fuse, attention });

#[derive(Clone, Debug)]
pub struct OcsaFpn<T> {
    pub config: NeckConfig,
    pub width_scale: usize,
    pub plan: ConnectionPlan,
    pub levels: Vec<FusionLevel<T>>,
    /// CBRs producing P2..P5, finest first.
    pub smooth: Vec<Cbr<T>>,
    pub p6: Cbr<T>,
}

/// Output of either pyramid: P2..P6, finest first.
#[derive(Clone)]
pub struct Pyramid<'g, T> {
    pub levels: Vec<Var<'g, T>>,
}

fn donor_channels(split: &Split, level: usize, component: Component) -> usize {
    match component {
        Component::High => split.high,
        Component::Low => split.low,
        Component::Whole => {
            debug_assert_eq!(level, 5);
            split.total()
        }
    }
}

fn donor_var<'g, T: Scalar>(h: &HierarchyVars<'g, T>, conn: &Connection) -> Result<Var<'g, T>> {
    let level = h.level(conn.donor);
    match conn.component {
        Component::High | Component::Whole => Ok(level.high.clone()),
        Component::Low => level
            .low
            .clone()
            .ok_or_else(|| CoreError::Structure(format!("donor {} has no low map", conn.label()))),
    }
}

impl<T: Scalar> OcsaFpn<T> {
    /// `splits` are the backbone's per-level channel splits; levels 2..4 must
    /// carry low maps and level 5 must not.
    pub fn new(cfg: &NeckConfig, splits: &[Split; 4], width_scale: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        for (k, s) in splits.iter().enumerate() {
            if (k < 3) == (s.low == 0) {
                return Err(config(format!(
                    "dense fusion needs low maps exactly at levels 2..4; level {} has {} low channels",
                    k + 2,
                    s.low
                )));
            }
        }
        let plan = plan_connections(&LEVELS, cfg, width_scale);
        let reduction = Attention::<T>::reduction_for(width_scale);
        let mut levels = Vec::with_capacity(4);
        for &i in &LEVELS {
            let connections: Vec<Connection> = plan.donors(i).copied().collect();
            let mut mappers = Vec::with_capacity(connections.len());
            for conn in &connections {
                let name = format!("neck.m{i}.{}", conn.label().to_lowercase());
                let c_in = donor_channels(&splits[conn.donor - 2], conn.donor, conn.component);
                mappers.push(DonorMapper::new(&name, c_in, conn, rng)?);
            }
            let width = plan.concat_width(i);
            let fuse = Cbr::same(&format!("neck.m{i}.fuse"), width, cfg.out_channels, 1, rng);
            let attention = if cfg.attention_enabled {
                Some(Attention::new(&format!("neck.m{i}.att"), cfg.out_channels, reduction, rng)?)
            } else {
                None
            };
            levels.push(FusionLevel {
                target: i,
                connections,
                mappers,
                fuse,
                attention,
            });
        }
        let c = cfg.out_channels;
        let smooth = LEVELS
            .iter()
            .map(|i| Cbr::same(&format!("neck.p{i}"), c, c, 3, rng))
            .collect();
        let p6 = Cbr::same("neck.p6", c, c, 3, rng);
        Ok(Self {
            config: cfg.clone(),
            width_scale,
            plan,
            levels,
            smooth,
            p6,
        })
    }

    /// `M_i` before and after the attention block (the same var when disabled).
    pub fn fuse_level_parts<'g>(&self, i: usize, g: &'g Graph<T>, h: &HierarchyVars<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let level = self
            .levels
            .get(i.wrapping_sub(2))
            .ok_or_else(|| config(format!("no fusion level {i}")))?;
        let extent = h.level(i).high.shape();
        let mut mapped = Vec::with_capacity(level.mappers.len());
        for (conn, mapper) in level.connections.iter().zip(&level.mappers) {
            let y = mapper.forward(g, &donor_var(h, conn)?)?;
            let s = y.shape();
            if (s.h, s.w) != (extent.h, extent.w) {
                return Err(CoreError::Structure(format!(
                    "donor {} reached {}x{} but M{i} is {}x{}",
                    conn.label(),
                    s.h,
                    s.w,
                    extent.h,
                    extent.w
                )));
            }
            mapped.push(y);
        }
        let refs: Vec<&Var<'g, T>> = mapped.iter().collect();
        let pre = level.fuse.forward(g, &Var::concat(&refs)?)?;
        let post = match &level.attention {
            Some(a) => a.forward(g, &pre)?,
            None => pre.clone(),
        };
        Ok((pre, post))
    }

    pub fn fuse_level<'g>(&self, i: usize, g: &'g Graph<T>, h: &HierarchyVars<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.fuse_level_parts(i, g, h)?.1)
    }

    /// P2..P6 from M2..M5.
    pub fn build_pyramid<'g>(&self, g: &'g Graph<T>, m: &[Var<'g, T>]) -> Result<Pyramid<'g, T>> {
        if m.len() != 4 {
            return Err(config(format!("pyramid needs 4 intermediate maps, got {}", m.len())));
        }
        let mut p: Vec<Option<Var<'g, T>>> = vec![None; 4];
        p[3] = Some(self.smooth[3].forward(g, &m[3])?);
        for t in (0..3).rev() {
            let own = self.smooth[t].forward(g, &m[t])?;
            let source = match self.config.topdown_source {
                TopdownSource::M => m[t + 1].clone(),
                TopdownSource::P => p[t + 1].clone().expect("filled coarse to fine"),
            };
            let down = source.upsample(2, UpsampleMode::Bilinear)?;
            p[t] = Some(own.add(&down)?);
        }
        let mut levels: Vec<Var<'g, T>> = p.into_iter().map(|v| v.expect("all levels filled")).collect();
        levels.push(self.p6.forward(g, &m[3].pool2d(2, PoolMode::Max)?)?);
        Ok(Pyramid { levels })
    }

    pub fn intermediate<'g>(&self, g: &'g Graph<T>, h: &HierarchyVars<'g, T>) -> Result<Vec<Var<'g, T>>> {
        LEVELS.iter().map(|&i| self.fuse_level(i, g, h)).collect()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, h: &HierarchyVars<'g, T>) -> Result<Pyramid<'g, T>> {
        let m = self.intermediate(g, h)?;
        self.build_pyramid(g, &m)
    }
}

crate::module_fields!(OcsaFpn { levels, smooth, p6 });

/// 1x1 laterals, nearest top-down additions, 3x3 smoothing, P6 by max pool.
#[derive(Clone, Debug)]
pub struct BaselineFpn<T> {
    pub laterals: Vec<Conv2d<T>>,
    pub smooth: Vec<Conv2d<T>>,
}

impl<T: Scalar> BaselineFpn<T> {
    /// `in_channels` are the widths of C2..C5.
    pub fn new(in_channels: &[usize], out_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_channels.len() != 4 || out_channels == 0 {
            return Err(config("baseline pyramid needs four inputs and positive width"));
        }
        let laterals = in_channels
            .iter()
            .zip(LEVELS)
            .map(|(&c, i)| Conv2d::same(&format!("fpn.lat{i}"), c, out_channels, 1, true, rng))
            .collect();
        let smooth = LEVELS
            .iter()
            .map(|i| Conv2d::same(&format!("fpn.smooth{i}"), out_channels, out_channels, 3, true, rng))
            .collect();
        Ok(Self { laterals, smooth })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, c: &[Var<'g, T>]) -> Result<Pyramid<'g, T>> {
        if c.len() != 4 {
            return Err(config(format!("baseline pyramid needs 4 inputs, got {}", c.len())));
        }
        let mut merged: Vec<Option<Var<'g, T>>> = vec![None; 4];
        merged[3] = Some(self.laterals[3].forward(g, &c[3])?);
        for t in (0..3).rev() {
            let lat = self.laterals[t].forward(g, &c[t])?;
            let up = merged[t + 1]
                .as_ref()
                .expect("filled coarse to fine")
                .upsample(2, UpsampleMode::Nearest)?;
            merged[t] = Some(lat.add(&up)?);
        }
        let mut levels = Vec::with_capacity(5);
        for (t, m) in merged.iter().enumerate() {
            levels.push(self.smooth[t].forward(g, m.as_ref().expect("all levels filled"))?);
        }
        let p6 = levels[3].pool2d(2, PoolMode::Max)?;
        levels.push(p6);
        Ok(Pyramid { levels })
    }
}

crate::module_fields!(BaselineFpn { laterals, smooth });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contribution_widths_double_per_level() {
        let w: Vec<usize> = LEVELS.iter().map(|&i| contribution_width(i, 1, true)).collect();
        assert_eq!(w, [32, 64, 128, 256]);
        let w: Vec<usize> = LEVELS.iter().map(|&i| contribution_width(i, 8, true)).collect();
        assert_eq!(w, [4, 8, 16, 32]);
        assert_eq!(contribution_width(2, 16, true), 4);
        assert_eq!(contribution_width(5, 8, false), 4);
    }

    #[test]
    fn resampler_cases() {
        let plan = plan_connections(&LEVELS, &NeckConfig::default(), 8);
        let find = |j, comp, i| {
            plan.connections
                .iter()
                .find(|c| c.donor == j && c.component == comp && c.target == i)
                .unwrap()
                .resampler
        };
        assert_eq!(find(3, Component::High, 3), Resampler::Inception { up: 0 });
        assert_eq!(find(3, Component::Low, 3), Resampler::Inception { up: 1 });
        assert_eq!(find(5, Component::Whole, 5), Resampler::Inception { up: 0 });
        assert_eq!(find(2, Component::High, 3), Resampler::CbrOnly { kernel: 2, stride: 2 });
        assert_eq!(find(2, Component::Low, 3), Resampler::CbrOnly { kernel: 1, stride: 1 });
        assert_eq!(find(2, Component::High, 4), Resampler::Down(2));
        assert_eq!(find(2, Component::Low, 4), Resampler::Down(1));
        assert_eq!(find(4, Component::High, 2), Resampler::Up(2));
        assert_eq!(find(4, Component::Low, 2), Resampler::Up(3));
        assert_eq!(find(5, Component::Whole, 2), Resampler::Up(3));
    }

    #[test]
    fn uniform_plan_has_no_inception() {
        let cfg = NeckConfig {
            fusion_enabled: false,
            ..NeckConfig::default()
        };
        let plan = plan_connections(&LEVELS, &cfg, 8);
        assert!(plan
            .connections
            .iter()
            .all(|c| !matches!(c.resampler, Resampler::Inception { .. }) && c.channels == 4));
    }
}
