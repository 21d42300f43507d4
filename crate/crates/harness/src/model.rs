//! Backbone, neck and head assembled into one trainable detector.

use octnet_core::{Backbone, BaselineFpn, LowFreqAdapter, OcsaFpn, Pyramid, Variant};
use octnet_detect::{DetectionHead, LevelOutput};
use octnet_tensor::{Graph, Module, Param, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, NeckKind};
use crate::error::Result;

#[derive(Clone, Debug)]
pub enum Neck<T> {
    Ocsa(OcsaFpn<T>),
    /// A vanilla pyramid; the adapter is present when the backbone is octave.
    Fpn { adapter: Option<LowFreqAdapter<T>>, fpn: BaselineFpn<T> },
}

impl<T: Scalar> Module<T> for Neck<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Neck::Ocsa(n) => n.visit(f),
            Neck::Fpn { adapter, fpn } => {
                adapter.visit(f);
                fpn.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Neck::Ocsa(n) => n.visit_mut(f),
            Neck::Fpn { adapter, fpn } => {
                adapter.visit_mut(f);
                fpn.visit_mut(f);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector<T> {
    pub backbone: Backbone<T>,
    pub neck: Neck<T>,
    pub head: DetectionHead<T>,
}

octnet_core::module_fields!(Detector { backbone, neck, head });

impl<T: Scalar> Detector<T> {
    /// Builds with the model seed; the same config always gives the same weights.
    pub fn new(cfg: &ExperimentConfig, num_classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.model);
        let backbone = Backbone::new(&cfg.backbone, &mut rng)?;
        let splits = backbone.level_splits();
        let out = cfg.neck_config.out_channels;
        let neck = match cfg.neck {
            NeckKind::Ocsafpn => Neck::Ocsa(OcsaFpn::new(&cfg.neck_config, &splits, cfg.backbone.width_scale, &mut rng)?),
            NeckKind::BaselineFpn => {
                let adapter = (cfg.backbone.variant == Variant::Octave).then(|| LowFreqAdapter::new(&splits, &mut rng));
                let widths = LowFreqAdapter::<T>::widths(&splits);
                Neck::Fpn { adapter, fpn: BaselineFpn::new(&widths, out, &mut rng)? }
            }
        };
        let head = DetectionHead::new(cfg.head_config(num_classes), &mut rng)?;
        Ok(Self { backbone, neck, head })
    }

    pub fn pyramid<'g>(&self, g: &'g Graph<T>, images: &Var<'g, T>) -> Result<Pyramid<'g, T>> {
        let h = self.backbone.forward(g, images)?;
        Ok(match &self.neck {
            Neck::Ocsa(n) => n.forward(g, &h)?,
            Neck::Fpn { adapter: Some(a), fpn } => fpn.forward(g, &a.forward(g, &h)?)?,
            Neck::Fpn { adapter: None, fpn } => {
                let c: Vec<Var<'g, T>> = h.levels.iter().map(|l| l.high.clone()).collect();
                fpn.forward(g, &c)?
            }
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, images: &Var<'g, T>) -> Result<Vec<LevelOutput<'g, T>>> {
        let p = self.pyramid(g, images)?;
        Ok(self.head.forward(g, &p.levels)?)
    }
}
