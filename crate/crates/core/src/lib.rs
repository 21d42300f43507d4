//! Octave backbone, composite blocks, and the cross-frequency pyramid neck.

/// Implements `Module` by visiting the listed fields in order.
#[macro_export]
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: octnet_tensor::Scalar> octnet_tensor::Module<T> for $ty<T> {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a octnet_tensor::Param<T>)) {
                $( octnet_tensor::Module::visit(&self.$field, f); )*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut octnet_tensor::Param<T>)) {
                $( octnet_tensor::Module::visit_mut(&mut self.$field, f); )*
            }
        }
    };
}

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
mod error;
pub mod neck;
pub mod octave;

pub use backbone::{Backbone, BackboneConfig, Hierarchy, HierarchyVars, LowFreqAdapter, Variant};
pub use blocks::{Attention, Cbr, Inception, Resample, ResampleBlock};
pub use error::{CoreError, Result};
pub use neck::{
    plan_connections, BaselineFpn, Component, Connection, ConnectionPlan, NeckConfig, OcsaFpn, Proximity, Pyramid,
    Resampler, TopdownSource,
};
pub use octave::{OctVar, OctaveBn, OctaveConv, OctaveFeature, Split};
