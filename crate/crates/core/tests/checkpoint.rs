mod common;

use common::rng;
use octnet_core::checkpoint::{load, read_manifest, save};
use octnet_core::{Backbone, BackboneConfig};
use octnet_tensor::Module;

#[test]
fn round_trip_restores_every_param() {
    let dir = tempfile::tempdir().unwrap();
    let a = Backbone::<f32>::new(&BackboneConfig::octave(16), &mut rng(1)).unwrap();
    let manifest = save(dir.path(), &a, "abc123", serde_json::json!({"step": 7})).unwrap();
    assert_eq!(manifest.tensors.len(), a.params().len());
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    let mut b = Backbone::<f32>::new(&BackboneConfig::octave(16), &mut rng(2)).unwrap();
    assert_ne!(a.params(), b.params());
    load(dir.path(), &mut b, Some("abc123")).unwrap();
    assert_eq!(a.params(), b.params());
}

#[test]
fn mismatches_leave_the_module_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let small = Backbone::<f32>::new(&BackboneConfig::octave(16), &mut rng(1)).unwrap();
    save(dir.path(), &small, "h", serde_json::Value::Null).unwrap();
    let mut b = Backbone::<f32>::new(&BackboneConfig::octave(16), &mut rng(3)).unwrap();
    let before: Vec<_> = b.params().into_iter().cloned().collect();
    assert!(load(dir.path(), &mut b, Some("other")).is_err());
    let mut wide = Backbone::<f32>::new(&BackboneConfig::octave(8), &mut rng(3)).unwrap();
    let wide_before: Vec<_> = wide.params().into_iter().cloned().collect();
    assert!(load(dir.path(), &mut wide, None).is_err());
    assert_eq!(b.params().into_iter().cloned().collect::<Vec<_>>(), before);
    assert_eq!(wide.params().into_iter().cloned().collect::<Vec<_>>(), wide_before);
}
