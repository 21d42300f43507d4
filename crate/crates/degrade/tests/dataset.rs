use octnet_degrade::{build, Dataset, DatasetSpec, SceneSpec, PRESETS};

fn spec() -> DatasetSpec {
    let presets: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
    DatasetSpec::with_presets(SceneSpec { size: 64, object_size: (8.0, 20.0), ..SceneSpec::default() }, 4, 2, &presets, 3).unwrap()
}

#[test]
fn fan_out_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = build(dir.path(), &spec(), "h1", false).unwrap();
    assert_eq!(m.sets.len(), 1 + PRESETS.len());
    for set in &m.sets {
        assert_eq!(set.files["train"].len(), 4);
        assert_eq!(set.files["test"].len(), 2);
    }
    let ds = Dataset::open(dir.path()).unwrap();
    let test = ds.load("n0.2_v1", "test").unwrap();
    assert_eq!(test.iter().map(|s| s.image_id).collect::<Vec<_>>(), vec![4, 5]);
    assert!(test.iter().all(|s| !s.boxes.is_empty() && s.image.shape().h == 64));
    let clean = ds.load("clean", "test").unwrap();
    assert_eq!(clean[0].boxes, test[0].boxes);
    assert_ne!(clean[0].image, test[0].image);
    assert!(ds.load("nope", "test").is_err());
}

#[test]
fn rebuild_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build(a.path(), &spec(), "h", false).unwrap();
    octnet_tensor::set_threads(2);
    build(b.path(), &spec(), "h", false).unwrap();
    octnet_tensor::set_threads(1);
    let read = |d: &std::path::Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("stray.txt"), "x").unwrap();
    assert!(build(dir.path(), &spec(), "h", false).is_err());
    assert!(build(dir.path(), &spec(), "h", true).is_err());
    let ds = dir.path().join("ds");
    build(&ds, &spec(), "h", false).unwrap();
    assert!(build(&ds, &spec(), "h", false).is_err());
    build(&ds, &spec(), "h2", true).unwrap();
    assert_eq!(Dataset::open(&ds).unwrap().manifest.config_hash, "h2");
}
