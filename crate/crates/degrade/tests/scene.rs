use octnet_degrade::{synth_scene, Background, SceneSpec};

fn spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, ..SceneSpec::default() }
}

#[test]
fn same_seed_same_scene() {
    let a = synth_scene(&spec(3), 17).unwrap();
    let b = synth_scene(&spec(3), 17).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, synth_scene(&spec(3), 18).unwrap().image);
    assert_ne!(a.image, synth_scene(&spec(4), 17).unwrap().image);
}

#[test]
fn boxes_stay_on_canvas() {
    let s = spec(9);
    let n = s.size as f64;
    for id in 0..40 {
        let scene = synth_scene(&s, id).unwrap();
        assert!(!scene.boxes.is_empty());
        for b in &scene.boxes {
            assert!((0.0..=n).contains(&b.cx) && (0.0..=n).contains(&b.cy));
            for (x, y) in b.corners() {
                assert!((0.0..=n).contains(&x) && (0.0..=n).contains(&y), "{b:?}");
            }
            assert!(b.class_id < s.num_classes);
        }
        let px = scene.image.data();
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn rectangle_pixel_mass_matches_box_area() {
    // Black canvas and one solid rectangle class: each pixel's first channel over
    // the class color is its coverage.
    let s = SceneSpec {
        num_classes: 1,
        objects: (1, 1),
        background: Background { level: 0.0, amplitude: 0.0, cell: 32, grain: 0.0 },
        ..spec(5)
    };
    let color = octnet_degrade::class_style(0).color[0];
    for id in 0..50 {
        let scene = synth_scene(&s, id).unwrap();
        let b = scene.boxes[0];
        let mass: f64 = (0..s.size * s.size).map(|i| scene.image.data()[i] / color).sum();
        let rel = (mass - b.w * b.h).abs() / (b.w * b.h);
        assert!(rel < 0.03, "scene {id}: mass {mass} vs {}", b.w * b.h);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(synth_scene(&SceneSpec { size: 100, ..spec(0) }, 0).is_err());
    assert!(synth_scene(&SceneSpec { objects: (0, 0), ..spec(0) }, 0).is_err());
    let empty = SceneSpec { objects: (0, 0), allow_empty: true, ..spec(0) };
    assert!(synth_scene(&empty, 0).unwrap().boxes.is_empty());
}

#[test]
fn crowded_canvas_records_skips() {
    let s = SceneSpec { objects: (30, 30), object_size: (36.0, 40.0), max_retries: 5, ..spec(2) };
    let scene = synth_scene(&s, 0).unwrap();
    assert!(scene.skipped > 0);
    assert_eq!(scene.boxes.len() + scene.skipped, 30);
}
