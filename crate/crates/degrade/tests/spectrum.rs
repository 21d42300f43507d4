use octnet_degrade::{band_report, dft2, dft_magnitude, frequency_split, synth_scene, to_gray, DegradationSpec, SceneSpec};
use octnet_tensor::{Shape, Tensor};

#[test]
fn split_reconstructs_exactly() {
    let img = synth_scene(&SceneSpec::default(), 3).unwrap().image;
    for sigma in [0.5, 1.0, 2.0, 4.0] {
        let (low, high) = frequency_split(&img, sigma).unwrap();
        let back = low.zip_map(&high, "sum", |a, b| a + b).unwrap();
        assert_eq!(back, img);
    }
    let noisy = DegradationSpec::new(0.2, 1.0, 1).apply(&img, 3).unwrap();
    let (low, high) = frequency_split(&noisy, 1.5).unwrap();
    assert_eq!(low.zip_map(&high, "sum", |a, b| a + b).unwrap(), noisy);
    assert!(frequency_split(&img, 0.0).is_err());
}

#[test]
fn constant_has_no_high_band() {
    let flat = Tensor::full(Shape::new(1, 3, 16, 16), 0.25);
    let (_, high) = frequency_split(&flat, 2.0).unwrap();
    assert!(high.data().iter().all(|&v| v == 0.0));
}

#[test]
fn noise_shows_up_in_the_low_band() {
    let img = synth_scene(&SceneSpec::default(), 4).unwrap().image;
    let noisy = DegradationSpec::new(0.2, 1.0, 2).apply(&img, 4).unwrap();
    let r = band_report(&img, &noisy, 2.0).unwrap();
    assert!(r.residual_low > 0.0);
    assert!((r.noisy_low - r.clean_low).abs() > 0.0);
}

#[test]
fn dft_rejects_bad_sides() {
    assert!(dft2(&Tensor::zeros(Shape::new(1, 1, 12, 12))).is_err());
    assert!(dft2(&Tensor::zeros(Shape::new(1, 1, 8, 16))).is_err());
}

#[test]
fn constant_spectrum_is_a_single_center_bin() {
    let mag = dft_magnitude(&Tensor::full(Shape::new(1, 1, 16, 16), 0.7)).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let v = mag.at(0, 0, y, x);
            if (y, x) == (8, 8) {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0, "bin ({y}, {x})");
            }
        }
    }
}

#[test]
fn cosine_gives_a_symmetric_pair() {
    let (n, f) = (32usize, 5usize);
    let img = Tensor::from_fn(Shape::new(1, 1, n, n), |_, _, _, x| {
        0.5 + 0.25 * (2.0 * std::f64::consts::PI * (f * x) as f64 / n as f64).cos()
    });
    let mag = dft_magnitude(&img).unwrap();
    let c = n / 2;
    let left = mag.at(0, 0, c, c - f);
    let right = mag.at(0, 0, c, c + f);
    assert!(left > 0.5 && (left - right).abs() < 1e-12);
    let mut others = 0.0f64;
    for y in 0..n {
        for x in 0..n {
            if (y, x) != (c, c) && (y, x) != (c, c - f) && (y, x) != (c, c + f) {
                others = others.max(mag.at(0, 0, y, x));
            }
        }
    }
    assert_eq!(others, 0.0);
}

#[test]
fn parseval_holds() {
    let img = to_gray(&synth_scene(&SceneSpec::default(), 5).unwrap().image).unwrap();
    let spec = dft2(&img).unwrap();
    let lhs: f64 = spec.iter().map(|z| z.norm_sqr()).sum();
    let rhs = img.numel() as f64 * img.data().iter().map(|v| v * v).sum::<f64>();
    assert!((lhs - rhs).abs() / rhs < 1e-6);
}
