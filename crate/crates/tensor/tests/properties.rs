use octnet_tensor::kernels;
use octnet_tensor::{PoolMode, Shape, Tensor, UpsampleMode};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_and_deconv_are_adjoint(
        (b, c_in, c_out) in (1usize..3, 1usize..4, 1usize..4),
        (k, stride, pad) in prop_oneof![Just((1, 1, 0)), Just((3, 1, 1)), Just((3, 2, 1)), Just((4, 2, 1)), Just((2, 2, 0))],
        cells in 2usize..5,
        seed in any::<u64>(),
    ) {
        // Pick an input extent that tiles exactly for this geometry.
        let h = (cells - 1) * stride + k - 2 * pad;
        let x = Tensor::<f64>::seeded_randn(Shape::new(b, c_in, h, h + stride), seed);
        let w = Tensor::<f64>::seeded_randn(Shape::new(c_out, c_in, k, k), seed ^ 1);
        let y_shape = kernels::conv2d(&x, &w, None, stride, pad).unwrap().shape();
        let y = Tensor::<f64>::seeded_randn(y_shape, seed ^ 2);
        let lhs = kernels::conv2d(&x, &w, None, stride, pad).unwrap().dot(&y).unwrap();
        let back = kernels::deconv2d(&y, &w, None, stride, pad).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let rhs = x.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0));
    }

    #[test]
    fn pool_then_nearest_is_a_projection((b, c, h, w, seed) in shape_strategy(), k in 1usize..5) {
        let x = Tensor::<f64>::seeded_randn(Shape::new(b, c, h * k, w * k), seed);
        let p = |t: &Tensor<f64>| {
            let pooled = kernels::pool2d(t, k, PoolMode::Average).unwrap().out;
            kernels::upsample(&pooled, k, UpsampleMode::Nearest).unwrap()
        };
        let once = p(&x);
        let twice = p(&once);
        if k.is_power_of_two() {
            // Tree-summed averages of 2^m equal values are exact.
            prop_assert_eq!(twice, once);
        } else {
            prop_assert!(twice.max_abs_diff(&once).unwrap() <= 1e-15 * 8.0);
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(
        (b, _, h, w, seed) in shape_strategy(),
        widths in prop::collection::vec(1usize..4, 1..5),
    ) {
        let parts: Vec<Tensor<f64>> = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Tensor::seeded_randn(Shape::new(b, c, h, w), seed.wrapping_add(i as u64)))
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let cat = Tensor::concat_channels(&refs).unwrap();
        let mut start = 0;
        for p in &parts {
            prop_assert_eq!(&cat.slice_channels(start, p.shape().c).unwrap(), p);
            start += p.shape().c;
        }
    }

    #[test]
    fn bilinear_upsampling_preserves_constants((b, c, h, w, _) in shape_strategy(), f in 1usize..5, v in -5.0f64..5.0) {
        let x = Tensor::full(Shape::new(b, c, h, w), v);
        let y = kernels::upsample(&x, f, UpsampleMode::Bilinear).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() <= 1e-12 * v.abs().max(1.0)));
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let x = Tensor::<f32>::seeded_randn(Shape::new(3, 4, 9, 9), 77);
        let w = Tensor::<f32>::seeded_randn(Shape::new(5, 4, 3, 3), 78);
        let y = kernels::conv2d(&x, &w, None, 2, 1).unwrap();
        let y = kernels::upsample(&y, 2, UpsampleMode::Bilinear).unwrap();
        kernels::deconv2d(&y, &w.slice_channels(0, 4).unwrap().reshape(Shape::new(5, 4, 3, 3)).unwrap(), None, 1, 1).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    octnet_tensor::set_threads(3);
    let threaded = run();
    octnet_tensor::set_threads(1);
    assert_eq!(a, threaded);
}
