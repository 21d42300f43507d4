mod common;

use common::{probe, rnd, rng, EPS64, TOL64};
use octnet_core::{OctVar, OctaveConv, OctaveFeature, Split};
use octnet_tensor::kernels::{self, PoolMode, UpsampleMode};
use octnet_tensor::{grad_check_module, Conv2d, GradCheckOptions, Graph, LeafSet, Module, Param, Scalar, Shape, Tensor};
use proptest::prelude::*;

fn run<T: Scalar>(conv: &OctaveConv<T>, x: &OctaveFeature<T>) -> octnet_core::Result<OctaveFeature<T>> {
    let g = Graph::inference();
    let v = OctVar::constant(&g, x);
    Ok(conv.forward(&g, &v)?.to_feature())
}

fn w<T: Scalar>(c: &Option<Conv2d<T>>) -> &Tensor<T> {
    &c.as_ref().unwrap().weight.value
}

fn degenerates_to_conv<T: Scalar>(tol: f64) {
    for k in [1, 3] {
        for stride in [1, 2] {
            let mut r = rng(k as u64 * 10 + stride as u64);
            let conv = OctaveConv::<T>::with_stride("o", Split::plain(3), Split::plain(5), k, stride, k / 2, &mut r);
            assert!(conv.lh.is_none() && conv.ll.is_none() && conv.hl.is_none());
            let x = rnd::<T>(Shape::new(2, 3, 9, 11), 7);
            let y = run(&conv, &OctaveFeature::new(x.clone(), None).unwrap()).unwrap();
            assert!(y.low.is_none());
            let reference = kernels::conv2d(&x, w(&conv.hh), None, stride, k / 2).unwrap();
            assert!(y.high.max_abs_diff(&reference).unwrap() <= tol, "k={k} stride={stride}");
        }
    }
}

#[test]
fn zero_alpha_is_plain_convolution_f64() {
    degenerates_to_conv::<f64>(0.0);
}

#[test]
fn zero_alpha_is_plain_convolution_f32() {
    degenerates_to_conv::<f32>(1e-6);
}

#[test]
fn constant_maps_with_scalar_kernels() {
    let mut r = rng(3);
    let one = Split { high: 1, low: 1 };
    let mut conv = OctaveConv::<f64>::new("o", one, one, 1, &mut r);
    let set = |c: &mut Option<Conv2d<f64>>, v: f64| c.as_mut().unwrap().weight.value = Tensor::full(Shape::new(1, 1, 1, 1), v);
    let (whh, wlh, wll, whl) = (0.5, -1.5, 2.0, 0.25);
    set(&mut conv.hh, whh);
    set(&mut conv.lh, wlh);
    set(&mut conv.ll, wll);
    set(&mut conv.hl, whl);
    let (a, b) = (1.25, -0.75);
    let x = OctaveFeature::new(Tensor::full(Shape::new(1, 1, 8, 8), a), Some(Tensor::full(Shape::new(1, 1, 4, 4), b))).unwrap();
    let y = run(&conv, &x).unwrap();
    assert!(y.high.data().iter().all(|&v| v == a * whh + b * wlh));
    assert!(y.low.unwrap().data().iter().all(|&v| v == b * wll + a * whl));
}

/// Each output branch built directly from tensor kernels.
fn oracle(conv: &OctaveConv<f64>, x: &OctaveFeature<f64>, k: usize) -> OctaveFeature<f64> {
    let pad = k / 2;
    let add = |acc: Option<Tensor<f64>>, t: Tensor<f64>| match acc {
        None => t,
        Some(mut a) => {
            a.add_assign(&t);
            a
        }
    };
    let mut high = None;
    let mut low = None;
    if let Some(c) = &conv.hh {
        high = Some(add(high, kernels::conv2d(&x.high, &c.weight.value, None, 1, pad).unwrap()));
    }
    if let (Some(c), Some(xl)) = (&conv.lh, &x.low) {
        let y = kernels::conv2d(xl, &c.weight.value, None, 1, pad).unwrap();
        high = Some(add(high, kernels::upsample(&y, 2, UpsampleMode::Nearest).unwrap()));
    }
    if let (Some(c), Some(xl)) = (&conv.ll, &x.low) {
        low = Some(add(low, kernels::conv2d(xl, &c.weight.value, None, 1, pad).unwrap()));
    }
    if let Some(c) = &conv.hl {
        let pooled = kernels::pool2d(&x.high, 2, PoolMode::Average).unwrap().out;
        low = Some(add(low, kernels::conv2d(&pooled, &c.weight.value, None, 1, pad).unwrap()));
    }
    OctaveFeature::new(high.unwrap(), low).unwrap()
}

fn random_feature(split: Split, b: usize, h: usize, w: usize, seed: u64) -> OctaveFeature<f64> {
    let high = rnd(Shape::new(b, split.high, h, w), seed);
    let low = (split.low > 0).then(|| rnd(Shape::new(b, split.low, h / 2, w / 2), seed ^ 0xabc));
    OctaveFeature::new(high, low).unwrap()
}

#[test]
fn matches_composition_oracle_on_100_fixtures() {
    let alphas = [0.0, 0.25, 0.5, 0.75];
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let c_in = 4 + (seed as usize % 3) * 4;
        let c_out = 4 + (seed as usize / 3 % 3) * 4;
        let a_in = alphas[seed as usize % 4];
        let a_out = alphas[(seed as usize / 4) % 4];
        let k = if seed % 2 == 0 { 3 } else { 1 };
        let (si, so) = (Split::new(c_in, a_in).unwrap(), Split::new(c_out, a_out).unwrap());
        let conv = OctaveConv::<f64>::new("o", si, so, k, &mut rng(seed));
        let x = random_feature(si, 1 + seed as usize % 2, 8, 6 + 2 * (seed as usize % 3), seed + 1000);
        let y = run(&conv, &x).unwrap();
        let want = oracle(&conv, &x, k);
        assert_eq!(y.low.is_some(), so.low > 0);
        worst = worst.max(y.high.max_abs_diff(&want.high).unwrap());
        if let (Some(a), Some(b)) = (&y.low, &want.low) {
            worst = worst.max(a.max_abs_diff(b).unwrap());
        }
    }
    assert!(worst <= 1e-12, "worst diff {worst}");
}

#[test]
fn odd_high_extent_is_rejected() {
    let s = Split { high: 2, low: 2 };
    let conv = OctaveConv::<f64>::new("o", Split::plain(2), s, 3, &mut rng(0));
    let x = OctaveFeature::new(rnd(Shape::new(1, 2, 7, 8), 1), None).unwrap();
    assert!(run(&conv, &x).is_err());
}

#[test]
fn channel_mismatch_is_rejected() {
    let s = Split { high: 2, low: 2 };
    let conv = OctaveConv::<f64>::new("o", s, s, 3, &mut rng(0));
    let x = random_feature(Split { high: 3, low: 1 }, 1, 8, 8, 2);
    assert!(run(&conv, &x).is_err());
    assert!(OctaveFeature::new(rnd::<f64>(Shape::new(1, 2, 8, 8), 1), Some(rnd(Shape::new(1, 2, 3, 4), 2))).is_err());
}

#[test]
fn split_rounds_and_reports_alpha() {
    assert_eq!(Split::new(10, 0.25).unwrap(), Split { high: 7, low: 3 });
    assert!(Split::new(4, 1.0).is_err());
    let f = random_feature(Split { high: 6, low: 2 }, 1, 4, 4, 0);
    assert_eq!(f.alpha(), 0.25);
}

#[test]
fn all_four_paths_pass_gradient_check() {
    let s = Split { high: 2, low: 2 };
    let conv = OctaveConv::<f64>::new("o", s, Split { high: 3, low: 1 }, 3, &mut rng(5));
    let x = random_feature(s, 2, 6, 6, 9);
    let mut fixture = (
        conv,
        LeafSet(vec![Param::new("xh", x.high.clone()), Param::new("xl", x.low.clone().unwrap())]),
    );
    let m = &mut fixture;
    let report = grad_check_module(m, EPS64, &GradCheckOptions::default(), |g, (conv, leaves): &(OctaveConv<f64>, LeafSet<f64>)| {
        let x = OctVar::new(g.param(&leaves.0[0]), Some(g.param(&leaves.0[1])))?;
        let y = conv.forward(g, &x)?;
        Ok::<_, octnet_core::CoreError>(probe(&y.high, 1).add(&probe(y.low.as_ref().unwrap(), 2))?)
    })
    .unwrap();
    for path in ["o.hh.weight", "o.lh.weight", "o.ll.weight", "o.hl.weight"] {
        assert!(m.params().iter().any(|p| p.name == path));
    }
    assert!(report.max_rel_error <= TOL64, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn low_map_is_half_and_counts_match_plain(
        c_in in 2usize..9, c_out in 2usize..9,
        a_in in prop_oneof![Just(0.0), Just(0.25), Just(0.5)],
        a_out in prop_oneof![Just(0.0), Just(0.25), Just(0.5)],
        k in prop_oneof![Just(1usize), Just(3)],
        half in 1usize..4, seed in any::<u64>(),
    ) {
        let si = Split::new(c_in, a_in).unwrap();
        let so = Split::new(c_out, a_out).unwrap();
        let conv = OctaveConv::<f64>::new("o", si, so, k, &mut rng(seed));
        prop_assert_eq!(conv.num_params(), c_in * c_out * k * k);
        let x = random_feature(si, 1, 2 * half, 2 * half + 2, seed);
        let y = run(&conv, &x).unwrap();
        let h = y.high.shape();
        prop_assert_eq!(h.c, so.high);
        if let Some(l) = &y.low {
            prop_assert_eq!((l.shape().h * 2, l.shape().w * 2, l.shape().c), (h.h, h.w, so.low));
        } else {
            prop_assert_eq!(so.low, 0);
        }
    }
}
