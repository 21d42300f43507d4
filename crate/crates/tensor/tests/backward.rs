use octnet_tensor::{
    grad_check, grad_check_module, BatchNorm2d, Conv2d, Deconv2d, GradCheckOptions, Graph, Mode, Module, PoolMode, Reduce,
    Shape, Tensor, TensorError, UpsampleMode, Var, WithInput,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL64: f64 = 1e-6;
const EPS64: f64 = 1e-6;

fn rnd(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::seeded_randn(shape, seed)
}

/// Random weighted sum, so that ops whose plain sum is constant (BN) still get a
/// non-trivial loss.
fn probe<'g>(v: &Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    v.dot_const(&rnd(v.shape(), seed)).unwrap()
}

#[test]
fn sum_gives_ones() {
    let g = Graph::<f64>::new();
    let x = g.leaf(rnd(Shape::new(2, 3, 4, 5), 1));
    let grads = g.backward(&x.sum()).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &Tensor::ones(x.shape()));
}

#[test]
fn dead_relu_gives_zeros() {
    let g = Graph::<f64>::new();
    let x = g.leaf(rnd(Shape::new(1, 2, 3, 3), 2).map(|v| -v.abs() - 0.1));
    let grads = g.backward(&x.relu().sum()).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &Tensor::zeros(x.shape()));
}

#[test]
fn unreachable_leaf_gets_zeros() {
    let g = Graph::<f64>::new();
    let x = g.leaf(rnd(Shape::new(1, 1, 2, 2), 3));
    let unused = g.leaf(rnd(Shape::new(1, 4, 1, 1), 4));
    let grads = g.backward(&x.sum()).unwrap();
    assert_eq!(grads.get(&unused).unwrap(), &Tensor::zeros(unused.shape()));
}

#[test]
fn non_scalar_loss_rejected() {
    let g = Graph::<f64>::new();
    let x = g.leaf(rnd(Shape::new(1, 1, 2, 2), 5));
    assert!(matches!(g.backward(&x.relu()), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shared_param_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2d::<f64>::same("c", 2, 2, 3, true, &mut rng);
    let g = Graph::new();
    let x = g.constant(rnd(Shape::new(1, 2, 4, 4), 6));
    let a = conv.forward(&g, &x).unwrap();
    let b = conv.forward(&g, &a).unwrap();
    let grads = g.backward(&b.sum()).unwrap();
    assert!(grads.param("c.weight").is_some());
    assert_eq!(g.param(&conv.weight).value(), &conv.weight.value);
}

#[test]
fn linear_loss_is_exact() {
    let w = rnd(Shape::new(1, 3, 2, 2), 7);
    let x = rnd(Shape::new(1, 3, 2, 2), 8);
    // Central differences are exact for a linear loss at any step; a wide step keeps
    // rounding below the bound.
    let err = grad_check(&[w], 1e-2, |_, v| v[0].dot_const(&x)).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn conv_kernel_bias_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, s, p, h) in [(3, 1, 1, 5), (3, 2, 1, 5), (1, 1, 0, 4), (4, 2, 1, 6), (5, 1, 2, 5)] {
        let mut conv = Conv2d::<f64>::new("conv", 2, 3, k, s, p, true, &mut rng);
        let mut m = WithInput::new(&mut conv, rnd(Shape::new(2, 2, h, h), 9));
        let rep = grad_check_module(&mut m, EPS64, &GradCheckOptions::default(), |g, m| {
            let x = g.param(&m.input);
            Ok::<_, TensorError>(probe(&m.module.forward(g, &x)?, 10))
        })
        .unwrap();
        assert!(rep.max_rel_error <= TOL64, "k{k} s{s}: {rep:?}");
    }
}

#[test]
fn deconv_kernel_bias_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut de = Deconv2d::<f64>::double("de", 3, 2, true, &mut rng);
    let mut m = WithInput::new(&mut de, rnd(Shape::new(2, 3, 3, 3), 11));
    let rep = grad_check_module(&mut m, EPS64, &GradCheckOptions::default(), |g, m| {
        let x = g.param(&m.input);
        Ok::<_, TensorError>(probe(&m.module.forward(g, &x)?, 12))
    })
    .unwrap();
    assert!(rep.max_rel_error <= TOL64, "{rep:?}");
}

#[test]
fn pooling_and_upsampling() {
    let x = rnd(Shape::new(2, 2, 4, 6), 13);
    for mode in [PoolMode::Average, PoolMode::Max] {
        let err = grad_check(std::slice::from_ref(&x), EPS64, |_, v| Ok(probe(&v[0].pool2d(2, mode)?, 14))).unwrap();
        assert!(err <= TOL64, "{mode:?} {err}");
        let err = grad_check(std::slice::from_ref(&x), EPS64, |_, v| Ok(probe(&v[0].window_pool(3, 1, 1, mode)?, 15))).unwrap();
        assert!(err <= TOL64, "{mode:?} window {err}");
    }
    for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
        for f in [2, 4] {
            let err = grad_check(std::slice::from_ref(&x), EPS64, |_, v| Ok(probe(&v[0].upsample(f, mode)?, 16))).unwrap();
            assert!(err <= TOL64, "{mode:?} x{f} {err}");
        }
    }
}

#[test]
fn batchnorm_train_and_eval() {
    let mut bn = BatchNorm2d::<f64>::new("bn", 3);
    bn.gamma.value = rnd(bn.gamma.value.shape(), 17);
    bn.beta.value = rnd(bn.beta.value.shape(), 18);
    let mut m = WithInput::new(&mut bn, rnd(Shape::new(2, 3, 3, 4), 19));
    let rep = grad_check_module(&mut m, EPS64, &GradCheckOptions::default(), |g, m| {
        let x = g.param(&m.input);
        Ok::<_, TensorError>(probe(&m.module.forward(g, &x)?, 20))
    })
    .unwrap();
    assert!(rep.max_rel_error <= TOL64, "{rep:?}");

    // Running statistics are constants in evaluation mode.
    bn.running_mean.value = rnd(bn.running_mean.value.shape(), 24);
    bn.running_var.value = rnd(bn.running_var.value.shape(), 25).map(|v| v * v + 0.5);
    let opts = GradCheckOptions {
        mode: Mode::Eval,
        ..Default::default()
    };
    let mut m = WithInput::new(&mut bn, rnd(Shape::new(2, 3, 3, 4), 21));
    let rep = grad_check_module(&mut m, EPS64, &opts, |g, m| {
        let x = g.param(&m.input);
        Ok::<_, TensorError>(probe(&m.module.forward(g, &x)?, 26))
    })
    .unwrap();
    assert!(rep.max_rel_error <= TOL64, "{rep:?}");
}

#[test]
fn pointwise_and_broadcast() {
    let a = rnd(Shape::new(2, 3, 3, 3), 27);
    let b = rnd(Shape::new(2, 3, 3, 3), 28);
    let gate = rnd(Shape::new(2, 3, 1, 1), 29);
    let plane = rnd(Shape::new(2, 1, 3, 3), 30);
    let err = grad_check(&[a, b, gate, plane], EPS64, |_, v| {
        let s = v[0].mul(&v[1])?.sub(&v[1].sigmoid())?.add(&v[0].relu())?.scale(0.7);
        let s = s.mul_broadcast(&v[2].sigmoid())?.add_broadcast(&v[3])?;
        let s = s.mul_broadcast(&v[3])?;
        Ok(probe(&s, 31))
    })
    .unwrap();
    assert!(err <= TOL64, "{err}");
}

#[test]
fn reductions() {
    let x = rnd(Shape::new(2, 4, 3, 3), 32);
    for how in [Reduce::Mean, Reduce::Max] {
        let err = grad_check(std::slice::from_ref(&x), EPS64, |_, v| {
            let gp = probe(&v[0].global_pool(how), 33);
            let cr = probe(&v[0].channel_reduce(how), 34);
            gp.add(&cr)
        })
        .unwrap();
        assert!(err <= TOL64, "{how:?} {err}");
    }
}

#[test]
fn concat_routes_slices() {
    let a = rnd(Shape::new(2, 2, 3, 3), 35);
    let b = rnd(Shape::new(2, 3, 3, 3), 36);
    let err = grad_check(&[a, b], EPS64, |_, v| {
        let c = Var::concat(&[&v[0], &v[1], &v[0]])?;
        let s = c.slice_channels(1, 5)?;
        probe(&c, 37).add(&probe(&s, 38))
    })
    .unwrap();
    assert!(err <= TOL64, "{err}");

    // Concat gradient is exactly the upstream slices.
    let g = Graph::<f64>::new();
    let x = g.leaf(rnd(Shape::new(1, 2, 2, 2), 39));
    let y = g.leaf(rnd(Shape::new(1, 1, 2, 2), 40));
    let w = rnd(Shape::new(1, 3, 2, 2), 41);
    let loss = Var::concat(&[&x, &y]).unwrap().dot_const(&w).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &w.slice_channels(0, 2).unwrap());
    assert_eq!(grads.get(&y).unwrap(), &w.slice_channels(2, 1).unwrap());
}

#[test]
fn fused_losses() {
    let logits = rnd(Shape::new(1, 3, 4, 4), 42);
    let target = rnd(Shape::new(1, 3, 4, 4), 43).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let weight = rnd(Shape::new(1, 3, 4, 4), 44).map(f64::abs);
    let err = grad_check(std::slice::from_ref(&logits), EPS64, |_, v| v[0].bce_with_logits_sum(&target, Some(&weight))).unwrap();
    assert!(err <= TOL64, "{err}");

    let reg_target = rnd(Shape::new(1, 3, 4, 4), 45);
    let mask = rnd(Shape::new(1, 3, 4, 4), 46).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let err = grad_check(&[logits], EPS64, |_, v| v[0].smooth_l1_sum(&reg_target, &mask, 1.0 / 9.0)).unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn composite_conv_bn_relu_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    struct Net {
        conv: Conv2d<f64>,
        bn: BatchNorm2d<f64>,
    }
    impl Module<f64> for Net {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a octnet_tensor::Param<f64>)) {
            self.conv.visit(f);
            self.bn.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut octnet_tensor::Param<f64>)) {
            self.conv.visit_mut(f);
            self.bn.visit_mut(f);
        }
    }
    let mut net = Net {
        conv: Conv2d::same("conv", 2, 4, 3, true, &mut rng),
        bn: BatchNorm2d::new("bn", 4),
    };
    net.bn.beta.value = rnd(net.bn.beta.value.shape(), 47);
    let x = rnd(Shape::new(2, 2, 6, 6), 48);
    let rep = grad_check_module(&mut net, EPS64, &GradCheckOptions::default(), |g, net| {
        let h = net.conv.forward(g, &g.constant(x.clone()))?;
        let h = net.bn.forward(g, &h)?.relu().pool2d(2, PoolMode::Average)?;
        Ok::<_, TensorError>(probe(&h, 49))
    })
    .unwrap();
    assert!(rep.max_rel_error <= TOL64, "{rep:?}");
    assert_eq!(rep.checked, 4 * 2 * 9 + 4 + 4 + 4);
}

#[test]
fn single_precision_within_1e3() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conv = Conv2d::<f32>::same("conv", 3, 4, 3, true, &mut rng);
    let mut m = WithInput::new(&mut conv, Tensor::<f64>::seeded_randn(Shape::new(2, 3, 5, 5), 50).cast());
    let w: Tensor<f32> = Tensor::<f64>::seeded_randn(Shape::new(2, 4, 5, 5), 51).cast();
    let bn = BatchNorm2d::<f32>::new("bn", 4);
    let rep = grad_check_module(&mut m, 1e-2, &GradCheckOptions::default(), |g, m| {
        let x = g.param(&m.input);
        let y = bn.forward(g, &m.module.forward(g, &x)?)?.sigmoid();
        y.upsample(2, UpsampleMode::Bilinear)?.pool2d(2, PoolMode::Average)?.dot_const(&w)
    })
    .unwrap();
    assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
}

#[test]
fn subsampled_check_is_seeded() {
    let x = rnd(Shape::new(1, 4, 8, 8), 52);
    let mut set = octnet_tensor::LeafSet(vec![octnet_tensor::Param::new("x", x)]);
    let opts = GradCheckOptions {
        max_coords: Some(10),
        seed: 9,
        ..Default::default()
    };
    let run = |set: &mut octnet_tensor::LeafSet<f64>| {
        grad_check_module(set, EPS64, &opts, |g, s| Ok::<_, TensorError>(probe(&g.param(&s.0[0]).relu(), 53))).unwrap()
    };
    let a = run(&mut set);
    let b = run(&mut set);
    assert_eq!(a, b);
    assert_eq!(a.checked, 10);
}

#[test]
fn corrupted_backward_is_caught() {
    let x = rnd(Shape::new(1, 2, 3, 3), 54);
    let err = grad_check(&[x], EPS64, |g, v| {
        let value = v[0].value().map(|a| a * a);
        let src = v[0].value().clone();
        // Reports 3x instead of 2x.
        let y = g.custom_op(value, &[&v[0]], move |gr, _| Ok(vec![Some(gr.zip_map(&src, "sq", |g, a| 3.0 * g * a)?)]));
        Ok(probe(&y, 55))
    })
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn non_finite_loss_is_an_error() {
    let x = rnd(Shape::new(1, 1, 2, 2), 56);
    let res = grad_check(&[x], EPS64, |_, v| Ok(v[0].scale(f64::INFINITY).sum()));
    assert!(matches!(res, Err(TensorError::NonFinite(_))));
}
