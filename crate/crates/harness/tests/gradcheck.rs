//! The check runner must notice a wrong backward pass, not only bless correct ones.

use octnet_harness::gradcheck::{registry, run_checks, Check, EPS, TOLERANCE};
use octnet_harness::HarnessError;
use octnet_tensor::{grad_check_module, GradCheckOptions, LeafSet, Param, Shape, Tensor};

/// Elementwise square whose backward forgets the factor of two when `broken`.
fn square_check(broken: bool) -> Check {
    let name = if broken { "square.broken" } else { "square" };
    Check::new(name, move || {
        let mut x = LeafSet(vec![Param::new("x", Tensor::<f64>::seeded_randn(Shape::new(1, 2, 3, 3), 11))]);
        grad_check_module(&mut x, EPS, &GradCheckOptions::default(), move |g, x: &LeafSet<f64>| {
            let v = g.param(&x.0[0]);
            let input = v.value().clone();
            let out = input.map(|a| a * a);
            let k = if broken { 1.0 } else { 2.0 };
            let sq = g.custom_op(out, &[&v], move |grad, _| Ok(vec![Some(grad.zip_map(&input, "square", |g, a| k * g * a)?)]));
            Ok::<_, HarnessError>(sq.dot_const(&Tensor::seeded_randn(Shape::new(1, 2, 3, 3), 12))?)
        })
    })
}

#[test]
fn wrong_backward_is_reported() {
    let lines = run_checks(&[square_check(false), square_check(true)], TOLERANCE);
    assert!(lines[0].passed, "{}", lines[0]);
    assert!(!lines[1].passed);
    assert!(lines[1].max_rel_error > 0.1);
    assert!(lines[1].to_string().starts_with("FAIL square.broken"));
}

#[test]
fn registry_names_are_unique() {
    let names: Vec<String> = registry().into_iter().map(|c| c.name).collect();
    let set: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(set.len(), names.len());
    assert!(names.iter().any(|n| n == "octave_conv.hl"));
}
