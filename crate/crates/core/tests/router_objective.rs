//! Gradient of the router objective against central differences, with the
//! noise draw frozen by reseeding and the expert selection fixed to all.

mod common;

use common::*;
use moelab::distill::{sar_objective, sar_objective_grad, KlDirection, Method};
use moelab::model::router_param;
use moelab::testkit::relative_error;

fn check(seed: u64, direction: KlDirection) -> f64 {
    let mut t = teacher(seed);
    // A nonzero noise projection so its gradient is exercised too.
    for (name, p) in t.named_params_mut() {
        if name.ends_with("w_noise") {
            p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * ((i + seed as usize) as f64).sin());
        }
    }
    let s = student(seed + 100);
    let batch = data(3, seed + 200);
    let cfg = moelab::distill::DistillConfig {
        sar_kl_direction: direction,
        beta: 0.5,
        ..distill_cfg(Method::Sar, 1)
    };
    let (value, grads) = sar_objective_grad(&t, &s, &batch, &cfg, seed).unwrap();
    assert_eq!(value, sar_objective(&t, &s, &batch, &cfg, seed).unwrap());
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, analytic) in grads {
        assert!(router_param(&name));
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut m = t.clone();
                for (n, p) in m.named_params_mut() {
                    if n == name {
                        p.data_mut()[j] += delta;
                    }
                }
                sar_objective(&m, &s, &batch, &cfg, seed).unwrap()
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

#[test]
fn router_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let err = check(seed, KlDirection::Forward);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
    let err = check(9, KlDirection::Reverse);
    assert!(err < 1e-4, "reverse: {err}");
}
