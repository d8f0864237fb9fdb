//! The statistics network on correlated Gaussians, where the mutual information is known in closed form.

use purify_core::numcore::rng;
use purify_core::recovery::{fit_mine, MineFitConfig};
use purify_core::{Scalar, Tensor};
use rand_distr::{Distribution, StandardNormal};

/// `n` pairs `(x, y)` with unit variances and correlation `rho`.
fn gaussian_pairs(n: usize, rho: Scalar, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng::seeded(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Scalar = StandardNormal.sample(&mut r);
        let e: Scalar = StandardNormal.sample(&mut r);
        xs.push(x);
        ys.push(rho * x + (1.0 - rho * rho).sqrt() * e);
    }
    (Tensor::new(vec![n, 1], xs).unwrap(), Tensor::new(vec![n, 1], ys).unwrap())
}

fn closed_form(rho: Scalar) -> Scalar {
    -0.5 * (1.0 - rho * rho).ln()
}

#[test]
fn closed_form_reference() {
    assert!((closed_form(0.9) - 0.830).abs() < 5e-4);
}

#[test]
fn correlated_pairs_are_estimated_within_twenty_percent() {
    let (a, b) = gaussian_pairs(4096, 0.9, 1);
    let est = fit_mine(&a, &b, &MineFitConfig::default()).unwrap();
    let (fa, fb) = gaussian_pairs(4096, 0.9, 2);
    let v = est.estimate_shuffled(&fa, &fb, 3).unwrap();
    let truth = closed_form(0.9);
    assert!((v - truth).abs() <= 0.2 * truth, "estimate {v} vs {truth}");
}

#[test]
fn independent_pairs_give_near_zero() {
    let (a, b) = gaussian_pairs(4096, 0.0, 4);
    let est = fit_mine(&a, &b, &MineFitConfig::default()).unwrap();
    let (fa, fb) = gaussian_pairs(4096, 0.0, 5);
    let v = est.estimate_shuffled(&fa, &fb, 6).unwrap();
    assert!(v <= 0.05, "estimate {v}");
}
