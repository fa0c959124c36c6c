//! Heat semigroup checks against closed-form Gaussian moments.

use proptest::prelude::*;
use quench_core::{bracket, Execution, Extension, Grid, GridFunction};

fn grid() -> Grid {
    Grid::new(20.0, 801).unwrap()
}

#[test]
fn second_moment_grows_linearly() {
    // E[(x + sqrt(2t) Z)^2] = x^2 + 2t.
    let f = GridFunction::from_fn(grid(), |x| x * x);
    for &t in &[0.05, 0.2, 0.5] {
        let g = f.heat_convolve_with(t, Extension::Linear, Execution::Sequential).unwrap();
        for (x, v) in g.grid().nodes().iter().zip(g.values()) {
            if x.abs() <= 5.0 {
                assert!((v - (x * x + 2.0 * t)).abs() < 1e-6, "t={t} x={x} got {v}");
            }
        }
    }
}

#[test]
fn gaussian_stays_gaussian() {
    // e^{-x^2/4} after time t is (1+t)^{-1/2} e^{-x^2/(4(1+t))}.
    let f = GridFunction::from_fn(grid(), |x| (-x * x / 4.0).exp());
    let t = 0.7;
    let g = f.heat_convolve(t).unwrap();
    let exact = GridFunction::from_fn(grid(), |x| (1.0 + t).powf(-0.5) * (-x * x / (4.0 * (1.0 + t))).exp());
    assert!(g.sub(&exact).unwrap().sup_norm() < 1e-8);
}

#[test]
fn small_time_limit_is_identity() {
    // Fine grid: below t ~ h^2 the interpolation error O(h sqrt(t)) dominates.
    let f = GridFunction::from_fn(Grid::new(10.0, 2001).unwrap(), |x| x.cos() * (-x * x / 10.0).exp() + 2.0);
    let mut prev = f64::INFINITY;
    for &t in &[1e-2, 1e-3, 1e-4] {
        let err = f.heat_convolve(t).unwrap().sub(&f).unwrap().sup_norm();
        assert!(err < prev);
        assert!(err < 3.0 * t, "t={t} err={err}");
        prev = err;
    }
}

#[test]
fn weighted_growth_constant_is_at_most_two() {
    // ‖<x>^{-2} e^{tΔ} g‖ ≤ (1 + C t) ‖<x>^{-2} g‖ with C ≤ 2.
    let g = GridFunction::from_fn(Grid::new(40.0, 1601).unwrap(), |x| bracket(x).powi(2) * (0.7 * x).cos());
    let base = g.weighted_sup_norm(2.0, 0.0).unwrap();
    for &t in &[0.01, 0.1, 0.5, 1.0] {
        let n = g.heat_convolve(t).unwrap().weighted_sup_norm(2.0, 0.0).unwrap();
        let c = (n / base - 1.0) / t;
        assert!(c <= 2.0 + 1e-9, "t={t} C={c}");
    }
}

#[test]
fn trapezoid_is_second_order_on_a_kink() {
    // ∫ e^{-x^2} |x| dx = 1.
    let err = |n| {
        let f = GridFunction::from_fn(Grid::new(10.0, n).unwrap(), |x| (-x * x).exp() * x.abs());
        (f.integral() - 1.0).abs()
    };
    let (e1, e2, e3) = (err(101), err(201), err(401));
    let order1 = (e1 / e2).log2();
    let order2 = (e2 / e3).log2();
    assert!(order1 >= 1.9 && order2 >= 1.9, "orders {order1} {order2}");
}

fn profile() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.1..3.0f64, -1.0..1.0f64, 0.1..2.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn positivity_and_contraction((floor, amp, freq) in profile(), t in 0.001..1.0f64) {
        let f = GridFunction::from_fn(grid(), |x| floor + amp.abs() * (1.0 + (freq * x).sin()) * (-x * x / 20.0).exp());
        let g = f.heat_convolve(t).unwrap();
        prop_assert!(g.min() >= floor - 1e-10);
        prop_assert!(g.sup_norm() <= f.sup_norm() + 1e-10);
    }

    #[test]
    fn sequential_and_parallel_agree((floor, amp, freq) in profile(), t in 0.001..1.0f64) {
        let f = GridFunction::from_fn(grid(), |x| floor + amp * (freq * x).cos());
        let s = f.heat_convolve_with(t, Extension::Constant, Execution::Sequential).unwrap();
        let p = f.heat_convolve_with(t, Extension::Constant, Execution::Parallel).unwrap();
        prop_assert_eq!(s.values(), p.values());
    }
}
