//! Parameter extraction across the admissible parameter box.

use proptest::prelude::*;
use quench_core::model::{hermite4_mode, v_profile};
use quench_core::splitting::{extract_params, g_jacobian, multi_start, G_map};
use quench_core::{Execution, Grid, GridFunction, ProfileParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> Grid {
    Grid::new(30.0, 1201).unwrap()
}

fn profile(a: f64, b: f64, p: f64) -> GridFunction {
    let prm = ProfileParams::new(a, b).unwrap();
    GridFunction::from_even_fn(grid(), |y| v_profile(prm, p, y))
}

fn box_points() -> impl Iterator<Item = (f64, f64)> {
    (0..5).flat_map(|i| (0..5).map(move |j| (0.25 + 0.1875 * i as f64, 0.025 * j as f64)))
}

#[test]
fn profiles_are_fixed_points_across_the_box() {
    for &p in &[-0.5, -1.0, -3.0] {
        for (a, b) in box_points() {
            let v = profile(a, b, p);
            let s = extract_params(&v, (a * 1.05, b + 0.01), p).unwrap();
            assert!((s.a - a).abs() < 1e-9, "p={p} a={a} b={b}: got a={}", s.a);
            assert!((s.b - b).abs() < 1e-9, "p={p} a={a} b={b}: got b={}", s.b);
        }
    }
}

#[test]
fn jacobian_matches_differences_across_the_box() {
    let p = -1.0;
    let eps = 1e-6;
    for (a, b) in box_points().filter(|&(_, b)| b > 0.0) {
        let v = profile(a * 1.02, b * 0.9, p).add(&hermite4_mode(grid(), a).unwrap().scale(1e-2)).unwrap();
        let jac = g_jacobian((a, b), &v, p).unwrap().total();
        for k in 0..2 {
            let shift = |s: f64| if k == 0 { (a + s, b) } else { (a, b + s) };
            let gh = G_map(shift(eps), &v, p).unwrap();
            let gl = G_map(shift(-eps), &v, p).unwrap();
            for i in 0..2 {
                let fd = (gh[i] - gl[i]) / (2.0 * eps);
                let scale = jac[i][k].abs().max(1e-3);
                assert!((fd - jac[i][k]).abs() <= 1e-6 * scale, "a={a} b={b} [{i}][{k}] {fd} vs {}", jac[i][k]);
            }
        }
    }
}

#[test]
fn random_starts_find_the_same_root() {
    let p = -1.0;
    let (a, b) = (0.5, 0.04);
    let v = profile(a, b, p).add(&hermite4_mode(grid(), a).unwrap().scale(5e-3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let starts: Vec<(f64, f64)> = (0..100)
        .map(|_| (a + rng.random_range(-0.05..0.05), (b + rng.random_range(-0.03..0.03)).max(0.0)))
        .collect();
    let roots = multi_start(&v, &starts, p, Execution::Parallel);
    let first = roots[0].as_ref().unwrap();
    for r in &roots {
        let r = r.as_ref().unwrap();
        assert!((r.a - first.a).abs() < 1e-8 && (r.b - first.b).abs() < 1e-8);
    }
    let seq = multi_start(&v, &starts, p, Execution::Sequential);
    for (s, q) in seq.iter().zip(&roots) {
        assert_eq!(s.as_ref().unwrap(), q.as_ref().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extraction_is_orthogonal_and_even(
        a in 0.3..0.9f64,
        b in 0.005..0.09f64,
        amp in -0.02..0.02f64,
        width in 2.0..12.0f64,
        p in -3.0..-0.5f64,
    ) {
        let bump = GridFunction::from_fn(grid(), |y| amp * (-y * y / width).exp() * (0.3 * y).cos());
        let v = profile(a, b, p).add(&bump).unwrap();
        let s = extract_params(&v, (a, b), p).unwrap();
        let scale = s.xi.l2_norm().max(1.0);
        prop_assert!(s.residual_0.abs() <= 1e-10 * scale);
        prop_assert!(s.residual_2.abs() <= 1e-10 * scale);
        prop_assert!(s.xi.odd_part().sup_norm() == 0.0);
        let g = G_map((s.a, s.b), &v, p).unwrap();
        prop_assert!(g[0].abs() <= 1e-10 * scale && g[1].abs() <= 1e-10 * scale);
    }
}
