//! The rescaled solver against the direct solver and the comparison envelope.

use quench_core::diagnostics::comparison_check;
use quench_core::direct::{run_to_quench, DirectConfig};
use quench_core::model::{generate_initial_data, normalize_initial_data, NormalizedData};
use quench_core::rescaled::{evolve_rescaled, to_physical, RescaledConfig, RescaledTrace};
use quench_core::{Grid, GridFunction, InitialDataSpec, Perturbation};

const P: f64 = -1.0;
const B0: f64 = 0.05;
const C0: f64 = 0.5;

fn data(n: usize) -> NormalizedData {
    let spec = InitialDataSpec {
        b0: B0,
        c0: C0,
        delta0: 0.05,
        perturbation: Perturbation::GaussianBump,
        lambda0: 1.0,
    };
    let u0 = generate_initial_data(&spec, P, Grid::new(30.0, n).unwrap()).unwrap();
    normalize_initial_data(&u0, B0, C0, spec.delta0, P).unwrap()
}

fn rescaled(d: &NormalizedData, dtau: f64, tau_max: f64) -> RescaledTrace {
    let prof = d.profile(P).unwrap();
    let cfg = RescaledConfig { p: P, dtau, tau_max, sample_stride: 1, ..Default::default() };
    let trace = evolve_rescaled(&d.u, (prof.a(), prof.b()), 1.0, &cfg).unwrap();
    assert!(trace.abort.is_none());
    trace
}

/// Physical field at the last sample of the trace, on `window`.
fn physical(trace: &RescaledTrace, window: Grid) -> (f64, GridFunction) {
    let s = trace.samples.last().unwrap();
    let v = s.v.as_ref().unwrap();
    (s.t, to_physical(v, s.lambda, P, window).unwrap())
}

fn direct(u0: &GridFunction, t: f64, dt_max: f64, window: Grid) -> GridFunction {
    let cfg = DirectConfig { p: P, dt_max, t_max: t, stop_floor: 1e-9, sample_stride: usize::MAX, ..Default::default() };
    let u = run_to_quench(u0, &cfg).unwrap().last().u.clone();
    GridFunction::from_even_fn(window, |x| u.interpolate(x).unwrap())
}

fn gap(f: &GridFunction, g: &GridFunction) -> f64 {
    f.sub(g).unwrap().sup_norm()
}

#[test]
fn frames_agree_with_the_direct_solver() {
    let window = Grid::new(4.0, 161).unwrap();
    let d = data(1201);
    let d_fine = data(2401);
    let tau = 1.0;

    let (t, u_r) = physical(&rescaled(&d, 2e-3, tau), window);
    let (t_half, u_r_half) = physical(&rescaled(&d, 1e-3, tau), window);
    assert!((t - t_half).abs() < 1e-3 * t);
    let u_d = direct(&d.u, t, 1e-3, window);
    let u_d_fine = direct(&d_fine.u, t, 2.5e-4, window);

    let err_rescaled = gap(&u_r, &u_r_half);
    let err_direct = gap(&u_d, &u_d_fine);
    let defect = gap(&u_r, &u_d);
    println!("t={t:.4} defect={defect:.3e} rescaled err={err_rescaled:.3e} direct err={err_direct:.3e}");
    assert!(defect <= 5.0 * (err_rescaled + err_direct), "frame defect {defect}");
}

#[test]
fn solution_stays_above_the_comparison_envelope() {
    let d = data(1201);
    let trace = rescaled(&d, 1e-3, 5.0);
    let c = d.profile(P).unwrap().c();
    let report = comparison_check(&trace, d.beta, c, P).unwrap();
    assert!(report.fields_checked > 0);
    assert!(report.min_slack >= -1e-6, "{report:?}");
}

#[test]
fn physical_time_increases_and_scale_shrinks() {
    let trace = rescaled(&data(1201), 1e-3, 3.0);
    for w in trace.samples.windows(2) {
        assert!(w[1].t > w[0].t);
        assert!(w[1].lambda < w[0].lambda);
        assert!(w[1].v_min > 0.0);
    }
    // t* - t ≈ lambda^2 / (2a) along the run.
    let remaining = trace.time_to_quench();
    for (s, r) in trace.samples.iter().zip(&remaining) {
        assert!(*r > 0.0 && (r - s.lambda.powi(2) / (2.0 * s.a)).abs() < 0.05 * r);
    }
}
