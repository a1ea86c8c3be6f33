use std::f64::consts::PI;

use aacord::chart::{
    angle_offset_check, build_system_chart, frequency_duality, verify_canonical_blocks, verify_equations_of_motion,
    verify_round_trip, Chart, ChartOptions,
};
use aacord::spec::load_catalog;
use aacord::structure::SystemDef;
use aacord::symplectic::PhasePoint;

fn chart_for(name: &str) -> (SystemDef, Chart) {
    let sys = load_catalog(name).unwrap();
    let chart = build_system_chart(&sys, 42, &ChartOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
    (sys, chart)
}

fn block_samples(chart: &Chart, count: usize, seed: u64) -> Vec<PhasePoint> {
    chart
        .sample_chart_points(count, seed, 1.0, 0.05)
        .unwrap()
        .iter()
        .map(|w| chart.inverse(w).unwrap())
        .collect()
}

/// (1/2π)∮ p dq for H = p²/2 − cos q below the separatrix, written with
/// sin(q/2) = k sin ψ so the integrand is smooth.
fn pendulum_action(e: f64) -> f64 {
    let k2 = (1.0 + e) / 2.0;
    let f = |psi: f64| {
        let c = psi.cos();
        4.0 * k2 * c * c / (1.0 - k2 * psi.sin().powi(2)).sqrt()
    };
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (a, b) = (0.0, PI / 2.0);
    let (fa, fm, fb) = (f(a), f(0.25 * PI), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    2.0 / PI * simpson(&f, a, b, fa, fm, fb, whole, 1e-13, 40)
}

#[test]
fn harmonic_actions_blocks_and_angle_rate() {
    let (sys, chart) = chart_for("harmonic1d");
    assert_eq!(chart.r(), 1);
    assert!((chart.lattice().basis[0][0] - 2.0 * PI).abs() < 1e-8);
    for e in [0.25, 0.5, 1.0, 2.0] {
        let (i, _) = chart.actions(&[e]);
        assert!((i[0] - e).abs() < 1e-7, "I({e}) = {}", i[0]);
    }
    let blocks = verify_canonical_blocks(&chart, &block_samples(&chart, 12, 7), true).unwrap();
    assert!(blocks.passed(), "{blocks:#?}");
    let h = sys.hamiltonian_expr().unwrap();
    let eom = verify_equations_of_motion(&chart, &h, &sys.reference, 20.0, 64, 42).unwrap();
    assert!(eom.passed(), "{eom:#?}");
    let slope = eom.check("eom_angle_slopes").unwrap().details["slopes"][0].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 1e-4);
}

#[test]
fn harmonic_chart_coordinates_match_polar_form() {
    let (_, chart) = chart_for("harmonic1d");
    // on the unit-energy circle the angle advances clockwise in (q, p) from the reference
    for phi in [0.3f64, 1.7, 4.0] {
        let z = [phi.cos() * 2f64.sqrt(), -phi.sin() * 2f64.sqrt()];
        let w = chart.forward(&z).unwrap();
        assert!((w.actions[0] - 1.0).abs() < 1e-9);
        let back = chart.inverse(&w).unwrap();
        assert!((back[0] - z[0]).abs() < 1e-9 && (back[1] - z[1]).abs() < 1e-9);
    }
}

#[test]
fn free_particle_round_trip_and_darboux() {
    let (_, chart) = chart_for("free1d");
    assert_eq!(chart.r(), 0);
    assert_eq!(chart.lattice().coarse_hits, 0);
    let rt = verify_round_trip(&chart, 20, 3, 2.0).unwrap();
    assert!(rt.value < 1e-9, "{rt:?}");
    let blocks = verify_canonical_blocks(&chart, &block_samples(&chart, 12, 9), true).unwrap();
    for c in &blocks.checks {
        assert!(c.value < 1e-6, "{c:?}");
    }
}

#[test]
fn two_oscillators() {
    let (sys, chart) = chart_for("oscillator2d");
    let basis = &chart.lattice().basis;
    assert_eq!(basis.len(), 2);
    let expect = [[2.0 * PI, 0.0], [0.0, PI]];
    for (b, e) in basis.iter().zip(&expect) {
        assert!((b[0] - e[0]).abs() < 1e-8 && (b[1] - e[1]).abs() < 1e-8, "{basis:?}");
    }
    for (e1, e2) in [(0.3, 0.2), (0.5, 0.245), (0.9, 0.45)] {
        let (i, _) = chart.actions(&[e1, e2]);
        let want = if chart.lattice().basis[0][0] > 4.0 { [e1, e2 / 2.0] } else { [e2 / 2.0, e1] };
        assert!((i[0] - want[0]).abs() < 1e-6 && (i[1] - want[1]).abs() < 1e-6, "{i:?}");
    }
    let h = sys.hamiltonian_expr().unwrap();
    let eom = verify_equations_of_motion(&chart, &h, &sys.reference, 12.0, 64, 42).unwrap();
    assert!(eom.passed(), "{eom:#?}");
    let blocks = verify_canonical_blocks(&chart, &block_samples(&chart, 6, 5), true).unwrap();
    assert!(blocks.passed(), "{blocks:#?}");
}

#[test]
fn pendulum_actions_and_frequency_duality() {
    let (_, chart) = chart_for("pendulum-libration");
    for e in [-0.85, -0.6, -0.3, -0.15] {
        let (i, _) = chart.actions(&[e]);
        let oracle = pendulum_action(e);
        assert!((i[0] - oracle).abs() < 1e-5, "E = {e}: {} vs {oracle}", i[0]);
    }
    let rec = frequency_duality(&chart, &[-0.88]).unwrap();
    assert!(rec.value < 1e-3, "{rec:?}");
}

#[test]
fn e2_chart_blocks_and_anchor_independence() {
    let (mut sys, chart) = chart_for("e2-noncommutative");
    assert_eq!((chart.m(), chart.d(), chart.r()), (1, 2, 0));
    let blocks = verify_canonical_blocks(&chart, &block_samples(&chart, 8, 11), false).unwrap();
    assert!(blocks.passed(), "{blocks:#?}");
    assert!(blocks.check("block_I_x").is_some());
    sys.reference = PhasePoint::new(vec![0.5, 0.1, 0.7, 0.9]).unwrap();
    let other = build_system_chart(&sys, 42, &ChartOptions::default()).unwrap();
    let rec = angle_offset_check(&chart, &other, 4, 4, 5).unwrap();
    assert!(rec.passed, "{rec:?}");
}

#[test]
fn so3_cylinder_period() {
    let (_, chart) = chart_for("so3-momentum");
    assert_eq!(chart.lattice().cylinder_signature(), (1, 1));
    let u = &chart.lattice().basis[0];
    // |L| = 1 at the reference, so the Casimir |L|^2 returns after π/|L|
    assert!(u[0].abs() < 1e-6 && (u[1] - PI).abs() < 1e-6, "{u:?}");
    let blocks = verify_canonical_blocks(&chart, &block_samples(&chart, 4, 13), false).unwrap();
    assert!(blocks.passed(), "{blocks:#?}");
}
