use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use aacord::chart::{build_system_chart, Chart, ChartOptions, ChartPoint};
use aacord::expr::{BinOp, Expr, Func};
use aacord::flow::{commutation_residual, distance, flow_map, flow_one, norm, FlowConfig};
use aacord::lattice::{detect_period_lattice, PeriodLattice, SearchConfig};
use aacord::spec::{catalog_names, load_catalog};
use aacord::structure::SystemDef;
use aacord::symplectic::{hamiltonian_vector_field, phase_variables, poisson_bracket, VectorFieldHandle};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(20261015), failure_persistence: None, ..Config::default() }
}

struct Fixture {
    sys: SystemDef,
    fields: Vec<VectorFieldHandle>,
    functions: Vec<Expr>,
}

fn fixtures() -> &'static Vec<Fixture> {
    static F: OnceLock<Vec<Fixture>> = OnceLock::new();
    F.get_or_init(|| {
        catalog_names()
            .into_iter()
            .map(|name| {
                let sys = load_catalog(name).unwrap();
                let cas = sys.casimir_set().unwrap();
                let fields = cas.fields(sys.n).unwrap();
                let mut functions = sys.integrals.clone();
                functions.extend(cas.pulled.iter().cloned());
                functions.extend(sys.transverse.iter().flatten().map(|e| sys.pull_back(e)));
                functions.push(sys.hamiltonian_expr().unwrap());
                // coordinate functions make the one-degree-of-freedom triples nontrivial
                functions.push(Expr::var("q1"));
                functions.push(Expr::var(format!("p{}", sys.n)));
                Fixture { sys, fields, functions }
            })
            .collect()
    })
}

fn charts() -> &'static Vec<(SystemDef, Chart)> {
    static C: OnceLock<Vec<(SystemDef, Chart)>> = OnceLock::new();
    C.get_or_init(|| {
        catalog_names()
            .into_iter()
            .map(|name| {
                let sys = load_catalog(name).unwrap();
                let chart = build_system_chart(&sys, 42, &ChartOptions::default()).unwrap();
                (sys, chart)
            })
            .collect()
    })
}

fn lattices() -> &'static Vec<(usize, PeriodLattice)> {
    static L: OnceLock<Vec<(usize, PeriodLattice)>> = OnceLock::new();
    L.get_or_init(|| {
        fixtures()
            .iter()
            .enumerate()
            .map(|(i, f)| (i, detect_period_lattice(&f.fields, &f.sys.reference, &SearchConfig::default()).unwrap()))
            .filter(|(_, l)| l.rank() > 0)
            .collect()
    })
}

fn eval(e: &Expr, n: usize, z: &[f64]) -> f64 {
    e.compile(&phase_variables(n)).unwrap().eval(z).unwrap()
}

/// Unit-cube coordinates mapped into a box.
fn in_box(u: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    u.iter().zip(lower.iter().zip(upper)).map(|(t, (a, b))| a + t * (b - a)).collect()
}

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, dim)
}

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-3.0..3.0f64).prop_map(|c| Expr::Const((c * 100.0).round() / 100.0)),
        prop::sample::select(vec!["q1", "q2", "p1", "p2"]).prop_map(Expr::var),
    ]
}

fn expr_tree() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone(), prop::sample::select(vec![BinOp::Add, BinOp::Sub, BinOp::Mul]))
                .prop_map(|(a, b, op)| Expr::Binary(op, Box::new(a), Box::new(b))),
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
            (inner.clone(), 0u8..4).prop_map(|(a, k)| Expr::Pow(Box::new(a), k as f64)),
            (inner.clone(), prop::sample::select(vec![Func::Sin, Func::Cos]))
                .prop_map(|(a, f)| Expr::Call(f, vec![a])),
            (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Atan2, vec![a, b])),
        ]
    })
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn printed_expressions_parse_to_equal_values(e in expr_tree(), z in prop::collection::vec(-2.0..2.0f64, 4)) {
        let text = e.to_string();
        let back: Expr = text.parse().unwrap_or_else(|err| panic!("{text}: {err}"));
        let vars = ["q1", "q2", "p1", "p2"];
        let (a, b) = (e.compile(&vars).unwrap().eval(&z), back.compile(&vars).unwrap().eval(&z));
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{text}: {a} vs {b}");
        }
    }

    #[test]
    fn derivative_of_sum_and_product(a in expr_tree(), b in expr_tree(), z in prop::collection::vec(-2.0..2.0f64, 4)) {
        let vars = ["q1", "q2", "p1", "p2"];
        let ev = |e: &Expr| e.compile(&vars).unwrap().eval(&z).ok();
        let prod = Expr::mul(a.clone(), b.clone()).differentiate("q1");
        let rule = Expr::add(Expr::mul(a.differentiate("q1"), b.clone()), Expr::mul(a.clone(), b.differentiate("q1")));
        if let (Some(x), Some(y)) = (ev(&prod), ev(&rule)) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn symbolic_derivatives_match_central_differences(u in unit(6)) {
        for f in fixtures() {
            let n = f.sys.n;
            let z: Vec<f64> = u[..2 * n].iter().map(|t| -2.0 + 4.0 * t).collect();
            let vars = phase_variables(n);
            for e in &f.functions {
                let c = e.compile(&vars).unwrap();
                for (i, v) in vars.iter().enumerate() {
                    let d = e.differentiate(v).compile(&vars).unwrap();
                    let (Ok(sym), Ok(_)) = (d.eval(&z), c.eval(&z)) else { continue };
                    let h = 1e-6;
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[i] += h;
                    zm[i] -= h;
                    let fd = (c.eval(&zp).unwrap() - c.eval(&zm).unwrap()) / (2.0 * h);
                    // stay clear of the atan2 branch point where third derivatives blow up
                    let curvature = e.differentiate(v).differentiate(v).differentiate(v).compile(&vars).unwrap().eval(&z).unwrap_or(0.0);
                    prop_assume!(curvature.abs() < 1e4);
                    prop_assert!((sym - fd).abs() <= 1e-6 * sym.abs().max(1.0), "{}: d/d{v} {sym} vs {fd} at {z:?}", f.sys.name);
                }
            }
        }
    }

    #[test]
    fn bracket_antisymmetry_leibniz_jacobi(u in unit(6)) {
        for f in fixtures() {
            let n = f.sys.n;
            let z: Vec<f64> = u[..2 * n].iter().map(|t| -2.0 + 4.0 * t).collect();
            let fs = &f.functions;
            let k = fs.len();
            for a in 0..k {
                for b in 0..k {
                    let ab = eval(&poisson_bracket(&fs[a], &fs[b], n), n, &z);
                    let ba = eval(&poisson_bracket(&fs[b], &fs[a], n), n, &z);
                    prop_assert!((ab + ba).abs() <= 1e-12 * (1.0 + ab.abs()));
                }
            }
            let (f0, g0, h0) = (&fs[0], &fs[k - 2], &fs[k - 1]);
            let lhs = eval(&poisson_bracket(f0, &Expr::mul(g0.clone(), h0.clone()), n), n, &z);
            let rhs = eval(&poisson_bracket(f0, g0, n), n, &z) * eval(h0, n, &z)
                + eval(g0, n, &z) * eval(&poisson_bracket(f0, h0, n), n, &z);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{}", f.sys.name);
            for a in 0..k.min(4) {
                for b in a + 1..k {
                    for c in b + 1..k {
                        let (x, y, w) = (&fs[a], &fs[b], &fs[c]);
                        let j = eval(&poisson_bracket(x, &poisson_bracket(y, w, n), n), n, &z)
                            + eval(&poisson_bracket(y, &poisson_bracket(w, x, n), n), n, &z)
                            + eval(&poisson_bracket(w, &poisson_bracket(x, y, n), n), n, &z);
                        prop_assert!(j.abs() <= 1e-8, "{}: Jacobi defect {j}", f.sys.name);
                    }
                }
            }
        }
    }

    #[test]
    fn flows_compose_additively(u in unit(6), s1 in prop::collection::vec(-1.0..1.0f64, 2), s2 in prop::collection::vec(-1.0..1.0f64, 2)) {
        let cfg = FlowConfig::default();
        for f in fixtures() {
            let n = f.sys.n;
            let m = f.fields.len();
            let z = in_box(&u[..2 * n], &f.sys.sampling.lower, &f.sys.sampling.upper);
            let (a, b) = (&s1[..m], &s2[..m]);
            let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
            let two = flow_map(&f.fields, b, &flow_map(&f.fields, a, &z, &cfg).unwrap(), &cfg).unwrap();
            let one = flow_map(&f.fields, &sum, &z, &cfg).unwrap();
            let tol = 10.0 * (cfg.atol + cfg.rtol * norm(&one)) * (1.0 + sum.iter().map(|v| v.abs()).sum::<f64>());
            prop_assert!(distance(&two, &one) <= tol, "{}: {} vs {tol}", f.sys.name, distance(&two, &one));
        }
    }

    #[test]
    fn casimir_flows_commute(u in unit(6)) {
        let cfg = FlowConfig::default();
        for f in fixtures() {
            let n = f.sys.n;
            let z = in_box(&u[..2 * n], &f.sys.sampling.lower, &f.sys.sampling.upper);
            for a in 0..f.fields.len() {
                for b in a + 1..f.fields.len() {
                    let r = commutation_residual(&f.fields[a], &f.fields[b], &z, 0.7, 0.9, &cfg).unwrap();
                    prop_assert!(r < 1e-8, "{}: {r}", f.sys.name);
                }
            }
        }
    }

    #[test]
    fn hamiltonian_conserved_along_its_flow(u in unit(6), t in 0.5..100.0f64) {
        let cfg = FlowConfig::default();
        for f in fixtures() {
            let n = f.sys.n;
            let z = in_box(&u[..2 * n], &f.sys.sampling.lower, &f.sys.sampling.upper);
            let h = f.sys.hamiltonian_expr().unwrap();
            let field = hamiltonian_vector_field(&h, n).unwrap();
            let end = flow_one(&field, t, &z, &cfg).unwrap();
            let drift = (eval(&h, n, &end) - eval(&h, n, &z)).abs();
            prop_assert!(drift < 1e-8, "{}: drift {drift} after {t}", f.sys.name);
        }
    }

    #[test]
    fn periods_close_on_the_whole_fiber(s in prop::collection::vec(-2.0..2.0f64, 2), k in prop::collection::vec(-2i32..=2, 2)) {
        let cfg = SearchConfig::default();
        for (i, lat) in lattices() {
            let f = &fixtures()[*i];
            let m = lat.m;
            let z = flow_map(&f.fields, &s[..m], &f.sys.reference, &cfg.refine_flow).unwrap();
            let mut total = vec![0.0; m];
            for (c, u) in k.iter().zip(&lat.basis) {
                total.iter_mut().zip(u).for_each(|(t, v)| *t += *c as f64 * v);
            }
            let tol = 10.0 * cfg.tol_return;
            for u in lat.basis.iter().chain(std::iter::once(&total)) {
                let back = flow_map(&f.fields, u, &z, &cfg.refine_flow).unwrap();
                prop_assert!(distance(&back, &z) < tol, "{}: {}", f.sys.name, distance(&back, &z));
            }
        }
    }

    #[test]
    fn charts_round_trip(u in unit(4), t in -1.0..1.0f64, phi in prop::collection::vec(0.0..2.0 * PI, 2)) {
        for (sys, chart) in charts() {
            let (m, d, r) = (chart.m(), chart.d(), chart.r());
            let dom = chart.domain();
            let lower: Vec<f64> = dom.lower.iter().zip(&dom.upper).map(|(a, b)| a + 0.02 * (b - a)).collect();
            let upper: Vec<f64> = dom.lower.iter().zip(&dom.upper).map(|(a, b)| b - 0.02 * (b - a)).collect();
            let xi = in_box(&u[..m + d], &lower, &upper);
            let (actions, _) = chart.actions(&xi[..m]);
            let w = ChartPoint { actions, x: xi[m..].to_vec(), t: vec![t; m - r], phi: phi[..r].to_vec() };
            let z = chart.inverse(&w).unwrap();
            let back = chart.forward(&z).unwrap();
            let again = chart.inverse(&back).unwrap();
            prop_assert!(distance(&again, &z) < 1e-7, "{}: {}", sys.name, distance(&again, &z));
        }
    }
}

#[test]
fn substitution_commutes_with_evaluation() {
    let e: Expr = "H1^2 + sin(H2)*H1".parse().unwrap();
    let map: HashMap<String, Expr> =
        [("H1".to_string(), "q1*p2".parse().unwrap()), ("H2".to_string(), "p1".parse().unwrap())].into();
    let pulled = e.substitute(&map);
    let z = [0.3, -0.7, 1.1, 0.4];
    let direct = (0.3f64 * 0.4).powi(2) + (1.1f64).sin() * 0.3 * 0.4;
    assert!((eval(&pulled, 2, &z) - direct).abs() < 1e-15);
}
