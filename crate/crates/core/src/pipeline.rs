//! End-to-end operations shared by the command line and the Python bindings.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chart::{
    build_system_chart, verify_canonical_blocks, verify_equations_of_motion, verify_round_trip, Chart, ChartOptions,
};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::flow::{self, completeness_probe, distance, Integrator};
use crate::lattice::{detect_period_lattice, PeriodLattice, SearchConfig};
use crate::report::{CheckRecord, ResidualReport};
use crate::structure::SystemDef;
use crate::symplectic::{hamiltonian_vector_field, PhasePoint};

pub const ANCHOR_COMPLETE: &str = "complete Hamiltonian vector fields (probed, not proven)";
pub const ANCHOR_ISOTROPY: &str = "isotropy lattice is the same at every point of a fiber";
pub const ANCHOR_LATTICE: &str = "isotropy group is a lattice: integer closure of returns";

/// Lattice search settings derived from the system tolerances.
pub fn search_config(sys: &SystemDef) -> SearchConfig {
    SearchConfig { tol_return: sys.tolerances.return_, tol_commute: sys.tolerances.commute, ..SearchConfig::default() }
}

/// Parses a Hamiltonian over phase variables and integral names and pulls
/// it back to phase space.
pub fn parse_hamiltonian(sys: &SystemDef, text: &str) -> Result<Expr> {
    let e: Expr = text.parse()?;
    let phase = sys.phase_variables();
    if let Some(v) = e.free_vars().into_iter().find(|v| !phase.contains(v) && !sys.integral_names.contains(v)) {
        return Err(Error::Invalid(format!("hamiltonian uses unknown identifier `{v}`")));
    }
    Ok(sys.pull_back(&e))
}

/// Completeness probes, lattice detection and isotropy checks at `point`.
pub fn topology(sys: &SystemDef, point: &PhasePoint, seed: u64) -> Result<(PeriodLattice, ResidualReport)> {
    if point.n() != sys.n {
        return Err(Error::Invalid(format!("point must have {} coordinates", 2 * sys.n)));
    }
    let cfg = search_config(sys);
    let cas = sys.casimir_set()?;
    let fields = cas.fields(sys.n)?;
    let mut report = ResidualReport::new();
    let mut probes = Vec::new();
    let mut complete = true;
    for f in &fields {
        let p = completeness_probe(f, point, cfg.half_width, &sys.flow)?;
        complete &= p.is_ok();
        probes.push(p);
    }
    report.assume(ANCHOR_COMPLETE);
    report.push(
        CheckRecord::new("completeness_probe", ANCHOR_COMPLETE, complete, 0.0, 0.0, probes.len()).with("probes", &probes),
    );
    let lat = detect_period_lattice(&fields, point, &cfg)?;
    let closure_tol = 10.0 * cfg.tol_return;
    let worst = lat.residuals.iter().copied().fold(0.0, f64::max);
    report.push(
        CheckRecord::new("lattice_integer_closure", ANCHOR_LATTICE, worst < closure_tol, worst, closure_tol, lat.rank())
            .with("basis", &lat.basis),
    );
    // the same periods return every point of the fiber
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iso: f64 = 0.0;
    let trials = 8;
    if lat.rank() > 0 {
        for _ in 0..trials {
            let s: Vec<f64> = (0..lat.m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let other = flow::flow_map(&fields, &s, point, &cfg.refine_flow)?;
            for u in &lat.basis {
                let back = flow::flow_map(&fields, u, &other, &cfg.refine_flow)?;
                iso = iso.max(distance(&back, &other));
            }
        }
    }
    report.push(CheckRecord::new("fiber_isotropy", ANCHOR_ISOTROPY, iso < closure_tol, iso, closure_tol, trials));
    report.bound("lattice_search_half_width", lat.search_half_width);
    report.bound("lattice_grid_step", lat.grid_step);
    report.note("rank", lat.rank());
    report.note("signature", lat.cylinder_signature());
    report.note("basis", &lat.basis);
    report.note("low_confidence", lat.low_confidence);
    if lat.rank() == 0 {
        report.note("no_returns_within", lat.search_half_width);
    }
    Ok((lat, report))
}

/// Builds the chart and runs the block, equations-of-motion and round-trip
/// checks.
pub fn verify(
    sys: &SystemDef,
    seed: u64,
    hamiltonian: Option<&Expr>,
    t_max: f64,
    samples: usize,
) -> Result<(Chart, ResidualReport)> {
    let chart = build_system_chart(sys, seed, &ChartOptions::default())?;
    let mut report = chart.provenance.clone();
    let points: Vec<PhasePoint> = chart
        .sample_chart_points(samples, seed, 1.0, 0.05)?
        .iter()
        .map(|w| chart.inverse(w))
        .collect::<Result<_>>()?;
    let abelian = sys.k() == sys.m();
    report.merge(verify_canonical_blocks(&chart, &points, abelian)?);
    let h = match hamiltonian {
        Some(h) => h.clone(),
        None => sys.hamiltonian_expr()?,
    };
    report.merge(verify_equations_of_motion(&chart, &h, &sys.reference, t_max, 64, seed)?);
    report.push(verify_round_trip(&chart, samples, seed, 1.0)?);
    report.assume(crate::structure::ANCHOR_CONNECTED);
    report.assume(ANCHOR_COMPLETE);
    Ok((chart, report))
}

/// Header of the trajectory table.
pub fn trace_header(chart: &Chart) -> Vec<String> {
    let n = chart.n();
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("q{i}")));
    h.extend((1..=n).map(|i| format!("p{i}")));
    h.extend((1..=chart.m()).map(|i| format!("I{i}")));
    h.extend((1..=chart.d()).map(|i| format!("x{i}")));
    h.extend((1..=chart.m() - chart.r()).map(|i| format!("t{i}")));
    h.extend((1..=chart.r()).map(|i| format!("phi{i}")));
    h
}

/// Trajectory of `hamiltonian` from `z0` sampled every `dt` up to `t_max`,
/// in phase and chart coordinates.
pub fn trace(chart: &Chart, hamiltonian: &Expr, z0: &[f64], t_max: f64, dt: f64) -> Result<Vec<Vec<f64>>> {
    if !(t_max > 0.0 && dt > 0.0) {
        return Err(Error::Invalid("--t-max and --dt must be positive".into()));
    }
    let steps = (t_max / dt).round() as usize;
    if steps > 1_000_000 {
        return Err(Error::Invalid("trace would exceed one million rows".into()));
    }
    let times: Vec<f64> = (0..=steps).map(|i| (i as f64 * dt).min(t_max)).collect();
    let field = hamiltonian_vector_field(hamiltonian, chart.n())?;
    let mut integ = Integrator::new(|y: &[f64], o: &mut [f64]| field.eval_into(y, o), 0.0, z0, chart.options().flow)?;
    let mut traj = Vec::with_capacity(times.len());
    integ.sample(&times, |_, y| traj.push(y.to_vec()))?;
    let mut rows = Vec::with_capacity(times.len());
    let mut prev: Option<(f64, Vec<f64>)> = None;
    let mut rate: Option<DVector<f64>> = None;
    for (t, z) in times.iter().zip(&traj) {
        let hint = match (&prev, &rate) {
            (Some((tp, s)), Some(v)) => Some(s.iter().zip(v.iter()).map(|(a, b)| a + b * (t - tp)).collect::<Vec<_>>()),
            (Some((_, s)), None) => Some(s.clone()),
            _ => None,
        };
        let (w, s) = chart.forward_with_flow(z, hint.as_deref())?;
        if let Some((tp, sp)) = &prev {
            if t > tp {
                rate = Some(DVector::from_iterator(s.len(), s.iter().zip(sp).map(|(a, b)| (a - b) / (t - tp))));
            }
        }
        prev = Some((*t, s));
        let mut row = vec![*t];
        row.extend_from_slice(z);
        row.extend(w.to_vec());
        rows.push(row);
    }
    Ok(rows)
}
