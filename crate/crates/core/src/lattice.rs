//! Isotropy lattice of the R^m action on a fiber: close-return scan, Newton
//! refinement, and low-dimensional basis reduction.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{self, distance, norm, FlowConfig, Integrator};
use crate::symplectic::VectorFieldHandle;

/// Upper bound on coarse grid points; larger boxes are shrunk to fit.
pub const MAX_GRID_POINTS: usize = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchConfig {
    pub half_width: f64,
    pub step: f64,
    /// Relative coarse acceptance radius.
    pub accept: f64,
    pub max_newton: usize,
    pub tol_return: f64,
    pub tol_commute: f64,
    pub scan_flow: FlowConfig,
    pub refine_flow: FlowConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            half_width: 50.0,
            step: 0.1,
            accept: 1e-2,
            max_newton: 50,
            tol_return: 1e-9,
            tol_commute: 1e-8,
            scan_flow: FlowConfig { rtol: 1e-7, atol: 1e-9, ..FlowConfig::default() },
            refine_flow: FlowConfig { rtol: 1e-12, atol: 1e-14, ..FlowConfig::default() },
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step < self.half_width) {
            return Err(Error::Invalid("lattice search needs 0 < step < half-width".into()));
        }
        if !(self.accept > self.tol_return && self.tol_return > 0.0) {
            return Err(Error::Invalid("coarse acceptance radius must exceed the return tolerance".into()));
        }
        self.scan_flow.validate()?;
        self.refine_flow.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodLattice {
    pub m: usize,
    pub basis: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub anchor: Vec<f64>,
    /// Coarse near-returns existed but none refined to a period.
    pub low_confidence: bool,
    /// Half-width actually scanned; periods outside are undetectable.
    pub search_half_width: f64,
    pub grid_step: f64,
    pub coarse_hits: usize,
    pub refined_candidates: Vec<Vec<f64>>,
}

impl PeriodLattice {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// `(m - r, r)`: the fiber is `R^{m-r} x T^r`.
    pub fn cylinder_signature(&self) -> (usize, usize) {
        (self.m - self.rank(), self.rank())
    }

    /// `m x r` matrix with the basis vectors as columns.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.rank(), |i, j| self.basis[j][i])
    }

    /// A lattice with a prescribed basis (e.g. continued from a neighbor).
    pub fn from_basis(m: usize, basis: Vec<Vec<f64>>, residuals: Vec<f64>, anchor: Vec<f64>) -> Self {
        PeriodLattice {
            m,
            basis,
            residuals,
            anchor,
            low_confidence: false,
            search_half_width: 0.0,
            grid_step: 0.0,
            coarse_hits: 0,
            refined_candidates: Vec::new(),
        }
    }
}

pub fn cylinder_signature(lat: &PeriodLattice) -> (usize, usize) {
    lat.cylinder_signature()
}

fn field_matrix(fields: &[VectorFieldHandle], z: &[f64]) -> Result<DMatrix<f64>> {
    let mut v = DMatrix::zeros(z.len(), fields.len());
    for (l, f) in fields.iter().enumerate() {
        let col = f.eval(z)?;
        v.column_mut(l).copy_from_slice(&col);
    }
    Ok(v)
}

/// `‖Φ_s z − z‖`.
pub fn return_residual(fields: &[VectorFieldHandle], s: &[f64], z: &[f64], cfg: &FlowConfig) -> Result<f64> {
    Ok(distance(&flow::flow_map(fields, s, z, cfg)?, z))
}

/// Gauss–Newton on `F(s) = Φ_s z − z`; returns the refined vector and its residual.
pub fn refine_period(
    fields: &[VectorFieldHandle],
    z: &[f64],
    s0: &[f64],
    cfg: &SearchConfig,
) -> Result<(Vec<f64>, f64)> {
    let fc = &cfg.refine_flow;
    let mut s = s0.to_vec();
    let mut end = flow::flow_map(fields, &s, z, fc)?;
    let mut res = distance(&end, z);
    for _ in 0..cfg.max_newton {
        if res < cfg.tol_return {
            return Ok((s, res));
        }
        let jac = field_matrix(fields, &end)?;
        let f = DVector::from_iterator(z.len(), end.iter().zip(z).map(|(a, b)| a - b));
        let step = jac
            .svd(true, true)
            .solve(&f, 1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let trial: Vec<f64> = s.iter().zip(step.iter()).map(|(a, d)| a - lambda * d).collect();
            if let Ok(e) = flow::flow_map(fields, &trial, z, fc) {
                let r = distance(&e, z);
                if r < res {
                    s = trial;
                    end = e;
                    res = r;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if res < cfg.tol_return {
        Ok((s, res))
    } else {
        Err(Error::Newton(format!("return residual stalled at {res:.3e}")))
    }
}

/// Least-squares integer coefficients of `s` in `basis`, with the miss distance.
fn integer_fit(basis: &[Vec<f64>], s: &[f64]) -> Option<f64> {
    if basis.is_empty() {
        return None;
    }
    let m = s.len();
    let b = DMatrix::from_fn(m, basis.len(), |i, j| basis[j][i]);
    let c = b.clone().svd(true, true).solve(&DVector::from_row_slice(s), 1e-12).ok()?;
    let rounded = c.map(|v| v.round());
    Some((b * rounded - DVector::from_row_slice(s)).norm())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise Gauss reduction of a generating set; near-zero vectors are dropped.
pub fn reduce_basis(mut gens: Vec<Vec<f64>>, zero_tol: f64) -> Vec<Vec<f64>> {
    gens.retain(|g| norm(g) > zero_tol);
    loop {
        let mut changed = false;
        for i in 0..gens.len() {
            for j in 0..gens.len() {
                if i == j || norm(&gens[j]) <= zero_tol || norm(&gens[i]) <= zero_tol {
                    continue;
                }
                let mu = (dot(&gens[i], &gens[j]) / dot(&gens[j], &gens[j])).round();
                if mu == 0.0 {
                    continue;
                }
                let cand: Vec<f64> = gens[i].iter().zip(&gens[j]).map(|(a, b)| a - mu * b).collect();
                if norm(&cand) < norm(&gens[i]) * (1.0 - 1e-12) {
                    gens[i] = cand;
                    changed = true;
                }
            }
        }
        let before = gens.len();
        gens.retain(|g| norm(g) > zero_tol);
        if !changed && gens.len() == before {
            break;
        }
    }
    gens
}

/// Leading component positive, then ordered by leading index and length.
pub fn canonical_order(mut basis: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let lead = |v: &[f64]| {
        let scale = norm(v);
        v.iter().position(|c| c.abs() > 1e-9 * scale).unwrap_or(v.len())
    };
    for v in basis.iter_mut() {
        let l = lead(v);
        if l < v.len() && v[l] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
    }
    basis.sort_by(|a, b| lead(a).cmp(&lead(b)).then(norm(a).total_cmp(&norm(b))));
    basis
}

struct Grid {
    values: Vec<f64>,
    center: usize,
}

impl Grid {
    fn new(half_width: f64, step: f64) -> Grid {
        let k = (half_width / step).floor() as usize;
        let values = (0..=2 * k).map(|i| (i as f64 - k as f64) * step).collect();
        Grid { values, center: k }
    }

    fn len(&self) -> usize {
        self.values.len()
    }
}

/// Points of the trajectory of `field` from `w` at every grid time; entries
/// past an integration failure are `None`.
fn trajectory_on_grid(
    field: &VectorFieldHandle,
    w: &[f64],
    grid: &Grid,
    cfg: &FlowConfig,
) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; grid.len()];
    out[grid.center] = Some(w.to_vec());
    let rhs = |y: &[f64], o: &mut [f64]| field.eval_into(y, o);
    let forward: Vec<f64> = grid.values[grid.center + 1..].to_vec();
    let backward: Vec<f64> = grid.values[..grid.center].iter().rev().copied().collect();
    for (times, offset, dir) in [(forward, grid.center + 1, 1isize), (backward, grid.center - 1, -1isize)] {
        if times.is_empty() {
            continue;
        }
        let Ok(mut integ) = Integrator::new(rhs, 0.0, w, *cfg) else { continue };
        let _ = integ.sample(&times, |i, y| {
            let idx = offset as isize + dir * i as isize;
            out[idx as usize] = Some(y.to_vec());
        });
    }
    out
}

fn scan_level(
    fields: &[VectorFieldHandle],
    level: usize,
    w: &[f64],
    z: &[f64],
    grid: &Grid,
    cfg: &FlowConfig,
    base: usize,
    dist: &mut [f64],
) {
    let m = fields.len();
    let stride = grid.len().pow((m - 1 - level) as u32);
    let points = trajectory_on_grid(&fields[level], w, grid, cfg);
    for (i, p) in points.into_iter().enumerate() {
        let Some(p) = p else { continue };
        let idx = base + i * stride;
        if level + 1 == m {
            dist[idx] = distance(&p, z);
        } else {
            scan_level(fields, level + 1, &p, z, grid, cfg, idx, dist);
        }
    }
}

/// Grid indices that are local minima of `dist` below `threshold`.
fn local_minima(dist: &[f64], n: usize, m: usize, center: usize, threshold: f64) -> Vec<Vec<usize>> {
    let origin: usize = (0..m).map(|l| center * n.pow((m - 1 - l) as u32)).sum();
    let mut out = Vec::new();
    let offsets: Vec<Vec<isize>> = (0..3usize.pow(m as u32))
        .map(|mut c| {
            (0..m)
                .map(|_| {
                    let d = (c % 3) as isize - 1;
                    c /= 3;
                    d
                })
                .collect()
        })
        .filter(|o: &Vec<isize>| o.iter().any(|v| *v != 0))
        .collect();
    for (flat, &d) in dist.iter().enumerate() {
        if flat == origin || !(d < threshold) {
            continue;
        }
        let idx: Vec<usize> = (0..m).map(|l| (flat / n.pow((m - 1 - l) as u32)) % n).collect();
        let is_min = offsets.iter().all(|o| {
            let mut nf = 0usize;
            for l in 0..m {
                let v = idx[l] as isize + o[l];
                if v < 0 || v >= n as isize {
                    return true;
                }
                nf = nf * n + v as usize;
            }
            dist[nf] >= d
        });
        if is_min {
            out.push(idx);
        }
    }
    out
}

/// Detects the isotropy lattice of the action generated by `fields` at `z`.
pub fn detect_period_lattice(fields: &[VectorFieldHandle], z: &[f64], cfg: &SearchConfig) -> Result<PeriodLattice> {
    cfg.validate()?;
    let m = fields.len();
    if m == 0 {
        return Err(Error::Invalid("lattice detection needs at least one flow".into()));
    }
    for a in 0..m {
        for b in a + 1..m {
            let r = flow::commutation_residual(&fields[a], &fields[b], z, 1.0, 1.0, &cfg.refine_flow)?;
            if r > cfg.tol_commute {
                return Err(Error::NotCommuting { residual: r, tolerance: cfg.tol_commute });
            }
        }
    }
    // shrink the box if the grid would be too large
    let per_axis_cap = (MAX_GRID_POINTS as f64).powf(1.0 / m as f64).floor();
    let half_width = cfg.half_width.min(((per_axis_cap - 1.0) / 2.0).floor() * cfg.step);
    let grid = Grid::new(half_width, cfg.step);
    let n = grid.len();
    let mut dist = vec![f64::INFINITY; n.pow(m as u32)];
    scan_level(fields, 0, z, z, &grid, &cfg.scan_flow, 0, &mut dist);

    let v0 = field_matrix(fields, z)?;
    let threshold = cfg.accept * (1.0 + norm(z)) + 0.5 * cfg.step * (m as f64).sqrt() * v0.norm();
    let mut candidates: Vec<Vec<f64>> = local_minima(&dist, n, m, grid.center, threshold)
        .into_iter()
        .map(|idx| idx.iter().map(|&i| grid.values[i]).collect())
        .collect();
    candidates.sort_by(|a, b| norm(a).total_cmp(&norm(b)));
    let coarse_hits = candidates.len();

    let resolution = cfg.step * (m as f64).sqrt();
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut refined_candidates = Vec::new();
    for c in candidates {
        if integer_fit(&accepted, &c).is_some_and(|miss| miss < resolution) {
            continue;
        }
        let Ok((s, _)) = refine_period(fields, z, &c, cfg) else { continue };
        refined_candidates.push(s.clone());
        if norm(&s) < 0.5 * cfg.step {
            continue;
        }
        if integer_fit(&accepted, &s).is_some_and(|miss| miss < 1e-6 * (1.0 + norm(&s))) {
            continue;
        }
        accepted.push(s);
    }

    let scale = accepted.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let reduced = reduce_basis(accepted, 1e-6 * (1.0 + scale));
    let mut basis = Vec::new();
    let mut residuals = Vec::new();
    for v in canonical_order(reduced) {
        let (s, r) = refine_period(fields, z, &v, cfg)?;
        basis.push(s);
        residuals.push(r);
    }
    let basis = canonical_order(basis);
    // keep residuals aligned with the final order
    let residuals = basis
        .iter()
        .map(|b| return_residual(fields, b, z, &cfg.refine_flow))
        .collect::<Result<Vec<_>>>()
        .unwrap_or(residuals);
    if !basis.is_empty() {
        let bm = DMatrix::from_fn(m, basis.len(), |i, j| basis[j][i]);
        if basis.len() > m || crate::structure::min_singular_value(&bm) <= 1e-8 {
            return Err(Error::Singular("reduced lattice generators are dependent".into()));
        }
    }
    Ok(PeriodLattice {
        m,
        low_confidence: basis.is_empty() && coarse_hits > 0,
        basis,
        residuals,
        anchor: z.to_vec(),
        search_half_width: half_width,
        grid_step: cfg.step,
        coarse_hits,
        refined_candidates,
    })
}

/// Orthonormal basis of the orthogonal complement of `span(u)` in R^m, each
/// vector with positive leading component.
pub fn orthogonal_complement(m: usize, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for v in u {
        let mut w = v.clone();
        for o in &ortho {
            let d = dot(&w, o);
            w.iter_mut().zip(o).for_each(|(a, b)| *a -= d * b);
        }
        let nw = norm(&w);
        if nw > 1e-12 {
            ortho.push(w.iter().map(|x| x / nw).collect());
        }
    }
    let mut comp = Vec::new();
    for i in 0..m {
        if ortho.len() + comp.len() == m {
            break;
        }
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        for o in ortho.iter().chain(&comp) {
            let d = dot(&w, o);
            w.iter_mut().zip(o).for_each(|(a, b)| *a -= d * b);
        }
        let nw = norm(&w);
        if nw > 1e-8 {
            let mut w: Vec<f64> = w.iter().map(|x| x / nw).collect();
            if let Some(l) = w.iter().position(|c| c.abs() > 1e-12) {
                if w[l] < 0.0 {
                    w.iter_mut().for_each(|c| *c = -*c);
                }
            }
            comp.push(w);
        }
    }
    comp
}

/// Invertible `T` with `T u_i = e_{m-r+i}`, completed by an orthonormal basis
/// of the complement; the identity when `r = 0`.
pub fn adapt_basis(lat: &PeriodLattice) -> Result<DMatrix<f64>> {
    let m = lat.m;
    if lat.rank() == 0 {
        return Ok(DMatrix::identity(m, m));
    }
    let comp = orthogonal_complement(m, &lat.basis);
    let cols: Vec<&Vec<f64>> = comp.iter().chain(&lat.basis).collect();
    let b = DMatrix::from_fn(m, m, |i, j| cols[j][i]);
    b.try_inverse().ok_or_else(|| Error::Singular("lattice basis is rank deficient".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::symplectic::hamiltonian_vector_field;
    use std::f64::consts::PI;

    fn fields(hs: &[&str], n: usize) -> Vec<VectorFieldHandle> {
        hs.iter().map(|h| hamiltonian_vector_field(&parse(h).unwrap(), n).unwrap()).collect()
    }

    #[test]
    fn oscillator_period() {
        let f = fields(&["(p1^2+q1^2)/2"], 1);
        let lat = detect_period_lattice(&f, &[1.0, 0.0], &SearchConfig::default()).unwrap();
        assert_eq!(lat.rank(), 1);
        assert!((lat.basis[0][0] - 2.0 * PI).abs() < 1e-9, "{:?}", lat.basis);
        assert_eq!(lat.cylinder_signature(), (0, 1));
    }

    #[test]
    fn free_particle_has_no_returns() {
        let f = fields(&["p1^2/2"], 1);
        let lat = detect_period_lattice(&f, &[0.0, 1.0], &SearchConfig::default()).unwrap();
        assert_eq!(lat.rank(), 0);
        assert_eq!(lat.coarse_hits, 0);
        assert!(!lat.low_confidence);
        assert_eq!(lat.cylinder_signature(), (1, 0));
    }

    #[test]
    fn gauss_reduction_collinear_and_planar() {
        let r = canonical_order(reduce_basis(vec![vec![4.0], vec![6.0]], 1e-9));
        assert_eq!(r, vec![vec![2.0]]);
        let r = canonical_order(reduce_basis(vec![vec![1.0, 1.0], vec![1.0, 2.0]], 1e-9));
        assert_eq!(r.len(), 2);
        let norms: Vec<f64> = r.iter().map(|v| norm(v)).collect();
        assert!(norms.iter().all(|n| *n <= 2f64.sqrt() + 1e-12), "{r:?}");
    }

    #[test]
    fn adapted_maps() {
        let lat = PeriodLattice::from_basis(1, vec![vec![2.0 * PI]], vec![0.0], vec![1.0, 0.0]);
        let t = adapt_basis(&lat).unwrap();
        assert!((t[(0, 0)] - 1.0 / (2.0 * PI)).abs() < 1e-15);

        let lat = PeriodLattice::from_basis(2, vec![vec![2.0 * PI, 0.0], vec![0.0, PI]], vec![0.0; 2], vec![]);
        let t = adapt_basis(&lat).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0 / (2.0 * PI), 0.0, 0.0, 1.0 / PI]);
        assert!((t - expected).amax() < 1e-14);

        let lat = PeriodLattice::from_basis(2, vec![vec![2.0 * PI, 2.0 * PI]], vec![0.0], vec![]);
        let t = adapt_basis(&lat).unwrap();
        let u = t.clone() * DVector::from_row_slice(&[2.0 * PI, 2.0 * PI]);
        assert!((u - DVector::from_row_slice(&[0.0, 1.0])).norm() < 1e-14);
        let c = t * DVector::from_row_slice(&[1.0, -1.0]) / 2f64.sqrt();
        assert!((c - DVector::from_row_slice(&[1.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn identity_when_no_lattice() {
        let lat = PeriodLattice::from_basis(2, vec![], vec![], vec![]);
        assert_eq!(adapt_basis(&lat).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn rejects_non_commuting_flows() {
        let f = fields(&["q1", "p1^2/2"], 1);
        let err = detect_period_lattice(&f, &[0.2, 0.5], &SearchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotCommuting { .. }));
    }

    #[test]
    fn two_frequency_oscillator_lattice() {
        let f = fields(&["(p1^2+q1^2)/2", "(p2^2+4*q2^2)/2"], 2);
        let lat = detect_period_lattice(&f, &[0.6, 0.0, 0.8, 0.7], &SearchConfig::default()).unwrap();
        assert_eq!(lat.rank(), 2);
        assert!(distance(&lat.basis[0], &[2.0 * PI, 0.0]) < 1e-8, "{:?}", lat.basis);
        assert!(distance(&lat.basis[1], &[0.0, PI]) < 1e-8, "{:?}", lat.basis);
    }
}
