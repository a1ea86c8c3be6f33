//! Generalized action-angle charts `(I, x, t, φ)`.
//!
//! A point `z` is written as `z = Φ_s(σ(J, x))` where `J` are the Casimir
//! values, `x` the transverse base functions, `σ` an affine section through
//! the reference point, and `Φ_s` the flow of the Casimir vector fields. The
//! flow parameters are shifted by a gauge `g(J, x)` that removes the `dJ∧dJ`
//! and `dJ∧dx` parts of the pulled-back form, then re-expressed in the frame
//! `A(J) = [ℓ | U(J)/2π]` whose compact columns are the period lattice.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::flow::{self, combined_integrator, distance, norm, FlowConfig, Integrator};
use crate::lattice::{self, adapt_basis, detect_period_lattice, PeriodLattice, SearchConfig};
use crate::report::{CheckRecord, ResidualReport};
use crate::spline::{SplineAxis, TensorSpline};
use crate::structure::{min_singular_value, CasimirSet, DomainBox, SystemDef, ToleranceConfig};
use crate::symplectic::{
    hamiltonian_vector_field, jacobian, liouville_integrand, PhasePoint, SmoothFunction, SymplecticStructure,
    VectorFieldHandle,
};

pub const ANCHOR_BLOCKS: &str = "canonical form: Omega = dI ^ dy' + Omega_AB dx^A ^ dx^B";
pub const ANCHOR_DARBOUX: &str = "Abelian case: global Darboux coordinates Omega = dI ^ dy'";
pub const ANCHOR_EOM: &str = "equations of motion: I, x constant and dy'/dt = dH/dI";
pub const ANCHOR_ROUNDTRIP: &str = "chart is a diffeomorphism onto its image (inverse o forward = id)";
pub const ANCHOR_TRANSITION: &str = "angle coordinates of different anchors differ by fiberwise constants";
pub const ANCHOR_DUALITY: &str = "frequency duality: angular frequencies invert dI/dJ";

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut r = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, r);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * r * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (r * p1 - p0) / (r * r - 1.0);
            let dr = p1 / dp;
            r -= dr;
            if dr.abs() < 1e-16 {
                break;
            }
        }
        x[i] = r;
        w[i] = 2.0 / ((1.0 - r * r) * dp * dp);
    }
    let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(w).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// A point in chart coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartPoint {
    pub actions: Vec<f64>,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    /// Angles in `[0, 2π)`.
    pub phi: Vec<f64>,
}

impl ChartPoint {
    pub fn to_vec(&self) -> Vec<f64> {
        self.actions.iter().chain(&self.x).chain(&self.t).chain(&self.phi).copied().collect()
    }

    /// Splits `(I, x, t, φ)` given the block sizes.
    pub fn from_slice(v: &[f64], m: usize, d: usize, r: usize) -> Result<ChartPoint> {
        if v.len() != 2 * m + d {
            return Err(Error::Invalid(format!("chart point needs {} coordinates, got {}", 2 * m + d, v.len())));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("chart point has non-finite entries".into()));
        }
        Ok(ChartPoint {
            actions: v[..m].to_vec(),
            x: v[m..m + d].to_vec(),
            t: v[m + d..2 * m + d - r].to_vec(),
            phi: v[2 * m + d - r..].iter().map(|a| a.rem_euclid(2.0 * PI)).collect(),
        })
    }

    /// `y' = (t, φ)`.
    pub fn angles(&self) -> Vec<f64> {
        self.t.iter().chain(&self.phi).copied().collect()
    }
}

/// Action integral `(1/2π) ∮ θ` along `τ ↦ Φ_{τu}(anchor)`, `τ ∈ [0, 1]`, by
/// composite 8-point Gauss quadrature refined to relative `1e-9`.
pub fn action_integral(
    fields: &[VectorFieldHandle],
    anchor: &[f64],
    u: &[f64],
    cfg: &FlowConfig,
    tol_return: f64,
) -> Result<f64> {
    let (gx, gw) = gauss_legendre(8);
    let dim = anchor.len();
    let mut vel = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut velocity = |z: &[f64], out: &mut [f64]| -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (f, c) in fields.iter().zip(u) {
            f.eval_into(z, &mut scratch)?;
            out.iter_mut().zip(&scratch).for_each(|(o, v)| *o += c * v);
        }
        Ok(())
    };
    let mut prev: Option<f64> = None;
    let mut panels = 8usize;
    let mut closure;
    loop {
        let mut times = Vec::with_capacity(panels * 8 + 1);
        let mut weights = Vec::with_capacity(panels * 8);
        for p in 0..panels {
            for (x, w) in gx.iter().zip(&gw) {
                times.push((p as f64 + 0.5 * (x + 1.0)) / panels as f64);
                weights.push(0.5 * w / panels as f64);
            }
        }
        times.push(1.0);
        let mut points = Vec::with_capacity(times.len());
        let mut integ = combined_integrator(fields, u, anchor, *cfg)?;
        integ.sample(&times, |_, z| points.push(z.to_vec()))?;
        closure = distance(points.last().unwrap(), anchor);
        let mut total = 0.0;
        for (z, w) in points.iter().zip(&weights) {
            velocity(z, &mut vel)?;
            total += w * liouville_integrand(z, &vel)?;
        }
        if let Some(p) = prev {
            if (total - p).abs() <= 1e-9 * total.abs() + 1e-15 {
                prev = Some(total);
                break;
            }
        }
        prev = Some(total);
        if panels >= 4096 {
            return Err(Error::Newton("action quadrature did not converge".into()));
        }
        panels *= 2;
    }
    if closure > 10.0 * tol_return.max(1e-12) {
        return Err(Error::Chart(format!("action cycle fails to close (gap {closure:.3e})")));
    }
    Ok(prev.unwrap() / (2.0 * PI))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChartOptions {
    pub flow: FlowConfig,
    pub search: SearchConfig,
    /// Fraction of the domain width accepted outside the box.
    pub domain_slack: f64,
    /// Re-detect the lattice at the domain corners to confirm constant rank.
    pub check_rank: bool,
}

impl Default for ChartOptions {
    fn default() -> Self {
        ChartOptions {
            flow: FlowConfig { rtol: 1e-12, atol: 1e-14, ..FlowConfig::default() },
            search: SearchConfig::default(),
            domain_slack: 0.05,
            check_rank: true,
        }
    }
}

#[derive(Debug, Clone)]
struct ActionTable {
    nodes: Vec<Vec<f64>>,
    lattices: Vec<DMatrix<f64>>,
    actions: Vec<Vec<f64>>,
    lattice_spline: TensorSpline,
    action_spline: TensorSpline,
}

/// A generalized action-angle chart on a box of base values.
#[derive(Debug, Clone)]
pub struct Chart {
    pub name: String,
    n: usize,
    m: usize,
    d: usize,
    r: usize,
    coord_exprs: Vec<Expr>,
    coords: Vec<SmoothFunction>,
    fields: Vec<VectorFieldHandle>,
    z0: Vec<f64>,
    xi0: Vec<f64>,
    section: DMatrix<f64>,
    lattice: PeriodLattice,
    adapted: DMatrix<f64>,
    ell: DMatrix<f64>,
    table: Option<ActionTable>,
    domain: DomainBox,
    gauge: bool,
    opts: ChartOptions,
    pub tolerances: ToleranceConfig,
    pub provenance: ResidualReport,
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    a.clone().svd(true, true).solve(b, 1e-13).map_err(|e| Error::Singular(e.to_string()))
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Orthonormal basis (columns) of the complement of the columns of `v`.
fn complement_basis(v: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = v.nrows();
    let cols: Vec<Vec<f64>> = (0..v.ncols()).map(|j| v.column(j).iter().copied().collect()).collect();
    let comp = lattice::orthogonal_complement(dim, &cols);
    DMatrix::from_fn(dim, comp.len(), |i, j| comp[j][i])
}

impl Chart {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Fiber dimension (number of actions).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of transverse coordinates.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Lattice rank (number of angles).
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn lattice(&self) -> &PeriodLattice {
        &self.lattice
    }

    pub fn adapted_map(&self) -> &DMatrix<f64> {
        &self.adapted
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn reference(&self) -> &[f64] {
        &self.z0
    }

    pub fn fields(&self) -> &[VectorFieldHandle] {
        &self.fields
    }

    pub fn options(&self) -> &ChartOptions {
        &self.opts
    }

    /// Base coordinates `(J, x)` of a phase point.
    pub fn base(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.coords.iter().map(|f| Ok(f.value(z)?)).collect()
    }

    fn base_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(jacobian(&self.coords, z)?)
    }

    fn newton_section(&self, xi: &[f64], c0: DVector<f64>) -> Option<DVector<f64>> {
        let mut c = c0;
        let scale = 1.0 + xi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let z0 = DVector::from_row_slice(&self.z0);
        for _ in 0..60 {
            let z = &z0 + &self.section * &c;
            let f: Vec<f64> = self.base(z.as_slice()).ok()?.iter().zip(xi).map(|(a, b)| a - b).collect();
            let fnorm = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !fnorm.is_finite() {
                return None;
            }
            let jac = self.base_jacobian(z.as_slice()).ok()? * &self.section;
            let dc = jac.lu().solve(&DVector::from_vec(f))?;
            c -= &dc;
            if fnorm <= 1e-14 * scale || dc.norm() <= 1e-15 * (1.0 + c.norm()) {
                let z = &z0 + &self.section * &c;
                let res = self.base(z.as_slice()).ok()?.iter().zip(xi).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
                return (res <= 1e-11 * scale).then_some(c);
            }
        }
        None
    }

    /// The section point `σ(J, x)`.
    pub fn section_point(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let k = self.m + self.d;
        if xi.len() != k {
            return Err(Error::Invalid(format!("base point needs {k} coordinates")));
        }
        let j0 = self.base_jacobian(&self.z0)? * &self.section;
        let delta = DVector::from_iterator(k, xi.iter().zip(&self.xi0).map(|(a, b)| a - b));
        let guess = j0.clone().lu().solve(&delta).unwrap_or_else(|| DVector::zeros(k));
        let z0 = DVector::from_row_slice(&self.z0);
        if let Some(c) = self.newton_section(xi, guess) {
            return Ok((&z0 + &self.section * c).as_slice().to_vec());
        }
        // continuation from the reference
        let mut c = DVector::zeros(k);
        let steps = 32;
        for i in 1..=steps {
            let f = i as f64 / steps as f64;
            let target: Vec<f64> = self.xi0.iter().zip(xi).map(|(a, b)| a + f * (b - a)).collect();
            c = self
                .newton_section(&target, c)
                .ok_or_else(|| Error::Newton(format!("section anchor not found at base point {xi:?}")))?;
        }
        Ok((&z0 + &self.section * c).as_slice().to_vec())
    }

    /// `ω_AB = Ω(∂_A σ, ∂_B σ)` on the section.
    pub fn leaf_form(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let sigma = self.section_point(xi)?;
        let db = self.base_jacobian(&sigma)? * &self.section;
        let inv = db.try_inverse().ok_or_else(|| Error::Singular("section transversality lost".into()))?;
        let tangent = &self.section * inv;
        let omega = SymplecticStructure::new(self.n).omega_matrix();
        Ok(tangent.transpose() * omega * tangent)
    }

    /// Shift of the flow parameters removing the `dJ∧dJ` and `dJ∧dx` blocks.
    pub fn gauge(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let (m, d) = (self.m, self.d);
        if !self.gauge {
            return Ok(vec![0.0; m]);
        }
        let (gx, gw) = gauss_legendre(16);
        let mut g = vec![0.0; m];
        let dj: Vec<f64> = (0..m).map(|l| xi[l] - self.xi0[l]).collect();
        let dx: Vec<f64> = (0..d).map(|a| xi[m + a] - self.xi0[m + a]).collect();
        if dx.iter().any(|v| *v != 0.0) {
            for (x, w) in gx.iter().zip(&gw) {
                let tau = 0.5 * (x + 1.0);
                let mut p = xi.to_vec();
                for a in 0..d {
                    p[m + a] = self.xi0[m + a] + tau * dx[a];
                }
                let om = self.leaf_form(&p)?;
                for (l, gl) in g.iter_mut().enumerate() {
                    let s: f64 = (0..d).map(|a| om[(l, m + a)] * dx[a]).sum();
                    *gl -= 0.5 * w * s;
                }
            }
        }
        if m > 1 && dj.iter().any(|v| *v != 0.0) {
            for (x, w) in gx.iter().zip(&gw) {
                let tau = 0.5 * (x + 1.0);
                let mut p = self.xi0.clone();
                for l in 0..m {
                    p[l] = self.xi0[l] + tau * dj[l];
                }
                let om = self.leaf_form(&p)?;
                for (l, gl) in g.iter_mut().enumerate() {
                    let s: f64 = (0..m).map(|mu| dj[mu] * om[(mu, l)]).sum();
                    *gl += 0.5 * w * tau * s;
                }
            }
        }
        Ok(g)
    }

    /// Lattice basis `U(J)` as an `m x r` matrix.
    pub fn lattice_at(&self, j: &[f64]) -> DMatrix<f64> {
        match &self.table {
            None => DMatrix::zeros(self.m, 0),
            Some(t) => {
                let (v, _) = t.lattice_spline.eval(j);
                DMatrix::from_fn(self.m, self.r, |l, i| v[i * self.m + l])
            }
        }
    }

    /// `A(J) = [ℓ | U(J)/2π]`.
    pub fn frame(&self, j: &[f64]) -> DMatrix<f64> {
        let u = self.lattice_at(j) / (2.0 * PI);
        let mut a = DMatrix::zeros(self.m, self.m);
        a.columns_mut(0, self.m - self.r).copy_from(&self.ell);
        a.columns_mut(self.m - self.r, self.r).copy_from(&u);
        a
    }

    /// Actions and their Jacobian `∂I/∂J`.
    pub fn actions(&self, j: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let m = self.m;
        let nc = m - self.r;
        let mut vals = vec![0.0; m];
        let mut jac = DMatrix::zeros(m, m);
        for a in 0..nc {
            vals[a] = (0..m).map(|l| self.ell[(l, a)] * j[l]).sum();
            for l in 0..m {
                jac[(a, l)] = self.ell[(l, a)];
            }
        }
        if let Some(t) = &self.table {
            let (v, g) = t.action_spline.eval(j);
            for i in 0..self.r {
                vals[nc + i] = v[i];
                for l in 0..m {
                    jac[(nc + i, l)] = g[(i, l)];
                }
            }
        }
        (vals, jac)
    }

    /// `∂I_i/∂J_k` for the compact actions (`r x m`).
    pub fn frequency_matrix(&self, j: &[f64]) -> Result<DMatrix<f64>> {
        self.check_j(j)?;
        let (_, jac) = self.actions(j);
        Ok(jac.rows(self.m - self.r, self.r).into_owned())
    }

    /// Angular frequencies of the compact angles under the flows of `J_λ`,
    /// measured from periods refined on the fiber (`r x m`).
    pub fn measured_frequencies(&self, j: &[f64]) -> Result<DMatrix<f64>> {
        self.check_j(j)?;
        let mut xi = j.to_vec();
        xi.extend_from_slice(&self.xi0[self.m..]);
        let anchor = self.section_point(&xi)?;
        let guess = self.lattice_at(j);
        let mut u = DMatrix::zeros(self.m, self.r);
        for i in 0..self.r {
            let col: Vec<f64> = guess.column(i).iter().copied().collect();
            let (v, _) = lattice::refine_period(&self.fields, &anchor, &col, &self.opts.search)?;
            u.column_mut(i).copy_from_slice(&v);
        }
        let mut a = DMatrix::zeros(self.m, self.m);
        a.columns_mut(0, self.m - self.r).copy_from(&self.ell);
        a.columns_mut(self.m - self.r, self.r).copy_from(&(u / (2.0 * PI)));
        let inv = a.try_inverse().ok_or_else(|| Error::Singular("frame at J".into()))?;
        Ok(inv.rows(self.m - self.r, self.r).into_owned())
    }

    fn check_j(&self, j: &[f64]) -> Result<()> {
        if j.len() != self.m {
            return Err(Error::Invalid(format!("expected {} Casimir values", self.m)));
        }
        let sub = DomainBox {
            lower: self.domain.lower[..self.m].to_vec(),
            upper: self.domain.upper[..self.m].to_vec(),
            grid: self.domain.grid,
        };
        if !sub.contains(j, 1e-12) {
            return Err(Error::Chart(format!("J = {j:?} lies outside the action table")));
        }
        Ok(())
    }

    fn check_domain(&self, xi: &[f64]) -> Result<()> {
        if !self.domain.contains(xi, self.opts.domain_slack) {
            return Err(Error::Chart(format!("base point {xi:?} lies outside the chart domain")));
        }
        Ok(())
    }

    fn field_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let mut v = DMatrix::zeros(z.len(), self.m);
        for (l, f) in self.fields.iter().enumerate() {
            v.column_mut(l).copy_from_slice(&f.eval(z)?);
        }
        Ok(v)
    }

    /// Initial flow parameters from a scan of the compact angles.
    fn shooting_guess(&self, sigma: &[f64], z: &[f64], u: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (m, r) = (self.m, self.r);
        let zv = DVector::from_row_slice(z);
        let loose = self.opts.search.scan_flow;
        let per_axis = match r {
            0 => 1,
            1 => 48,
            2 => 24,
            _ => 12,
        };
        let mut layer: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![0.0; m], sigma.to_vec())];
        for i in 0..r {
            let col: Vec<f64> = u.column(i).iter().copied().collect();
            let times: Vec<f64> = (1..per_axis).map(|j| j as f64 / per_axis as f64).collect();
            let mut next = Vec::with_capacity(layer.len() * per_axis);
            for (s, p) in &layer {
                next.push((s.clone(), p.clone()));
                let mut integ = combined_integrator(&self.fields, &col, p, loose)?;
                let mut pts = Vec::new();
                if integ.sample(&times, |_, y| pts.push(y.to_vec())).is_err() {
                    continue;
                }
                for (tau, q) in times.iter().zip(pts) {
                    let s2: Vec<f64> = s.iter().zip(&col).map(|(a, b)| a + tau * b).collect();
                    next.push((s2, q));
                }
            }
            layer = next;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (s, p) in layer {
            let pv = DVector::from_row_slice(&p);
            let vl = self.field_matrix(&p)? * &self.ell;
            let t = lstsq(&vl, &(&zv - &pv))?;
            let miss = (&zv - &pv - &vl * &t).norm();
            if best.as_ref().is_none_or(|(b, _)| miss < *b) {
                let full: Vec<f64> = (0..m).map(|l| s[l] + (0..t.len()).map(|a| self.ell[(l, a)] * t[a]).sum::<f64>()).collect();
                best = Some((miss, full));
            }
        }
        Ok(best.map(|b| b.1).unwrap_or_else(|| vec![0.0; m]))
    }

    /// Damped Gauss–Newton for `Φ_s(σ) = z`.
    fn shoot(&self, sigma: &[f64], z: &[f64], s0: Vec<f64>) -> Result<Vec<f64>> {
        let cfg = &self.opts.flow;
        let target = 1e-12 * (1.0 + norm(z));
        let mut s = s0;
        let mut end = flow::flow_map(&self.fields, &s, sigma, cfg)?;
        let mut res = distance(&end, z);
        for _ in 0..40 {
            if res <= target {
                break;
            }
            let jac = self.field_matrix(&end)?;
            let f = DVector::from_iterator(z.len(), end.iter().zip(z).map(|(a, b)| a - b));
            let step = lstsq(&jac, &f)?;
            let mut lambda = 1.0;
            let mut improved = false;
            for _ in 0..16 {
                let trial: Vec<f64> = s.iter().zip(step.iter()).map(|(a, d)| a - lambda * d).collect();
                if let Ok(e) = flow::flow_map(&self.fields, &trial, sigma, cfg) {
                    let rr = distance(&e, z);
                    if rr < res {
                        s = trial;
                        end = e;
                        res = rr;
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
        if res <= 1e-9 * (1.0 + norm(z)) {
            Ok(s)
        } else {
            Err(Error::Newton(format!(
                "point not reached by the fiber flows (residual {res:.3e}); fiber disconnected or outside the domain"
            )))
        }
    }

    /// Forward map together with the raw flow parameters `s`.
    pub fn forward_with_flow(&self, z: &[f64], hint: Option<&[f64]>) -> Result<(ChartPoint, Vec<f64>)> {
        if z.len() != 2 * self.n {
            return Err(Error::Invalid(format!("phase point needs {} coordinates", 2 * self.n)));
        }
        let xi = self.base(z)?;
        self.check_domain(&xi)?;
        let (m, r) = (self.m, self.r);
        let j = &xi[..m];
        let sigma = self.section_point(&xi)?;
        let u = self.lattice_at(j);
        let s = match hint {
            Some(h) => match self.shoot(&sigma, z, h.to_vec()) {
                Ok(s) => s,
                Err(_) => self.shoot(&sigma, z, self.shooting_guess(&sigma, z, &u)?)?,
            },
            None => self.shoot(&sigma, z, self.shooting_guess(&sigma, z, &u)?)?,
        };
        let g = self.gauge(&xi)?;
        let shifted = DVector::from_iterator(m, s.iter().zip(&g).map(|(a, b)| a - b));
        let a = self.frame(j);
        let y = a.lu().solve(&shifted).ok_or_else(|| Error::Singular("chart frame".into()))?;
        let (actions, _) = self.actions(j);
        let point = ChartPoint {
            actions,
            x: xi[m..].to_vec(),
            t: y.rows(0, m - r).iter().copied().collect(),
            phi: y.rows(m - r, r).iter().map(|v| v.rem_euclid(2.0 * PI)).collect(),
        };
        Ok((point, s))
    }

    pub fn forward(&self, z: &[f64]) -> Result<ChartPoint> {
        Ok(self.forward_with_flow(z, None)?.0)
    }

    /// Casimir values with the given actions (Newton on the table).
    pub fn casimirs_from_actions(&self, actions: &[f64]) -> Result<Vec<f64>> {
        let m = self.m;
        if actions.len() != m {
            return Err(Error::Invalid(format!("expected {m} actions")));
        }
        let mut j = self.xi0[..m].to_vec();
        if let Some(t) = &self.table {
            // start from the closest node
            let mut best = f64::INFINITY;
            for (node, vals) in t.nodes.iter().zip(&t.actions) {
                let (iv, _) = self.actions(node);
                let mut full = iv.clone();
                full[m - self.r..].copy_from_slice(vals);
                let dd = distance(&full, actions);
                if dd < best {
                    best = dd;
                    j = node.clone();
                }
            }
        }
        for _ in 0..60 {
            let (iv, jac) = self.actions(&j);
            let f = DVector::from_iterator(m, iv.iter().zip(actions).map(|(a, b)| a - b));
            if f.amax() <= 1e-14 * (1.0 + actions.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
                break;
            }
            let dj = jac.lu().solve(&f).ok_or_else(|| Error::Singular("action Jacobian".into()))?;
            j.iter_mut().zip(dj.iter()).for_each(|(a, b)| *a -= b);
            if dj.amax() <= 1e-15 * (1.0 + j.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
                break;
            }
        }
        let (iv, _) = self.actions(&j);
        if distance(&iv, actions) > 1e-10 * (1.0 + norm(actions)) {
            return Err(Error::Newton(format!("actions {actions:?} not attained on the table")));
        }
        self.check_j(&j).map_err(|_| Error::Chart(format!("actions {actions:?} lie outside the table")))?;
        Ok(j)
    }

    pub fn inverse(&self, w: &ChartPoint) -> Result<PhasePoint> {
        Ok(self.inverse_with_flow(w)?.0)
    }

    /// Inverse map together with the flow parameters used.
    pub fn inverse_with_flow(&self, w: &ChartPoint) -> Result<(PhasePoint, Vec<f64>)> {
        let (m, r, d) = (self.m, self.r, self.d);
        if w.actions.len() != m || w.x.len() != d || w.t.len() != m - r || w.phi.len() != r {
            return Err(Error::Invalid("chart point has the wrong block sizes".into()));
        }
        let j = self.casimirs_from_actions(&w.actions)?;
        let mut xi = j.clone();
        xi.extend_from_slice(&w.x);
        self.check_domain(&xi)?;
        let sigma = self.section_point(&xi)?;
        let g = self.gauge(&xi)?;
        let y = DVector::from_vec(w.angles());
        let s: Vec<f64> = (self.frame(&j) * y).iter().zip(&g).map(|(a, b)| a + b).collect();
        let z = flow::flow_map(&self.fields, &s, &sigma, &self.opts.flow)?;
        Ok((PhasePoint::new(z)?, s))
    }

    /// Seeded chart points inside the domain, `t ∈ [-t_span, t_span]`.
    pub fn sample_chart_points(&self, count: usize, seed: u64, t_span: f64, margin: f64) -> Result<Vec<ChartPoint>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, r) = (self.m, self.r);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let xi: Vec<f64> = self
                .domain
                .lower
                .iter()
                .zip(&self.domain.upper)
                .map(|(lo, hi)| {
                    let pad = margin * (hi - lo);
                    rng.random_range(lo + pad..hi - pad)
                })
                .collect();
            let (actions, _) = self.actions(&xi[..m]);
            out.push(ChartPoint {
                actions,
                x: xi[m..].to_vec(),
                t: (0..m - r).map(|_| rng.random_range(-t_span..t_span)).collect(),
                phi: (0..r).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
            });
        }
        Ok(out)
    }

    /// Central-difference Jacobian `∂w/∂z` of the forward map.
    pub fn forward_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let dim = z.len();
        let (_, s) = self.forward_with_flow(z, None)?;
        let r = self.r;
        let mut jac = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let h = 1e-5 * (1.0 + z[c].abs());
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[c] += h;
            zm[c] -= h;
            let wp = self.forward_with_flow(&zp, Some(&s))?.0.to_vec();
            let wm = self.forward_with_flow(&zm, Some(&s))?.0.to_vec();
            for i in 0..dim {
                let mut diff = wp[i] - wm[i];
                if i >= dim - r {
                    diff = (diff + PI).rem_euclid(2.0 * PI) - PI;
                }
                jac[(i, c)] = diff / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// Serializable description of the chart.
    pub fn metadata(&self) -> Value {
        let mat = |a: &DMatrix<f64>| -> Vec<Vec<f64>> { (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect() };
        let table = self.table.as_ref().map(|t| {
            json!({
                "nodes": t.nodes,
                "lattice": t.lattices.iter().map(|u| mat(&u.transpose())).collect::<Vec<_>>(),
                "actions": t.actions,
            })
        });
        json!({
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "rank": self.r,
            "signature": [self.m - self.r, self.r],
            "coordinates": self.coord_exprs.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            "reference": self.z0,
            "reference_base": self.xi0,
            "section_directions": mat(&self.section.transpose()),
            "lattice": self.lattice,
            "adapted_map": mat(&self.adapted),
            "noncompact_frame": mat(&self.ell.transpose()),
            "domain": self.domain,
            "gauge": self.gauge,
            "table": table,
        })
    }

    /// Rows `(J..., I..., U...)` of the action table.
    pub fn table_rows(&self) -> Vec<Vec<f64>> {
        match &self.table {
            None => Vec::new(),
            Some(t) => t
                .nodes
                .iter()
                .zip(&t.actions)
                .zip(&t.lattices)
                .map(|((j, a), u)| {
                    let (full, _) = self.actions(j);
                    let mut row = j.clone();
                    row.extend(full[..self.m - self.r].iter().copied());
                    row.extend(a.iter().copied());
                    row.extend(u.transpose().iter().copied());
                    row
                })
                .collect(),
        }
    }
}

/// Builds a chart on `domain` from a lattice detected at the system's reference.
pub fn build_chart(
    sys: &SystemDef,
    cas: &CasimirSet,
    transverse: &[Expr],
    lat: &PeriodLattice,
    domain: &DomainBox,
    opts: &ChartOptions,
) -> Result<Chart> {
    let n = sys.n;
    let m = cas.len();
    if m != sys.m() {
        return Err(Error::Chart(format!("expected {} Casimirs, got {m}", sys.m())));
    }
    let d = transverse.len();
    if m + d != sys.k() {
        return Err(Error::Chart(format!("expected {} transverse functions, got {d}", sys.k() - m)));
    }
    if lat.m != m {
        return Err(Error::Chart("lattice dimension differs from the number of Casimirs".into()));
    }
    if domain.lower.len() != m + d {
        return Err(Error::Chart(format!("domain must have {} bounds (J then x)", m + d)));
    }
    let r = lat.rank();
    let mut coord_exprs = cas.pulled.clone();
    coord_exprs.extend(transverse.iter().map(|e| sys.pull_back(e)));
    let coords = coord_exprs.iter().map(|e| SmoothFunction::new(e.clone(), n)).collect::<Result<Vec<_>>>()?;
    let fields = cas.fields(n)?;
    let z0 = sys.reference.to_vec();
    let xi0: Vec<f64> = coords.iter().map(|f| Ok(f.value(&z0)?)).collect::<Result<Vec<_>>>()?;
    if !domain.contains(&xi0, 0.0) {
        return Err(Error::Chart(format!("reference base point {xi0:?} lies outside the domain")));
    }
    let mut v0 = DMatrix::zeros(2 * n, m);
    for (l, f) in fields.iter().enumerate() {
        v0.column_mut(l).copy_from_slice(&f.eval(&z0)?);
    }
    if min_singular_value(&v0) <= sys.tolerances.rank {
        return Err(Error::Chart("Casimir flows are dependent at the reference".into()));
    }
    let section = complement_basis(&v0);
    let adapted = adapt_basis(lat)?;
    let tinv = adapted.clone().try_inverse().ok_or_else(|| Error::Singular("adapted map".into()))?;
    let ell = tinv.columns(0, m - r).into_owned();
    let gauge = !(m == 1 && d == 0);

    let mut chart = Chart {
        name: sys.name.clone(),
        n,
        m,
        d,
        r,
        coord_exprs,
        coords,
        fields,
        z0,
        xi0,
        section,
        lattice: lat.clone(),
        adapted,
        ell,
        table: None,
        domain: domain.clone(),
        gauge,
        opts: *opts,
        tolerances: sys.tolerances,
        provenance: ResidualReport::new(),
    };
    let db = chart.base_jacobian(&chart.z0)? * &chart.section;
    if min_singular_value(&db) <= sys.tolerances.rank {
        return Err(Error::Chart("base coordinates are not transverse to the fibers at the reference".into()));
    }

    // action table over the J box at the reference transverse values
    let axes_nodes: Vec<Vec<f64>> = (0..m).map(|l| linspace(domain.lower[l], domain.upper[l], domain.grid)).collect();
    let sizes: Vec<usize> = axes_nodes.iter().map(|a| a.len()).collect();
    let total: usize = sizes.iter().product();
    let unflatten = |mut flat: usize| -> Vec<usize> {
        let mut idx = vec![0; m];
        for l in (0..m).rev() {
            idx[l] = flat % sizes[l];
            flat /= sizes[l];
        }
        idx
    };
    let flatten = |idx: &[usize]| -> usize { idx.iter().zip(&sizes).fold(0, |acc, (i, s)| acc * s + i) };
    let nodes: Vec<Vec<f64>> = (0..total).map(|f| unflatten(f).iter().enumerate().map(|(l, &i)| axes_nodes[l][i]).collect()).collect();
    let x_ref = chart.xi0[m..].to_vec();
    let anchor_at = |chart: &Chart, j: &[f64]| -> Result<Vec<f64>> {
        let mut xi = j.to_vec();
        xi.extend_from_slice(&x_ref);
        chart.section_point(&xi)
    };

    let mut report = ResidualReport::new();
    if r > 0 {
        let start = (0..total)
            .min_by(|a, b| distance(&nodes[*a], &chart.xi0[..m]).total_cmp(&distance(&nodes[*b], &chart.xi0[..m])))
            .unwrap();
        let mut lattices: Vec<Option<DMatrix<f64>>> = vec![None; total];
        let mut anchors: Vec<Option<Vec<f64>>> = vec![None; total];
        let refine_all = |chart: &Chart, anchor: &[f64], guess: &DMatrix<f64>, j: &[f64]| -> Result<DMatrix<f64>> {
            let mut u = DMatrix::zeros(m, r);
            for i in 0..r {
                let col: Vec<f64> = guess.column(i).iter().copied().collect();
                let (v, _) = lattice::refine_period(&chart.fields, anchor, &col, &opts.search)
                    .map_err(|e| Error::Chart(format!("lattice continuation failed at J = {j:?}: {e}")))?;
                u.column_mut(i).copy_from_slice(&v);
            }
            Ok(u)
        };
        let a0 = anchor_at(&chart, &nodes[start])?;
        lattices[start] = Some(refine_all(&chart, &a0, &lat.basis_matrix(), &nodes[start])?);
        anchors[start] = Some(a0);
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            let idx = unflatten(cur);
            for l in 0..m {
                for delta in [-1isize, 1] {
                    let v = idx[l] as isize + delta;
                    if v < 0 || v >= sizes[l] as isize {
                        continue;
                    }
                    let mut nb = idx.clone();
                    nb[l] = v as usize;
                    let f = flatten(&nb);
                    if lattices[f].is_some() {
                        continue;
                    }
                    let a = anchor_at(&chart, &nodes[f])?;
                    let guess = lattices[cur].clone().unwrap();
                    lattices[f] = Some(refine_all(&chart, &a, &guess, &nodes[f])?);
                    anchors[f] = Some(a);
                    queue.push_back(f);
                }
            }
        }
        let lattices: Vec<DMatrix<f64>> = lattices.into_iter().map(Option::unwrap).collect();
        let anchors: Vec<Vec<f64>> = anchors.into_iter().map(Option::unwrap).collect();
        let mut actions = Vec::with_capacity(total);
        for (a, u) in anchors.iter().zip(&lattices) {
            let vals = (0..r)
                .map(|i| {
                    let col: Vec<f64> = u.column(i).iter().copied().collect();
                    action_integral(&chart.fields, a, &col, &opts.flow, opts.search.tol_return)
                })
                .collect::<Result<Vec<_>>>()?;
            actions.push(vals);
        }
        // the frame must stay invertible over the table
        let mut min_det = f64::INFINITY;
        for u in &lattices {
            let mut a = DMatrix::zeros(m, m);
            a.columns_mut(0, m - r).copy_from(&chart.ell);
            a.columns_mut(m - r, r).copy_from(&(u / (2.0 * PI)));
            min_det = min_det.min(min_singular_value(&a));
        }
        if !(min_det > 1e-10) {
            return Err(Error::Chart("action map is not invertible on the table (dI/dJ singular)".into()));
        }
        // compact actions must be monotone along every grid line of their own lattice direction
        let axes: Vec<SplineAxis> = axes_nodes.iter().map(|a| SplineAxis::new(a.clone())).collect::<Result<_>>()?;
        let lattice_values: Vec<Vec<f64>> =
            (0..r * m).map(|c| lattices.iter().map(|u| u[(c % m, c / m)]).collect()).collect();
        let action_values: Vec<Vec<f64>> = (0..r).map(|i| actions.iter().map(|a| a[i]).collect()).collect();
        chart.table = Some(ActionTable {
            nodes: nodes.clone(),
            lattice_spline: TensorSpline::new(axes.clone(), lattice_values)?,
            action_spline: TensorSpline::new(axes, action_values)?,
            lattices: lattices.clone(),
            actions,
        });
        report.push(
            CheckRecord::new("action_table", ANCHOR_DUALITY, true, min_det, 1e-10, total)
                .with("min_frame_singular_value", min_det)
                .with("grid", domain.grid),
        );
    }

    if opts.check_rank {
        let mut ranks = Vec::new();
        for corner in 0..(1usize << m) {
            let j: Vec<f64> = (0..m).map(|l| if corner >> l & 1 == 1 { domain.upper[l] } else { domain.lower[l] }).collect();
            let a = anchor_at(&chart, &j)?;
            let mut cfg = opts.search;
            if r > 0 {
                let longest = chart.lattice_at(&j).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                cfg.half_width = cfg.half_width.min((4.0 * longest).max(20.0 * cfg.step));
            }
            let corner_lat = detect_period_lattice(&chart.fields, &a, &cfg)?;
            ranks.push(corner_lat.rank());
        }
        let stable = ranks.iter().all(|x| *x == r);
        report.push(
            CheckRecord::new("lattice_rank_constant", "isotropy lattice of fixed rank over the domain", stable, 0.0, 0.0, ranks.len())
                .with("corner_ranks", &ranks)
                .with("reference_rank", r),
        );
        if !stable {
            return Err(Error::Chart(format!(
                "lattice rank varies across the domain (reference {r}, corners {ranks:?})"
            )));
        }
    }
    report.bound("lattice_search_half_width", lat.search_half_width);
    report.note("signature", (m - r, r));
    chart.provenance = report;
    Ok(chart)
}

/// Builds the chart described by a system definition.
pub fn build_system_chart(sys: &SystemDef, seed: u64, opts: &ChartOptions) -> Result<Chart> {
    let domain = sys
        .domain
        .clone()
        .ok_or_else(|| Error::Chart(format!("system `{}` declares no chart domain", sys.name)))?;
    let cas = sys.casimir_set()?;
    let transverse = sys.transverse_functions(&cas, seed)?;
    let fields = cas.fields(sys.n)?;
    let mut search = opts.search;
    search.tol_return = sys.tolerances.return_;
    search.tol_commute = sys.tolerances.commute;
    let lat = detect_period_lattice(&fields, &sys.reference, &search)?;
    let mut opts = *opts;
    opts.search = search;
    build_chart(sys, &cas, &transverse, &lat, &domain, &opts)
}

/// Pulls the canonical form into chart coordinates and checks its blocks.
pub fn verify_canonical_blocks(chart: &Chart, samples: &[PhasePoint], abelian: bool) -> Result<ResidualReport> {
    let (m, d, r) = (chart.m, chart.d, chart.r);
    let omega = SymplecticStructure::new(chart.n).omega_matrix();
    let mut worst = [0.0f64; 5];
    let mut xx_min = f64::INFINITY;
    let mut skipped = Vec::new();
    let mut used = 0;
    for z in samples {
        let jac = match chart.forward_jacobian(z) {
            Ok(j) => j,
            Err(e) => {
                skipped.push(format!("{:?}: {e}", z.to_vec()));
                continue;
            }
        };
        let Some(p) = jac.try_inverse() else {
            skipped.push(format!("{:?}: singular chart Jacobian", z.to_vec()));
            continue;
        };
        used += 1;
        let w = p.transpose() * &omega * p;
        let (ia, xa, ya) = (0, m, m + d);
        let block = |r0: usize, c0: usize, rows: usize, cols: usize| w.view((r0, c0), (rows, cols)).into_owned();
        let iy = block(ia, ya, m, m) - DMatrix::<f64>::identity(m, m);
        worst[0] = worst[0].max(iy.amax());
        worst[1] = worst[1].max(block(ya, ya, m, m).amax());
        if d > 0 {
            worst[2] = worst[2].max(block(ya, xa, m, d).amax());
            worst[4] = worst[4].max(block(ia, xa, m, d).amax());
            xx_min = xx_min.min(min_singular_value(&block(xa, xa, d, d)));
        }
        worst[3] = worst[3].max(block(ia, ia, m, m).amax());
    }
    let tol = chart.tolerances.blocks;
    let anchor = if abelian { ANCHOR_DARBOUX } else { ANCHOR_BLOCKS };
    let mut report = ResidualReport::new();
    let names = ["block_I_y", "block_y_y", "block_y_x", "block_I_I", "block_I_x"];
    for (i, name) in names.iter().enumerate() {
        if d == 0 && (i == 2 || i == 4) {
            continue;
        }
        report.push(CheckRecord::new(name, anchor, used > 0 && worst[i] < tol, worst[i], tol, used));
    }
    if d > 0 {
        report.push(CheckRecord::new("block_x_x_nondegenerate", anchor, xx_min > tol, xx_min, tol, used));
    }
    let max_block = worst.iter().copied().fold(0.0, f64::max);
    report.note("max_block_residual", max_block);
    report.note("signature", (m - r, r));
    if !skipped.is_empty() {
        report.note("skipped_samples", skipped);
    }
    Ok(report)
}

/// Unwraps a sequence of angles by nearest-integer jump correction.
pub fn unwrap_angles(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut offset = 0.0;
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            let prev: f64 = out[i - 1];
            let jump = ((prev - (v + offset)) / (2.0 * PI)).round();
            offset += 2.0 * PI * jump;
        }
        out.push(v + offset);
    }
    out
}

/// Slope of the least-squares line through `(t_i, y_i)`.
pub fn ls_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let den: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
    num / den
}

/// Integrates the flow of `hamiltonian` from `z0` and checks the action-angle
/// equations of motion.
pub fn verify_equations_of_motion(
    chart: &Chart,
    hamiltonian: &Expr,
    z0: &[f64],
    t_max: f64,
    samples: usize,
    seed: u64,
) -> Result<ResidualReport> {
    if !(t_max > 0.0) || samples < 3 {
        return Err(Error::Invalid("equations of motion need T > 0 and at least 3 samples".into()));
    }
    let tol = &chart.tolerances;
    let (m, d, r) = (chart.m, chart.d, chart.r);
    let hfun = SmoothFunction::new(hamiltonian.clone(), chart.n)?;
    let mut report = ResidualReport::new();
    let (w0, s0) = chart.forward_with_flow(z0, None)?;
    let h0 = hfun.value(z0)?;

    // the Hamiltonian must be a function of the actions alone
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regress: f64 = 0.0;
    for _ in 0..8 {
        let mut w = w0.clone();
        for (a, x) in w.x.iter_mut().enumerate() {
            let (lo, hi) = (chart.domain.lower[m + a], chart.domain.upper[m + a]);
            *x = (*x + rng.random_range(-0.25..0.25) * (hi - lo)).clamp(lo, hi);
        }
        w.t.iter_mut().for_each(|t| *t += rng.random_range(-1.0..1.0));
        w.phi.iter_mut().for_each(|p| *p = rng.random_range(0.0..2.0 * PI));
        let z = chart.inverse(&w)?;
        regress = regress.max((hfun.value(&z)? - h0).abs());
    }
    let action_only = regress < tol.eom_constant;
    report.push(
        CheckRecord::new("hamiltonian_action_only", ANCHOR_EOM, action_only, regress, tol.eom_constant, 8)
            .with("hamiltonian", hamiltonian.to_string()),
    );
    if !action_only {
        return Ok(report);
    }

    // ∂H/∂I through the inverse chart
    let mut expected = vec![0.0; m];
    for (mu, e) in expected.iter_mut().enumerate() {
        let h = 1e-5 * (1.0 + w0.actions[mu].abs());
        let mut wp = w0.clone();
        let mut wm = w0.clone();
        wp.actions[mu] += h;
        wm.actions[mu] -= h;
        *e = (hfun.value(&chart.inverse(&wp)?)? - hfun.value(&chart.inverse(&wm)?)?) / (2.0 * h);
    }

    let field = hamiltonian_vector_field(hamiltonian, chart.n)?;
    let times: Vec<f64> = (0..samples).map(|i| t_max * i as f64 / (samples - 1) as f64).collect();
    let mut traj = Vec::with_capacity(samples);
    let mut integ = Integrator::new(|y: &[f64], o: &mut [f64]| field.eval_into(y, o), 0.0, z0, chart.opts.flow)?;
    integ.sample(&times, |_, y| traj.push(y.to_vec()))?;
    let a = chart.frame(&chart.base(z0)?[..m]);
    let rate = &a * DVector::from_row_slice(&expected);
    let mut points = Vec::with_capacity(samples);
    for (t, z) in times.iter().zip(&traj) {
        let hint: Vec<f64> = s0.iter().zip(rate.iter()).map(|(s, v)| s + v * t).collect();
        points.push(chart.forward_with_flow(z, Some(&hint))?.0);
    }
    let dev = |f: &dyn Fn(&ChartPoint) -> Vec<f64>| -> f64 {
        let base = f(&points[0]);
        points.iter().map(|p| distance(&f(p), &base)).fold(0.0, f64::max)
    };
    let di = dev(&|p| p.actions.clone());
    let dx = dev(&|p| p.x.clone());
    report.push(CheckRecord::new("eom_actions_constant", ANCHOR_EOM, di < tol.eom_constant, di, tol.eom_constant, samples));
    if d > 0 {
        report.push(CheckRecord::new("eom_transverse_constant", ANCHOR_EOM, dx < tol.eom_constant, dx, tol.eom_constant, samples));
    }
    let mut slopes = Vec::with_capacity(m);
    for c in 0..m {
        let series: Vec<f64> = if c < m - r {
            points.iter().map(|p| p.t[c]).collect()
        } else {
            unwrap_angles(&points.iter().map(|p| p.phi[c - (m - r)]).collect::<Vec<_>>())
        };
        slopes.push(ls_slope(&times, &series));
    }
    let scale = expected.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let rel = slopes.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    report.push(
        CheckRecord::new("eom_angle_slopes", ANCHOR_EOM, rel < tol.eom_slope, rel, tol.eom_slope, samples)
            .with("slopes", &slopes)
            .with("expected", &expected),
    );
    report.note("slopes", slopes);
    report.note("dH_dI", expected);
    Ok(report)
}

/// Round trip `inverse(forward(z)) = z` on points drawn through the inverse.
pub fn verify_round_trip(chart: &Chart, count: usize, seed: u64, t_span: f64) -> Result<CheckRecord> {
    let pts = chart.sample_chart_points(count, seed, t_span, 0.02)?;
    let mut worst: f64 = 0.0;
    let mut worst_chart: f64 = 0.0;
    let r = chart.r;
    for w in &pts {
        let (z, s) = chart.inverse_with_flow(w)?;
        let (back, _) = chart.forward_with_flow(&z, Some(&s))?;
        let again = chart.inverse(&back)?;
        worst = worst.max(distance(&again, &z));
        let (a, b) = (w.to_vec(), back.to_vec());
        let n = a.len();
        for i in 0..n {
            let mut diff = a[i] - b[i];
            if i >= n - r {
                diff = (diff + PI).rem_euclid(2.0 * PI) - PI;
            }
            worst_chart = worst_chart.max(diff.abs());
        }
    }
    let tol = chart.tolerances.roundtrip;
    Ok(CheckRecord::new("round_trip", ANCHOR_ROUNDTRIP, worst < tol, worst, tol, pts.len())
        .with("chart_coordinate_error", worst_chart))
}

/// Compares `y'` of two charts along fibers: the difference must be constant
/// on each fiber.
pub fn angle_offset_check(a: &Chart, b: &Chart, fibers: usize, per_fiber: usize, seed: u64) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = a.sample_chart_points(fibers, seed, 1.0, 0.1)?;
    let r = a.r;
    let m = a.m;
    let mut worst: f64 = 0.0;
    for w in &base {
        let mut offsets: Vec<Vec<f64>> = Vec::new();
        for _ in 0..per_fiber {
            let mut v = w.clone();
            v.t.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
            v.phi.iter_mut().for_each(|p| *p = rng.random_range(0.0..2.0 * PI));
            let z = a.inverse(&v)?;
            let ya = a.forward(&z)?.angles();
            let yb = b.forward(&z)?.angles();
            let off: Vec<f64> = (0..m)
                .map(|i| {
                    let d = ya[i] - yb[i];
                    if i >= m - r {
                        d.rem_euclid(2.0 * PI)
                    } else {
                        d
                    }
                })
                .collect();
            offsets.push(off);
        }
        for o in &offsets[1..] {
            for i in 0..m {
                let mut d = o[i] - offsets[0][i];
                if i >= m - r {
                    d = (d + PI).rem_euclid(2.0 * PI) - PI;
                }
                worst = worst.max(d.abs());
            }
        }
    }
    Ok(CheckRecord::new("angle_transition", ANCHOR_TRANSITION, worst < 1e-6, worst, 1e-6, fibers * per_fiber))
}

/// `F · (∂I/∂J)ᵀ = 1` with `F` the measured angular frequencies.
pub fn frequency_duality(chart: &Chart, j: &[f64]) -> Result<CheckRecord> {
    let f = chart.measured_frequencies(j)?;
    let di = chart.frequency_matrix(j)?;
    let prod = &f * di.transpose();
    let err = (prod - DMatrix::<f64>::identity(chart.r, chart.r)).amax();
    Ok(CheckRecord::new("frequency_duality", ANCHOR_DUALITY, err < 1e-4, err, 1e-4, 1).with("J", j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((i - 2.0 / 15.0).abs() < 1e-14);
        let (x, w) = gauss_legendre(16);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((i - 2.0 * 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn unwrap_and_slope() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.3).collect();
        let wrapped: Vec<f64> = t.iter().map(|t| (1.5 * t).rem_euclid(2.0 * PI)).collect();
        let un = unwrap_angles(&wrapped);
        assert!((ls_slope(&t, &un) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn circle_action() {
        let f = vec![hamiltonian_vector_field(&"(p1^2+q1^2)/2".parse().unwrap(), 1).unwrap()];
        let cfg = ChartOptions::default().flow;
        let i = action_integral(&f, &[1.0, 0.0], &[2.0 * PI], &cfg, 1e-9).unwrap();
        assert!((i - 0.5).abs() < 1e-10, "{i}");
        let i = action_integral(&f, &[2.0, 0.0], &[2.0 * PI], &cfg, 1e-9).unwrap();
        assert!((i - 2.0).abs() < 1e-10, "{i}");
    }

    #[test]
    fn chart_point_layout() {
        let w = ChartPoint::from_slice(&[1.0, 2.0, 3.0, 4.0, 7.0], 2, 1, 1).unwrap();
        assert_eq!(w.actions, vec![1.0, 2.0]);
        assert_eq!(w.x, vec![3.0]);
        assert_eq!(w.t, vec![4.0]);
        assert!((w.phi[0] - (7.0 - 2.0 * PI)).abs() < 1e-15);
        assert_eq!(w.to_vec().len(), 5);
        assert!(ChartPoint::from_slice(&[1.0], 2, 1, 1).is_err());
    }
}
