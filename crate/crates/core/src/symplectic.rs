//! Canonical symplectic structure on R^{2n}.
//!
//! Conventions: phase points are ordered `(q1..qn, p1..pn)`, the symplectic
//! form is `Ω = Σ dp_a ∧ dq^a`, Hamiltonian vector fields satisfy
//! `X_H ⌟ Ω = -dH`, and `{f, g} = Σ (∂_q f ∂_p g - ∂_p f ∂_q g)` so that
//! `{q^a, p_a} = 1`.

use std::ops::Deref;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{CompiledExpr, EvalError, Expr};

/// Variable names `q1..qn, p1..pn`.
pub fn phase_variables(n: usize) -> Vec<String> {
    (1..=n).map(|a| format!("q{a}")).chain((1..=n).map(|a| format!("p{a}"))).collect()
}

/// A point of R^{2n}, ordered `(q, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint(Vec<f64>);

impl PhasePoint {
    pub fn new(z: Vec<f64>) -> Result<PhasePoint> {
        if z.is_empty() || z.len() % 2 != 0 {
            return Err(Error::Invalid(format!("phase point must have even length, got {}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("phase point has non-finite entries".into()));
        }
        Ok(PhasePoint(z))
    }

    pub fn n(&self) -> usize {
        self.0.len() / 2
    }

    pub fn q(&self) -> &[f64] {
        &self.0[..self.n()]
    }

    pub fn p(&self) -> &[f64] {
        &self.0[self.n()..]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for PhasePoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A scalar function on phase space with its compiled symbolic gradient.
#[derive(Debug, Clone)]
pub struct SmoothFunction {
    expr: Expr,
    value: CompiledExpr,
    gradient: Vec<CompiledExpr>,
}

impl SmoothFunction {
    pub fn new(expr: Expr, n: usize) -> Result<SmoothFunction> {
        let vars = phase_variables(n);
        let value = expr.compile(&vars)?;
        let gradient = vars
            .iter()
            .map(|v| expr.differentiate(v).compile(&vars))
            .collect::<Result<Vec<_>>>()?;
        Ok(SmoothFunction { expr, value, gradient })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn value(&self, z: &[f64]) -> Result<f64, EvalError> {
        self.value.eval(z)
    }

    pub fn gradient_into(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, g) in out.iter_mut().zip(&self.gradient) {
            *o = g.eval(z)?;
        }
        Ok(())
    }

    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.gradient.len()];
        self.gradient_into(z, &mut out)?;
        Ok(out)
    }
}

/// Jacobian (rows = functions, columns = phase coordinates).
pub fn jacobian(funcs: &[SmoothFunction], z: &[f64]) -> Result<DMatrix<f64>, EvalError> {
    let mut jac = DMatrix::zeros(funcs.len(), z.len());
    let mut row = vec![0.0; z.len()];
    for (i, f) in funcs.iter().enumerate() {
        f.gradient_into(z, &mut row)?;
        for (j, v) in row.iter().enumerate() {
            jac[(i, j)] = *v;
        }
    }
    Ok(jac)
}

/// Hamiltonian vector field of a generating function, with cached partials.
#[derive(Debug, Clone)]
pub struct VectorFieldHandle {
    n: usize,
    generator: Expr,
    partials: Vec<Expr>,
    compiled: Vec<CompiledExpr>,
}

impl VectorFieldHandle {
    pub fn generator(&self) -> &Expr {
        &self.generator
    }

    /// Symbolic partials `∂H/∂z_i`, ordered `(q, p)`.
    pub fn partials(&self) -> &[Expr] {
        &self.partials
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Writes `X_H(z)` into `out`.
    #[inline]
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let n = self.n;
        for a in 0..n {
            out[a] = self.compiled[n + a].eval(z)?;
            out[n + a] = -self.compiled[a].eval(z)?;
        }
        Ok(())
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; 2 * self.n];
        self.eval_into(z, &mut out)?;
        Ok(out)
    }

    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.compiled.iter().map(|c| c.eval(z)).collect::<Result<Vec<_>, _>>()?)
    }
}

/// Builds `X_H` with `X_H = (∂H/∂p) ∂_q - (∂H/∂q) ∂_p`.
pub fn hamiltonian_vector_field(h: &Expr, n: usize) -> Result<VectorFieldHandle> {
    let vars = phase_variables(n);
    let partials: Vec<Expr> = vars.iter().map(|v| h.differentiate(v)).collect();
    // compiling the generator rejects variables outside the phase space
    h.compile(&vars)?;
    let compiled = partials.iter().map(|p| p.compile(&vars)).collect::<Result<Vec<_>>>()?;
    Ok(VectorFieldHandle { n, generator: h.clone(), partials, compiled })
}

/// Canonical Poisson bracket `{f, g}` as an expression.
pub fn poisson_bracket(f: &Expr, g: &Expr, n: usize) -> Expr {
    Expr::sum((1..=n).map(|a| {
        let (q, p) = (format!("q{a}"), format!("p{a}"));
        Expr::sub(
            Expr::mul(f.differentiate(&q), g.differentiate(&p)),
            Expr::mul(f.differentiate(&p), g.differentiate(&q)),
        )
    }))
}

/// `θ(ż) = Σ p_a q̇^a` for the Liouville form `θ = Σ p_a dq^a`.
pub fn liouville_integrand(z: &[f64], velocity: &[f64]) -> Result<f64> {
    if velocity.len() != z.len() {
        return Err(Error::Invalid(format!(
            "velocity has length {}, expected {}",
            velocity.len(),
            z.len()
        )));
    }
    let n = z.len() / 2;
    Ok((0..n).map(|a| z[n + a] * velocity[a]).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymplecticStructure {
    pub n: usize,
}

impl SymplecticStructure {
    pub fn new(n: usize) -> Self {
        SymplecticStructure { n }
    }

    /// Matrix `M` with `Ω(a, b) = aᵀ M b`.
    pub fn omega_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        for a in 0..n {
            m[(n + a, a)] = 1.0;
            m[(a, n + a)] = -1.0;
        }
        m
    }

    pub fn omega(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.n;
        (0..n).map(|i| a[n + i] * b[i] - a[i] * b[n + i]).sum()
    }

    /// Linear coefficient rule of θ: `θ_j(z) = Σ_k L[j][k] z_k`.
    pub fn liouville_coefficient_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut l = DMatrix::zeros(2 * n, 2 * n);
        for a in 0..n {
            l[(a, n + a)] = 1.0;
        }
        l
    }

    pub fn liouville_coefficients(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; 2 * n];
        out[..n].copy_from_slice(&z[n..]);
        out
    }

    /// Components `(dθ)_{ij} = ∂_i θ_j - ∂_j θ_i`.
    pub fn liouville_differential(&self) -> DMatrix<f64> {
        let l = self.liouville_coefficient_matrix();
        l.transpose() - &l
    }

    /// Antisymmetric, nondegenerate, and `dθ = Ω` exactly.
    pub fn check_invariants(&self) -> bool {
        let m = self.omega_matrix();
        let antisymmetric = m == -m.transpose();
        let nondegenerate = m.clone().determinant().abs() == 1.0;
        antisymmetric && nondegenerate && self.liouville_differential() == m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn eval_at(e: &Expr, n: usize, z: &[f64]) -> f64 {
        e.compile(&phase_variables(n)).unwrap().eval(z).unwrap()
    }

    #[test]
    fn oscillator_field_at_unit_point() {
        let h = parse("(p1^2 + q1^2)/2").unwrap();
        let x = hamiltonian_vector_field(&h, 1).unwrap();
        assert_eq!(x.eval(&[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
    }

    #[test]
    fn constant_fields() {
        let xp = hamiltonian_vector_field(&parse("p1").unwrap(), 1).unwrap();
        let xq = hamiltonian_vector_field(&parse("q1").unwrap(), 1).unwrap();
        for z in [[0.0, 0.0], [3.0, -2.0]] {
            assert_eq!(xp.eval(&z).unwrap(), vec![1.0, 0.0]);
            assert_eq!(xq.eval(&z).unwrap(), vec![0.0, -1.0]);
        }
    }

    #[test]
    fn field_rejects_foreign_variables() {
        assert!(hamiltonian_vector_field(&parse("q1 + r").unwrap(), 1).is_err());
    }

    #[test]
    fn canonical_pair_and_self_bracket() {
        let one = poisson_bracket(&parse("q1").unwrap(), &parse("p1").unwrap(), 1);
        assert_eq!(one, Expr::Const(1.0));
        let h = parse("(p1^2 + q1^2)/2 + q1*p1^3").unwrap();
        let hh = poisson_bracket(&h, &h, 1);
        for z in [[0.3, 0.7], [-1.1, 0.4]] {
            assert_eq!(eval_at(&hh, 1, &z), 0.0);
        }
    }

    #[test]
    fn liouville_pairings() {
        assert_eq!(liouville_integrand(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(liouville_integrand(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(liouville_integrand(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn structure_invariants_hold() {
        for n in 1..=4 {
            assert!(SymplecticStructure::new(n).check_invariants());
        }
    }

    #[test]
    fn omega_matches_matrix() {
        let s = SymplecticStructure::new(2);
        let m = s.omega_matrix();
        let a = [0.3, -0.2, 1.1, 0.5];
        let b = [0.7, 0.9, -0.4, 0.2];
        let via_matrix = (nalgebra::DVector::from_row_slice(&a).transpose()
            * &m
            * nalgebra::DVector::from_row_slice(&b))[(0, 0)];
        assert!((via_matrix - s.omega(&a, &b)).abs() < 1e-15);
    }
}
