//! System definitions and the certificates of the integrability hypotheses:
//! independence, closure of brackets on the base, constant corank, Casimirs.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{CompiledExpr, Expr};
use crate::flow::{self, FlowConfig, Integrator};
use crate::report::{CheckRecord, ResidualReport};
use crate::symplectic::{
    hamiltonian_vector_field, jacobian, phase_variables, poisson_bracket, PhasePoint, SmoothFunction,
    VectorFieldHandle,
};

pub const ANCHOR_INDEPENDENCE: &str = "independence: dH_1 ^ ... ^ dH_k nowhere vanishes";
pub const ANCHOR_CLOSURE: &str = "bracket closure: {H_i, H_j} = s_ij(H)";
pub const ANCHOR_FIBER: &str = "bracket closure: s_ij constant on fibers of H";
pub const ANCHOR_CORANK: &str = "constant corank m = 2n - k of the structure matrix";
pub const ANCHOR_CASIMIR: &str = "Casimir pull-backs commute with every integral";
pub const ANCHOR_CONNECTED: &str = "fibers connected and mutually diffeomorphic (assumed)";

/// Numerical thresholds, overridable from spec files and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ToleranceConfig {
    pub rank: f64,
    pub abelian: f64,
    pub fiber: f64,
    pub corank: f64,
    pub casimir: f64,
    pub commute: f64,
    #[serde(rename = "return")]
    pub return_: f64,
    pub blocks: f64,
    pub eom_constant: f64,
    pub eom_slope: f64,
    pub roundtrip: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            rank: 1e-8,
            abelian: 1e-10,
            fiber: 1e-8,
            corank: 1e-8,
            casimir: 1e-8,
            commute: 1e-8,
            return_: 1e-9,
            blocks: 1e-5,
            eom_constant: 1e-6,
            eom_slope: 1e-4,
            roundtrip: 1e-7,
        }
    }
}

impl ToleranceConfig {
    pub const NAMES: [&'static str; 11] = [
        "rank",
        "abelian",
        "fiber",
        "corank",
        "casimir",
        "commute",
        "return",
        "blocks",
        "eom-constant",
        "eom-slope",
        "roundtrip",
    ];

    /// Sets a tolerance by name (`eom-slope` and `eom_slope` are equivalent).
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Invalid(format!("tolerance `{name}` must be positive")));
        }
        let slot = match name.replace('_', "-").as_str() {
            "rank" => &mut self.rank,
            "abelian" => &mut self.abelian,
            "fiber" => &mut self.fiber,
            "corank" => &mut self.corank,
            "casimir" => &mut self.casimir,
            "commute" => &mut self.commute,
            "return" => &mut self.return_,
            "blocks" => &mut self.blocks,
            "eom-constant" => &mut self.eom_constant,
            "eom-slope" => &mut self.eom_slope,
            "roundtrip" => &mut self.roundtrip,
            _ => return Err(Error::Invalid(format!("unknown tolerance `{name}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// Lie algebra by structure constants `[x_i, x_j] = c_ij^h x_h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LieAlgebraSpec {
    pub dim: usize,
    pub rank: usize,
    constants: Vec<f64>,
}

impl LieAlgebraSpec {
    /// Builds from entries `(i, j, h, c)` with 0-based indices; the
    /// antisymmetric partner `c_ji^h = -c` is filled in.
    pub fn new(dim: usize, rank: usize, entries: &[(usize, usize, usize, f64)]) -> Result<Self> {
        let mut constants = vec![0.0; dim * dim * dim];
        for &(i, j, h, c) in entries {
            if i >= dim || j >= dim || h >= dim {
                return Err(Error::Invalid(format!("structure constant index out of range for dim {dim}")));
            }
            if i == j && c != 0.0 {
                return Err(Error::Invalid("c_ii^h must vanish".into()));
            }
            let existing = constants[(i * dim + j) * dim + h];
            if existing != 0.0 && existing != c {
                return Err(Error::Invalid(format!(
                    "conflicting structure constants for ({}, {}, {})",
                    i + 1,
                    j + 1,
                    h + 1
                )));
            }
            constants[(i * dim + j) * dim + h] = c;
            constants[(j * dim + i) * dim + h] = -c;
        }
        if rank > dim {
            return Err(Error::Invalid("Lie algebra rank exceeds its dimension".into()));
        }
        let alg = LieAlgebraSpec { dim, rank, constants };
        let jac = alg.jacobi_defect();
        if jac != 0.0 {
            return Err(Error::Invalid(format!("structure constants violate the Jacobi identity (defect {jac})")));
        }
        Ok(alg)
    }

    pub fn c(&self, i: usize, j: usize, h: usize) -> f64 {
        self.constants[(i * self.dim + j) * self.dim + h]
    }

    /// Largest `|Σ_l c_ij^l c_lh^p + c_jh^l c_li^p + c_hi^l c_lj^p|`.
    pub fn jacobi_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                for h in 0..d {
                    for p in 0..d {
                        let s: f64 = (0..d)
                            .map(|l| {
                                self.c(i, j, l) * self.c(l, h, p)
                                    + self.c(j, h, l) * self.c(l, i, p)
                                    + self.c(h, i, l) * self.c(l, j, p)
                            })
                            .sum();
                        worst = worst.max(s.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Lie–Poisson bivector `w^{ij}(x) = c_ij^h x_h`.
pub fn lie_poisson_bivector(alg: &LieAlgebraSpec, x: &[f64]) -> DMatrix<f64> {
    let d = alg.dim;
    DMatrix::from_fn(d, d, |i, j| (0..d).map(|h| alg.c(i, j, h) * x[h]).sum())
}

/// Axis-aligned box in phase space used for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub count: usize,
}

impl SamplingBox {
    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Halton points with a seeded Cranley–Patterson shift.
    pub fn points(&self, count: usize, seed: u64) -> Vec<PhasePoint> {
        let d = self.lower.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        (1..=count)
            .map(|i| {
                let z = (0..d)
                    .map(|j| {
                        let u = (radical_inverse(i, PRIMES[j % PRIMES.len()]) + shift[j]).fract();
                        self.lower[j] + u * (self.upper[j] - self.lower[j])
                    })
                    .collect();
                PhasePoint::new(z).expect("box points are finite")
            })
            .collect()
    }
}

const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Box in the chart's base coordinates `(J_1..J_m, x^1..x^{k-m})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub grid: usize,
}

impl DomainBox {
    pub fn contains(&self, w: &[f64], slack: f64) -> bool {
        w.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| {
            let pad = slack * (hi - lo);
            *lo - pad <= *v && *v <= *hi + pad
        })
    }
}

/// A completely integrable system on R^{2n} with its metadata.
#[derive(Debug, Clone)]
pub struct SystemDef {
    pub name: String,
    pub n: usize,
    pub integral_names: Vec<String>,
    /// Integrals over the phase variables.
    pub integrals: Vec<Expr>,
    /// Casimirs over the integral names.
    pub casimirs: Option<Vec<Expr>>,
    /// Transverse base functions over the integral names.
    pub transverse: Option<Vec<Expr>>,
    pub lie_algebra: Option<LieAlgebraSpec>,
    /// Over integral names and phase variables.
    pub hamiltonian: Option<Expr>,
    pub reference: PhasePoint,
    pub sampling: SamplingBox,
    pub domain: Option<DomainBox>,
    pub tolerances: ToleranceConfig,
    pub flow: FlowConfig,
}

impl SystemDef {
    /// Minimal system with default names `H1..Hk` and a sampling box of
    /// half-width 1 around the reference.
    pub fn from_strs(name: &str, n: usize, integrals: &[&str], reference: &[f64]) -> Result<SystemDef> {
        let integrals = integrals.iter().map(|s| s.parse()).collect::<Result<Vec<Expr>, _>>()?;
        let integral_names = (1..=integrals.len()).map(|i| format!("H{i}")).collect();
        let sys = SystemDef {
            name: name.to_string(),
            n,
            integral_names,
            integrals,
            casimirs: None,
            transverse: None,
            lie_algebra: None,
            hamiltonian: None,
            reference: PhasePoint::new(reference.to_vec())?,
            sampling: SamplingBox {
                lower: reference.iter().map(|v| v - 1.0).collect(),
                upper: reference.iter().map(|v| v + 1.0).collect(),
                count: 64,
            },
            domain: None,
            tolerances: ToleranceConfig::default(),
            flow: FlowConfig::default(),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn k(&self) -> usize {
        self.integrals.len()
    }

    /// Dimension of the fibers, `2n - k`.
    pub fn m(&self) -> usize {
        2 * self.n - self.k()
    }

    pub fn phase_variables(&self) -> Vec<String> {
        phase_variables(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n, self.k());
        if n == 0 {
            return Err(Error::spec("n must be positive"));
        }
        if !(n <= k && k < 2 * n) {
            return Err(Error::spec(format!("k must satisfy n <= k < 2n (got n = {n}, k = {k})")));
        }
        if self.integral_names.len() != k {
            return Err(Error::spec("integral names and expressions differ in count"));
        }
        let phase = self.phase_variables();
        for (i, name) in self.integral_names.iter().enumerate() {
            if phase.contains(name) {
                return Err(Error::spec(format!("integral name `{name}` shadows a phase variable")));
            }
            if self.integral_names[..i].contains(name) {
                return Err(Error::spec(format!("duplicate integral name `{name}`")));
            }
        }
        for (name, e) in self.integral_names.iter().zip(&self.integrals) {
            if let Some(v) = e.free_vars().into_iter().find(|v| !phase.contains(v)) {
                return Err(Error::spec(format!("integral `{name}` uses unknown variable `{v}`")));
            }
        }
        let check_base = |what: &str, list: &Option<Vec<Expr>>| -> Result<()> {
            for e in list.iter().flatten() {
                if let Some(v) = e.free_vars().into_iter().find(|v| !self.integral_names.contains(v)) {
                    return Err(Error::spec(format!("{what} `{e}` uses unknown integral `{v}`")));
                }
            }
            Ok(())
        };
        check_base("casimir", &self.casimirs)?;
        check_base("transverse function", &self.transverse)?;
        if let Some(c) = &self.casimirs {
            if c.len() != self.m() {
                return Err(Error::spec(format!("expected {} Casimirs (2n - k), got {}", self.m(), c.len())));
            }
        }
        if let Some(t) = &self.transverse {
            if t.len() != k - self.m() {
                return Err(Error::spec(format!(
                    "expected {} transverse functions (k - m), got {}",
                    k - self.m(),
                    t.len()
                )));
            }
        }
        if let Some(alg) = &self.lie_algebra {
            if alg.dim != k {
                return Err(Error::spec(format!("Lie algebra dimension {} differs from k = {k}", alg.dim)));
            }
            if alg.rank != self.m() {
                return Err(Error::spec(format!("Lie algebra rank {} differs from m = {}", alg.rank, self.m())));
            }
        }
        if let Some(h) = &self.hamiltonian {
            if let Some(v) = h.free_vars().into_iter().find(|v| !phase.contains(v) && !self.integral_names.contains(v)) {
                return Err(Error::spec(format!("hamiltonian uses unknown variable `{v}`")));
            }
        }
        if self.reference.n() != n {
            return Err(Error::spec(format!("reference point must have {} coordinates", 2 * n)));
        }
        if self.sampling.lower.len() != 2 * n || self.sampling.upper.len() != 2 * n {
            return Err(Error::spec(format!("sampling bounds must have {} entries", 2 * n)));
        }
        if self.sampling.lower.iter().zip(&self.sampling.upper).any(|(l, u)| !(l < u)) {
            return Err(Error::spec("sampling box must have lower < upper"));
        }
        if self.sampling.count == 0 {
            return Err(Error::spec("sampling count must be positive"));
        }
        if !self.sampling.contains(&self.reference) {
            return Err(Error::spec("reference point lies outside the sampling box"));
        }
        if let Some(d) = &self.domain {
            if d.lower.len() != k || d.upper.len() != k {
                return Err(Error::spec(format!("domain bounds must have k = {k} entries (J then x)")));
            }
            if d.lower.iter().zip(&d.upper).any(|(l, u)| !(l < u)) {
                return Err(Error::spec("domain box must have lower < upper"));
            }
            if d.grid < 4 {
                return Err(Error::spec("domain grid needs at least 4 nodes per axis"));
            }
        }
        self.flow.validate()
    }

    pub fn integral_functions(&self) -> Result<Vec<SmoothFunction>> {
        self.integrals.iter().map(|e| SmoothFunction::new(e.clone(), self.n)).collect()
    }

    pub fn integral_fields(&self) -> Result<Vec<VectorFieldHandle>> {
        self.integrals.iter().map(|e| hamiltonian_vector_field(e, self.n)).collect()
    }

    /// Values `H(z)`.
    pub fn base_point(&self, z: &[f64]) -> Result<Vec<f64>> {
        let vars = self.phase_variables();
        self.integrals.iter().map(|e| Ok(e.compile(&vars)?.eval(z)?)).collect()
    }

    /// Substitutes the integral names by their expressions.
    pub fn pull_back(&self, e: &Expr) -> Expr {
        let map: HashMap<String, Expr> =
            self.integral_names.iter().cloned().zip(self.integrals.iter().cloned()).collect();
        e.substitute(&map)
    }

    /// The declared Casimirs, or the integrals themselves when `k = n` and no
    /// Casimirs are declared.
    pub fn casimir_set(&self) -> Result<CasimirSet> {
        match &self.casimirs {
            Some(c) => CasimirSet::new(self, c.clone()),
            None if self.k() == self.n => {
                CasimirSet::new(self, self.integral_names.iter().map(Expr::var).collect())
            }
            None => Err(Error::spec(format!(
                "system `{}` has k > n and declares no Casimirs",
                self.name
            ))),
        }
    }

    /// Hamiltonian pulled back to phase space; defaults to the first Casimir.
    pub fn hamiltonian_expr(&self) -> Result<Expr> {
        match &self.hamiltonian {
            Some(h) => Ok(self.pull_back(h)),
            None => Ok(self.casimir_set()?.pulled[0].clone()),
        }
    }

    /// Transverse base functions: the declared ones, or integrals selected by
    /// [`transverse_coordinates`].
    pub fn transverse_functions(&self, cas: &CasimirSet, seed: u64) -> Result<Vec<Expr>> {
        if let Some(t) = &self.transverse {
            return Ok(t.clone());
        }
        if self.k() == self.m() {
            return Ok(Vec::new());
        }
        let samples = regular_samples(self, seed)?;
        let base = samples.iter().map(|z| self.base_point(z)).collect::<Result<Vec<_>>>()?;
        let idx = transverse_coordinates(self, cas, &base)?;
        Ok(idx.into_iter().map(|i| Expr::var(self.integral_names[i].clone())).collect())
    }
}

/// Casimir functions on the base and their pull-backs to phase space.
#[derive(Debug, Clone)]
pub struct CasimirSet {
    pub base: Vec<Expr>,
    pub pulled: Vec<Expr>,
    base_gradients: Vec<Vec<CompiledExpr>>,
}

impl CasimirSet {
    pub fn new(sys: &SystemDef, base: Vec<Expr>) -> Result<CasimirSet> {
        for e in &base {
            if let Some(v) = e.free_vars().into_iter().find(|v| !sys.integral_names.contains(v)) {
                return Err(Error::Invalid(format!("Casimir `{e}` uses unknown integral `{v}`")));
            }
        }
        let pulled = base.iter().map(|e| sys.pull_back(e)).collect();
        let base_gradients = base
            .iter()
            .map(|e| {
                sys.integral_names
                    .iter()
                    .map(|v| e.differentiate(v).compile(&sys.integral_names))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CasimirSet { base, pulled, base_gradients })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// `∂C_λ/∂x_i` at a base point.
    pub fn base_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.len(), x.len());
        for (l, row) in self.base_gradients.iter().enumerate() {
            for (i, g) in row.iter().enumerate() {
                j[(l, i)] = g.eval(x)?;
            }
        }
        Ok(j)
    }

    pub fn fields(&self, n: usize) -> Result<Vec<VectorFieldHandle>> {
        self.pulled.iter().map(|e| hamiltonian_vector_field(e, n)).collect()
    }

    pub fn functions(&self, n: usize) -> Result<Vec<SmoothFunction>> {
        self.pulled.iter().map(|e| SmoothFunction::new(e.clone(), n)).collect()
    }
}

/// Pairwise brackets `{H_i, H_j}` as expressions.
#[derive(Debug, Clone)]
pub struct StructureMatrixField {
    pub k: usize,
    pub entries: Vec<Expr>,
    compiled: Vec<CompiledExpr>,
    pub abelian: bool,
    pub tolerance: f64,
}

impl StructureMatrixField {
    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        &self.entries[i * self.k + j]
    }

    pub fn eval(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let k = self.k;
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] = self.compiled[i * k + j].eval(z)?;
            }
        }
        Ok(m)
    }
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Smallest singular value of a matrix (0 for empty shapes).
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Seeded low-discrepancy samples from the system's box.
pub fn sample_points(sys: &SystemDef, seed: u64) -> Vec<PhasePoint> {
    sys.sampling.points(sys.sampling.count, seed)
}

/// Samples at which the integrals are independent (the regular set).
pub fn regular_samples(sys: &SystemDef, seed: u64) -> Result<Vec<PhasePoint>> {
    let funcs = sys.integral_functions()?;
    Ok(sample_points(sys, seed)
        .into_iter()
        .filter(|z| match jacobian(&funcs, z) {
            Ok(j) => min_singular_value(&j) > sys.tolerances.rank,
            Err(_) => false,
        })
        .collect())
}

pub fn independence_check(sys: &SystemDef, samples: &[PhasePoint]) -> Result<CheckRecord> {
    if samples.is_empty() {
        return Err(Error::Invalid("independence check needs at least one sample".into()));
    }
    let funcs = sys.integral_functions()?;
    let mut worst = f64::INFINITY;
    let mut worst_point = Vec::new();
    let mut errors = Vec::new();
    for z in samples {
        match jacobian(&funcs, z) {
            Ok(j) => {
                let s = min_singular_value(&j);
                if s < worst {
                    worst = s;
                    worst_point = z.to_vec();
                }
            }
            Err(e) => errors.push(format!("{:?}: {e}", z.to_vec())),
        }
    }
    let tol = sys.tolerances.rank;
    let passed = errors.is_empty() && worst > tol;
    Ok(CheckRecord::new("independence", ANCHOR_INDEPENDENCE, passed, worst, tol, samples.len())
        .with("worst_point", worst_point)
        .with("domain_errors", errors))
}

/// Symbolic bracket matrix; Abelian iff every entry vanishes on the samples.
pub fn structure_matrix(sys: &SystemDef, samples: &[PhasePoint]) -> Result<StructureMatrixField> {
    let k = sys.k();
    let vars = sys.phase_variables();
    let mut entries = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            entries.push(if i == j {
                Expr::Const(0.0)
            } else {
                poisson_bracket(&sys.integrals[i], &sys.integrals[j], sys.n)
            });
        }
    }
    let compiled = entries.iter().map(|e| e.compile(&vars)).collect::<Result<Vec<_>>>()?;
    let mut smat = StructureMatrixField { k, entries, compiled, abelian: true, tolerance: sys.tolerances.corank };
    for z in samples {
        if let Ok(m) = smat.eval(z) {
            if m.amax() > sys.tolerances.abelian {
                smat.abelian = false;
                break;
            }
        }
    }
    Ok(smat)
}

/// Vector field `P_ker(dH(z)) w`: moves along the fiber of `H` through `z`.
fn kernel_direction(funcs: &[SmoothFunction], z: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
    let j = jacobian(funcs, z)?;
    let jjt = &j * j.transpose();
    let wv = DVector::from_row_slice(w);
    let rhs = &j * &wv;
    let coef = jjt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("integral Jacobian lost rank along the fiber".into()))?;
    let proj = wv - j.transpose() * coef;
    out.copy_from_slice(proj.as_slice());
    Ok(())
}

/// Transports the reference along random fiber directions and compares the
/// bracket matrix with its value at the reference.
pub fn fiber_constancy_check(
    smat: &StructureMatrixField,
    sys: &SystemDef,
    n_points: usize,
    seed: u64,
) -> Result<CheckRecord> {
    let z0 = &sys.reference;
    let s0 = smat.eval(z0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sys.m();
    let casimir_fields = if sys.casimirs.is_some() || smat.abelian {
        Some(sys.casimir_set()?.fields(sys.n)?)
    } else {
        None
    };
    let funcs = sys.integral_functions()?;
    let mut worst: f64 = 0.0;
    let mut drift: f64 = 0.0;
    let h0 = sys.base_point(z0)?;
    for _ in 0..n_points {
        let z = match &casimir_fields {
            Some(fields) => {
                let s: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
                flow::flow_map(fields, &s, z0, &sys.flow)?
            }
            None => {
                let w: Vec<f64> = (0..2 * sys.n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let f = |y: &[f64], o: &mut [f64]| {
                    kernel_direction(&funcs, y, &w, o).map_err(|_| crate::expr::EvalError::Domain("rank loss"))
                };
                let mut integ = Integrator::new(f, 0.0, z0, sys.flow)?;
                integ.advance_to(1.0)?;
                integ.state().to_vec()
            }
        };
        let h = sys.base_point(&z)?;
        drift = drift.max(flow::distance(&h, &h0));
        worst = worst.max((smat.eval(&z)? - &s0).amax());
    }
    let tol = sys.tolerances.fiber;
    Ok(CheckRecord::new("fiber_constancy", ANCHOR_FIBER, worst < tol, worst, tol, n_points)
        .with("fiber_drift", drift)
        .with("transport", if casimir_fields.is_some() { "casimir flows" } else { "fiber projection" }))
}

/// Corank of the bracket matrix at each sample; passes iff always `2n - k`.
pub fn corank_check(
    smat: &StructureMatrixField,
    sys: &SystemDef,
    samples: &[PhasePoint],
) -> Result<(usize, CheckRecord)> {
    if samples.is_empty() {
        return Err(Error::Invalid("corank check needs at least one sample".into()));
    }
    let expected = sys.m();
    let tol = smat.tolerance;
    let mut coranks = Vec::with_capacity(samples.len());
    let mut margin = f64::INFINITY;
    for z in samples {
        let sv = singular_values(&smat.eval(z)?);
        let smax = sv.first().copied().unwrap_or(0.0);
        let corank = if smax == 0.0 { sv.len() } else { sv.iter().filter(|s| **s < tol * smax).count() };
        // relative gap between the last kept and first dropped singular values
        if smax > 0.0 && corank < sv.len() {
            margin = margin.min(sv[sv.len() - corank - 1] / smax);
        }
        coranks.push(corank);
    }
    let passed = coranks.iter().all(|c| *c == expected);
    let mut distinct = coranks.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let observed = if passed { expected } else { *coranks.iter().find(|c| **c != expected).unwrap() };
    let value = coranks.iter().map(|c| c.abs_diff(expected)).max().unwrap_or(0) as f64;
    Ok((
        observed,
        CheckRecord::new("corank", ANCHOR_CORANK, passed, value, 0.5, samples.len())
            .with("expected", expected)
            .with("observed", distinct)
            .with("relative_tolerance", tol)
            .with("min_relative_gap", if margin.is_finite() { margin } else { 1.0 }),
    ))
}

/// Checks `{C_λ∘H, H_i} = 0` and the rank of `∂C/∂x` on base samples.
pub fn casimir_verify(sys: &SystemDef, cas: &CasimirSet, samples: &[PhasePoint]) -> Result<CheckRecord> {
    if cas.len() != sys.m() {
        return Err(Error::Invalid(format!("expected {} Casimirs (2n - k), got {}", sys.m(), cas.len())));
    }
    let vars = sys.phase_variables();
    let brackets = cas
        .pulled
        .iter()
        .flat_map(|c| sys.integrals.iter().map(move |h| poisson_bracket(c, h, sys.n)))
        .map(|e| e.compile(&vars))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    let mut worst_pair = (0, 0);
    let mut min_rank_sv = f64::INFINITY;
    for z in samples {
        for (idx, b) in brackets.iter().enumerate() {
            let v = b.eval(z)?.abs();
            if v > worst {
                worst = v;
                worst_pair = (idx / sys.k() + 1, idx % sys.k() + 1);
            }
        }
        let x = sys.base_point(z)?;
        min_rank_sv = min_rank_sv.min(min_singular_value(&cas.base_jacobian(&x)?));
    }
    let tol = sys.tolerances.casimir;
    let independent = min_rank_sv > sys.tolerances.rank;
    let mut rec = CheckRecord::new("casimir", ANCHOR_CASIMIR, worst < tol && independent, worst, tol, samples.len())
        .with("min_jacobian_singular_value", min_rank_sv)
        .with("independent", independent);
    if worst >= tol {
        rec = rec.with("worst_bracket", format!("{{C{}, H{}}}", worst_pair.0, worst_pair.1));
    }
    Ok(rec)
}

/// Greedy choice of `k - m` integrals completing `dC` to full rank `k` on
/// the base samples; returns sorted indices.
pub fn transverse_coordinates(sys: &SystemDef, cas: &CasimirSet, base_samples: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k = sys.k();
    let need = k - cas.len();
    if base_samples.is_empty() {
        return Err(Error::Invalid("transverse selection needs base samples".into()));
    }
    let dcs = base_samples.iter().map(|x| cas.base_jacobian(x)).collect::<Result<Vec<_>>>()?;
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..need {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..k).filter(|c| !chosen.contains(c)) {
            let mut trial = chosen.clone();
            trial.push(cand);
            let score = dcs
                .iter()
                .map(|dc| {
                    let rows = dc.nrows() + trial.len();
                    let mut m = DMatrix::zeros(rows, k);
                    m.rows_mut(0, dc.nrows()).copy_from(dc);
                    for (r, &i) in trial.iter().enumerate() {
                        m[(dc.nrows() + r, i)] = 1.0;
                    }
                    min_singular_value(&m)
                })
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((cand, score));
            }
        }
        match best {
            Some((c, s)) if s > sys.tolerances.rank => chosen.push(c),
            _ => {
                return Err(Error::Invalid(
                    "no subset of integrals completes the Casimirs to base coordinates on every sample; shrink the domain"
                        .into(),
                ))
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Every structure-module certificate for a system.
pub fn certify(sys: &SystemDef, seed: u64) -> Result<ResidualReport> {
    let mut report = ResidualReport::new();
    report.assume(ANCHOR_CONNECTED);
    let samples = sample_points(sys, seed);
    let indep = independence_check(sys, &samples)?;
    let regular = regular_samples(sys, seed)?;
    report.note("regular_samples", regular.len());
    report.note("samples", samples.len());
    // the reference always participates; independence is required there
    let mut regular_with_ref = regular.clone();
    regular_with_ref.push(sys.reference.clone());
    let ref_indep = independence_check(sys, std::slice::from_ref(&sys.reference))?;
    let mut ref_rec = ref_indep;
    ref_rec.name = "independence_at_reference".into();
    report.push(ref_rec);
    report.note("independent_everywhere_sampled", indep.passed);
    let smat = structure_matrix(sys, &regular_with_ref)?;
    report.note("abelian", smat.abelian);
    report.note("n", sys.n);
    report.note("k", sys.k());
    report.note("m", sys.m());
    report.push(
        CheckRecord::new("structure_matrix", ANCHOR_CLOSURE, true, 0.0, sys.tolerances.abelian, regular_with_ref.len())
            .with("abelian", smat.abelian)
            .with("entries", smat.entries.iter().map(|e| e.to_string()).collect::<Vec<_>>()),
    );
    report.push(fiber_constancy_check(&smat, sys, 16, seed)?);
    let (m, cor) = corank_check(&smat, sys, &regular_with_ref)?;
    report.note("corank", m);
    report.push(cor);
    let cas = sys.casimir_set()?;
    report.push(casimir_verify(sys, &cas, &regular_with_ref)?);
    let transverse = sys.transverse_functions(&cas, seed)?;
    report.note("transverse", transverse.iter().map(|e| e.to_string()).collect::<Vec<_>>());
    if let Some(alg) = &sys.lie_algebra {
        report.push(lie_poisson_consistency(sys, alg, &smat, &regular_with_ref)?);
    }
    // commuting Casimir flows at the reference
    let fields = cas.fields(sys.n)?;
    let mut worst: f64 = 0.0;
    for a in 0..fields.len() {
        for b in a + 1..fields.len() {
            worst = worst.max(flow::commutation_residual(&fields[a], &fields[b], &sys.reference, 1.0, 1.0, &sys.flow)?);
        }
    }
    report.push(CheckRecord::new(
        "commutation",
        "Casimir flows commute",
        worst < sys.tolerances.commute,
        worst,
        sys.tolerances.commute,
        1,
    ));
    if !indep.passed {
        report.note("singular_samples_excluded", samples.len() - regular.len());
    }
    Ok(report)
}

/// `{H_i, H_j}(z) = c_ij^h H_h(z)`, the coinduced bracket being Lie–Poisson.
pub fn lie_poisson_consistency(
    sys: &SystemDef,
    alg: &LieAlgebraSpec,
    smat: &StructureMatrixField,
    samples: &[PhasePoint],
) -> Result<CheckRecord> {
    let mut worst: f64 = 0.0;
    let mut rank_ok = true;
    for z in samples {
        let x = sys.base_point(z)?;
        let w = lie_poisson_bivector(alg, &x);
        worst = worst.max((smat.eval(z)? - &w).amax());
        let sv = singular_values(&w);
        let smax = sv.first().copied().unwrap_or(0.0);
        let rank = sv.iter().filter(|s| **s > sys.tolerances.corank * smax.max(f64::MIN_POSITIVE)).count();
        rank_ok &= rank == sys.k() - sys.m();
    }
    let tol = 1e-10;
    Ok(CheckRecord::new("lie_poisson", ANCHOR_CLOSURE, worst < tol && rank_ok, worst, tol, samples.len())
        .with("bivector_rank_ok", rank_ok))
}
