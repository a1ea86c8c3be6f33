//! System specification files (TOML) and the built-in catalog.

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::flow::FlowConfig;
use crate::structure::{DomainBox, LieAlgebraSpec, SamplingBox, SystemDef, ToleranceConfig};
use crate::symplectic::{phase_variables, PhasePoint};

/// Default number of table nodes per Casimir axis.
pub const DEFAULT_GRID: usize = 17;
/// Default number of sample points for structure checks.
pub const DEFAULT_SAMPLES: usize = 64;

const CATALOG: [(&str, &str); 6] = [
    ("harmonic1d", include_str!("../catalog/harmonic1d.toml")),
    ("free1d", include_str!("../catalog/free1d.toml")),
    ("oscillator2d", include_str!("../catalog/oscillator2d.toml")),
    ("pendulum-libration", include_str!("../catalog/pendulum-libration.toml")),
    ("e2-noncommutative", include_str!("../catalog/e2-noncommutative.toml")),
    ("so3-momentum", include_str!("../catalog/so3-momentum.toml")),
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    system: RawSystem,
    integrals: IndexMap<String, Spanned<String>>,
    #[serde(default)]
    casimirs: Option<IndexMap<String, Spanned<String>>>,
    #[serde(default)]
    transverse: Option<IndexMap<String, Spanned<String>>>,
    #[serde(default)]
    lie_algebra: Option<Spanned<RawAlgebra>>,
    reference: Spanned<RawReference>,
    #[serde(default)]
    sampling: Option<Spanned<SamplingRaw>>,
    #[serde(default)]
    domain: Option<Spanned<DomainRaw>>,
    #[serde(default)]
    tolerances: Option<Spanned<ToleranceConfig>>,
    #[serde(default)]
    flow: Option<Spanned<FlowRaw>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: Spanned<String>,
    n: Spanned<usize>,
    #[serde(default)]
    integrals: Option<Spanned<Vec<String>>>,
    #[serde(default)]
    hamiltonian: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgebra {
    dim: usize,
    rank: usize,
    constants: Vec<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    point: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingRaw {
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(default)]
    count: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainRaw {
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(default)]
    grid: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRaw {
    rtol: Option<f64>,
    atol: Option<f64>,
    max_steps: Option<usize>,
    escape_radius: Option<f64>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

fn at<T>(src: &str, item: &Spanned<T>, message: impl Into<String>) -> Error {
    Error::Spec { line: Some(line_of(src, item.span().start)), message: message.into() }
}

fn parse_expr(src: &str, item: &Spanned<String>, what: &str, allowed: &BTreeSet<String>) -> Result<Expr> {
    let e: Expr = item
        .get_ref()
        .parse()
        .map_err(|err| at(src, item, format!("{what}: {err}")))?;
    if let Some(v) = e.free_vars().into_iter().find(|v| !allowed.contains(v)) {
        return Err(at(src, item, format!("{what} uses unknown identifier `{v}`")));
    }
    Ok(e)
}

fn algebra_entries(src: &str, raw: &Spanned<RawAlgebra>) -> Result<Vec<(usize, usize, usize, f64)>> {
    let alg = raw.get_ref();
    let num = |v: &toml::Value| -> Option<f64> { v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) };
    let flat: Vec<f64> = if alg.constants.iter().all(|v| v.is_array()) {
        let mut out = Vec::new();
        for v in &alg.constants {
            let row = v.as_array().unwrap();
            if row.len() != 4 {
                return Err(at(src, raw, "each structure constant must be [i, j, h, value]"));
            }
            for x in row {
                out.push(num(x).ok_or_else(|| at(src, raw, "structure constants must be numbers"))?);
            }
        }
        out
    } else {
        alg.constants
            .iter()
            .map(|x| num(x).ok_or_else(|| at(src, raw, "structure constants must be numbers")))
            .collect::<Result<_>>()?
    };
    if flat.len() % 4 != 0 {
        return Err(at(src, raw, "flat structure constants must come in groups of four (i, j, h, value)"));
    }
    flat.chunks(4)
        .map(|c| {
            let idx = |x: f64| -> Result<usize> {
                if x.fract() != 0.0 || x < 1.0 || x > alg.dim as f64 {
                    return Err(at(src, raw, format!("structure constant index {x} outside 1..={}", alg.dim)));
                }
                Ok(x as usize - 1)
            };
            Ok((idx(c[0])?, idx(c[1])?, idx(c[2])?, c[3]))
        })
        .collect()
}

/// Parses and validates a system specification.
pub fn load_spec_str(src: &str) -> Result<SystemDef> {
    let raw: RawSpec = toml::from_str(src).map_err(|e| Error::Spec {
        line: e.span().map(|s| line_of(src, s.start)),
        message: e.message().to_string(),
    })?;
    let sys_raw = &raw.system;
    let n = *sys_raw.n.get_ref();
    if n == 0 {
        return Err(at(src, &sys_raw.n, "n must be positive"));
    }
    let phase: BTreeSet<String> = phase_variables(n).into_iter().collect();

    let names: Vec<String> = match &sys_raw.integrals {
        Some(order) => {
            let listed: BTreeSet<&String> = order.get_ref().iter().collect();
            let defined: BTreeSet<&String> = raw.integrals.keys().collect();
            if listed != defined || listed.len() != order.get_ref().len() {
                return Err(at(src, order, "[system] integrals must list each [integrals] entry exactly once"));
            }
            order.get_ref().clone()
        }
        None => raw.integrals.keys().cloned().collect(),
    };
    let k = names.len();
    if !(n <= k && k < 2 * n) {
        return Err(at(src, &sys_raw.n, format!("k must satisfy n <= k < 2n (got n = {n}, k = {k})")));
    }
    let mut integrals = Vec::with_capacity(k);
    for name in &names {
        let item = &raw.integrals[name];
        if phase.contains(name) {
            return Err(at(src, item, format!("integral name `{name}` shadows a phase variable")));
        }
        integrals.push(parse_expr(src, item, &format!("integral `{name}`"), &phase)?);
    }
    let name_set: BTreeSet<String> = names.iter().cloned().collect();
    let base_list = |table: &Option<IndexMap<String, Spanned<String>>>, what: &str| -> Result<Option<Vec<Expr>>> {
        table
            .as_ref()
            .map(|t| t.iter().map(|(key, item)| parse_expr(src, item, &format!("{what} `{key}`"), &name_set)).collect())
            .transpose()
    };
    let casimirs = base_list(&raw.casimirs, "casimir")?;
    let transverse = base_list(&raw.transverse, "transverse function")?;
    let hamiltonian = match &sys_raw.hamiltonian {
        Some(h) => {
            let allowed: BTreeSet<String> = phase.union(&name_set).cloned().collect();
            Some(parse_expr(src, h, "hamiltonian", &allowed)?)
        }
        None => None,
    };
    let lie_algebra = match &raw.lie_algebra {
        Some(a) => {
            let entries = algebra_entries(src, a)?;
            let alg = a.get_ref();
            Some(LieAlgebraSpec::new(alg.dim, alg.rank, &entries).map_err(|e| at(src, a, e.to_string()))?)
        }
        None => None,
    };
    let reference = PhasePoint::new(raw.reference.get_ref().point.clone()).map_err(|e| at(src, &raw.reference, e.to_string()))?;
    if reference.len() != 2 * n {
        return Err(at(src, &raw.reference, format!("reference point must have {} coordinates", 2 * n)));
    }
    let sampling = match &raw.sampling {
        Some(s) => {
            let v = s.get_ref();
            SamplingBox { lower: v.lower.clone(), upper: v.upper.clone(), count: v.count.unwrap_or(DEFAULT_SAMPLES) }
        }
        None => SamplingBox {
            lower: reference.iter().map(|v| v - 1.0).collect(),
            upper: reference.iter().map(|v| v + 1.0).collect(),
            count: DEFAULT_SAMPLES,
        },
    };
    let domain = raw.domain.as_ref().map(|d| {
        let v = d.get_ref();
        DomainBox { lower: v.lower.clone(), upper: v.upper.clone(), grid: v.grid.unwrap_or(DEFAULT_GRID) }
    });
    let mut flow = FlowConfig::default();
    if let Some(f) = &raw.flow {
        let v = f.get_ref();
        flow.rtol = v.rtol.unwrap_or(flow.rtol);
        flow.atol = v.atol.unwrap_or(flow.atol);
        flow.max_steps = v.max_steps.unwrap_or(flow.max_steps);
        flow.escape_radius = v.escape_radius.unwrap_or(flow.escape_radius);
    }
    let tolerances = raw.tolerances.as_ref().map(|t| *t.get_ref()).unwrap_or_default();
    let sys = SystemDef {
        name: sys_raw.name.get_ref().clone(),
        n,
        integral_names: names,
        integrals,
        casimirs,
        transverse,
        lie_algebra,
        hamiltonian,
        reference,
        sampling,
        domain,
        tolerances,
        flow,
    };
    sys.validate()?;
    Ok(sys)
}

/// Reads and validates a specification file.
pub fn load_spec(path: impl AsRef<Path>) -> Result<SystemDef> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    load_spec_str(&src)
}

pub fn catalog_names() -> Vec<&'static str> {
    CATALOG.iter().map(|(n, _)| *n).collect()
}

/// Source text of a built-in system.
pub fn catalog_source(name: &str) -> Option<&'static str> {
    CATALOG.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load_catalog(name: &str) -> Result<SystemDef> {
    let src = catalog_source(name).ok_or_else(|| {
        Error::Invalid(format!("unknown catalog system `{name}` (available: {})", catalog_names().join(", ")))
    })?;
    load_spec_str(src)
}

/// A path to a spec file, or else a catalog name.
pub fn resolve(arg: &str) -> Result<SystemDef> {
    if Path::new(arg).is_file() {
        load_spec(arg)
    } else if catalog_source(arg).is_some() {
        load_catalog(arg)
    } else {
        Err(Error::Invalid(format!(
            "`{arg}` is neither a readable spec file nor a catalog system ({})",
            catalog_names().join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_catalog_entry_loads() {
        for name in catalog_names() {
            let sys = load_catalog(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(sys.name, name);
            assert!(sys.domain.is_some());
        }
    }

    #[test]
    fn harmonic_entry() {
        let sys = load_catalog("harmonic1d").unwrap();
        assert_eq!((sys.n, sys.k()), (1, 1));
        let h = sys.integrals[0].compile(&["q1", "p1"]).unwrap();
        assert!((h.eval(&[0.3, 0.4]).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn k_equal_2n_rejected() {
        let src = "[system]\nname = \"x\"\nn = 1\n[integrals]\nA = \"q1\"\nB = \"p1\"\n[reference]\npoint = [0.0, 1.0]\n";
        let err = load_spec_str(src).unwrap_err().to_string();
        assert!(err.contains("k must satisfy n <= k < 2n"), "{err}");
    }

    #[test]
    fn unknown_identifier_named_with_line() {
        let src = "[system]\nname = \"x\"\nn = 1\n[integrals]\nH = \"p1^2 + w\"\n[reference]\npoint = [0.0, 1.0]\n";
        match load_spec_str(src).unwrap_err() {
            Error::Spec { line, message } => {
                assert_eq!(line, Some(5));
                assert!(message.contains("`w`"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let src = "[system]\nname = \"x\"\nn = 1\n[integrals]\nH = \"p1^2 +\"\n[reference]\npoint = [0.0, 1.0]\n";
        assert!(matches!(load_spec_str(src), Err(Error::Spec { line: Some(5), .. })));
        let src = "[system]\nname = \"x\"\nn = 1\n[integrals\n";
        assert!(matches!(load_spec_str(src), Err(Error::Spec { line: Some(4), .. })));
    }

    #[test]
    fn flat_structure_constants_accepted() {
        let src = catalog_source("e2-noncommutative")
            .unwrap()
            .replace("[[1, 3, 2, -1.0], [2, 3, 1, 1.0]]", "[1, 3, 2, -1.0, 2, 3, 1, 1.0]");
        let sys = load_spec_str(&src).unwrap();
        let alg = sys.lie_algebra.unwrap();
        assert_eq!(alg.c(0, 2, 1), -1.0);
        assert_eq!(alg.c(2, 1, 0), -1.0);
    }

    #[test]
    fn table_order_is_kept() {
        let sys = load_catalog("so3-momentum").unwrap();
        let t: Vec<String> = sys.transverse.unwrap().iter().map(|e| e.to_string()).collect();
        assert!(t[0].starts_with("atan2"), "{t:?}");
        assert_eq!(sys.casimirs.unwrap()[0].to_string(), "H");
    }

    #[test]
    fn tolerance_overrides_apply() {
        let src = format!("{}\n[tolerances]\nblocks = 1e-3\neom-slope = 2e-4\n", catalog_source("free1d").unwrap());
        let sys = load_spec_str(&src).unwrap();
        assert_eq!(sys.tolerances.blocks, 1e-3);
        assert_eq!(sys.tolerances.eom_slope, 2e-4);
        assert_eq!(sys.tolerances.rank, ToleranceConfig::default().rank);
    }
}
