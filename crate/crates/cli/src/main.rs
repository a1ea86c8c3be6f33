use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aacord::chart::{build_system_chart, ChartOptions};
use aacord::pipeline;
use aacord::report::{render, ResidualReport};
use aacord::spec::{catalog_names, catalog_source, resolve};
use aacord::structure::{self, certify, SystemDef};
use aacord::symplectic::PhasePoint;
use aacord::Error;
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "aacord", version, about = "Generalized action-angle coordinates for integrable systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the integrability hypotheses of a system.
    Validate(Common),
    /// Detect the period lattice of the fiber through a point.
    Topology(Common),
    /// Build a chart and write its metadata and action table.
    Chart(Common),
    /// Check the canonical form and the equations of motion in the chart.
    Verify(Common),
    /// Integrate a Hamiltonian and print the trajectory in both coordinate systems.
    Trace(Common),
    /// List the built-in systems, or print one of them.
    Catalog {
        name: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Spec file path or catalog name.
    system: String,
    /// Phase point `q1,..,qn,p1,..,pn` (defaults to the reference point).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Hamiltonian over phase variables and integral names.
    #[arg(long)]
    hamiltonian: Option<String>,
    #[arg(long = "t-max")]
    t_max: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Directory receiving the artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tol: TolFlags,
}

#[derive(Args, Default)]
struct TolFlags {
    #[arg(long = "tol-rank")]
    rank: Option<f64>,
    #[arg(long = "tol-abelian")]
    abelian: Option<f64>,
    #[arg(long = "tol-fiber")]
    fiber: Option<f64>,
    #[arg(long = "tol-corank")]
    corank: Option<f64>,
    #[arg(long = "tol-casimir")]
    casimir: Option<f64>,
    #[arg(long = "tol-commute")]
    commute: Option<f64>,
    #[arg(long = "tol-return")]
    return_: Option<f64>,
    #[arg(long = "tol-blocks")]
    blocks: Option<f64>,
    #[arg(long = "tol-eom-constant")]
    eom_constant: Option<f64>,
    #[arg(long = "tol-eom-slope")]
    eom_slope: Option<f64>,
    #[arg(long = "tol-roundtrip")]
    roundtrip: Option<f64>,
}

impl TolFlags {
    fn pairs(&self) -> [(&'static str, Option<f64>); 11] {
        [
            ("rank", self.rank),
            ("abelian", self.abelian),
            ("fiber", self.fiber),
            ("corank", self.corank),
            ("casimir", self.casimir),
            ("commute", self.commute),
            ("return", self.return_),
            ("blocks", self.blocks),
            ("eom-constant", self.eom_constant),
            ("eom-slope", self.eom_slope),
            ("roundtrip", self.roundtrip),
        ]
    }
}

/// Hypothesis named in error messages for each failure kind.
fn anchor_of(err: &Error) -> &'static str {
    match err {
        Error::Escape { .. } | Error::StepLimit { .. } => pipeline::ANCHOR_COMPLETE,
        Error::NotCommuting { .. } => "Casimir flows commute",
        Error::Spec { .. } | Error::Parse(_) | Error::UnboundVariable(_) => "system definition",
        Error::Chart(_) | Error::Newton(_) | Error::Singular(_) => aacord::chart::ANCHOR_ROUNDTRIP,
        Error::Eval(_) => structure::ANCHOR_INDEPENDENCE,
        Error::Invalid(_) | Error::Io(_) => "input",
    }
}

struct Context_ {
    sys: SystemDef,
    seed: u64,
    point: PhasePoint,
}

fn load(common: &Common) -> anyhow::Result<Context_> {
    let mut sys = resolve(&common.system)?;
    for (name, value) in common.tol.pairs() {
        if let Some(v) = value {
            sys.tolerances.set(name, v)?;
        }
    }
    let point = match &common.point {
        Some(p) => {
            let z = PhasePoint::new(p.clone())?;
            if z.len() != 2 * sys.n {
                return Err(anyhow!("--point needs {} comma-separated values", 2 * sys.n));
            }
            z
        }
        None => sys.reference.clone(),
    };
    Ok(Context_ { sys, seed: common.seed, point })
}

fn header(ctx: &Context_, common: &Common) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("system".into(), json!(ctx.sys.name));
    m.insert("seed".into(), json!(ctx.seed));
    m.insert("point".into(), json!(ctx.point.to_vec()));
    m.insert("tolerances".into(), serde_json::to_value(ctx.sys.tolerances).unwrap_or(Value::Null));
    m.insert("source".into(), json!(common.system));
    m
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact")));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn emit(common: &Common, file: &str, text: &str) -> anyhow::Result<()> {
    match &common.out {
        Some(dir) => write_atomic(&dir.join(file), text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_report(common: &Common, command: &str, report: &ResidualReport, extra: BTreeMap<String, Value>) -> anyhow::Result<bool> {
    let doc = report.to_json(command, extra);
    emit(common, &format!("{command}.json"), &render(&doc))?;
    for f in report.failures() {
        eprintln!("FAILED {}", f.failure_message());
    }
    Ok(report.passed())
}

fn csv(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let common = match &cli.command {
        Command::Catalog { name } => {
            match name {
                None => {
                    for n in catalog_names() {
                        println!("{n}");
                    }
                }
                Some(n) => {
                    let src = catalog_source(n).ok_or_else(|| anyhow!("unknown catalog system `{n}`"))?;
                    print!("{src}");
                }
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Validate(c) | Command::Topology(c) | Command::Chart(c) | Command::Verify(c) | Command::Trace(c) => c,
    };
    let ctx = load(common)?;
    let mut extra = header(&ctx, common);
    let passed = match &cli.command {
        Command::Validate(_) => {
            let report = certify(&ctx.sys, ctx.seed)?;
            emit_report(common, "validate", &report, extra)?
        }
        Command::Topology(_) => {
            let (lat, report) = pipeline::topology(&ctx.sys, &ctx.point, ctx.seed)?;
            extra.insert("lattice".into(), serde_json::to_value(&lat)?);
            emit_report(common, "topology", &report, extra)?
        }
        Command::Chart(_) => {
            let chart = build_system_chart(&ctx.sys, ctx.seed, &ChartOptions::default())?;
            extra.insert("chart".into(), chart.metadata());
            let passed = emit_report(common, "chart", &chart.provenance, extra)?;
            let m = chart.m();
            let r = chart.r();
            let mut head: Vec<String> = (1..=m).map(|i| format!("J{i}")).collect();
            head.extend((1..=m).map(|i| format!("I{i}")));
            for i in 1..=r {
                head.extend((1..=m).map(|l| format!("u{i}_{l}")));
            }
            let table = csv(&head, &chart.table_rows());
            match &common.out {
                Some(dir) => write_atomic(&dir.join("table.csv"), table.as_bytes())?,
                None => eprint!("{table}"),
            }
            passed
        }
        Command::Verify(_) => {
            let h = common.hamiltonian.as_deref().map(|t| pipeline::parse_hamiltonian(&ctx.sys, t)).transpose()?;
            let (_, report) = pipeline::verify(&ctx.sys, ctx.seed, h.as_ref(), common.t_max.unwrap_or(20.0), 16)?;
            emit_report(common, "verify", &report, extra)?
        }
        Command::Trace(_) => {
            let h = match common.hamiltonian.as_deref() {
                Some(t) => pipeline::parse_hamiltonian(&ctx.sys, t)?,
                None => ctx.sys.hamiltonian_expr()?,
            };
            let chart = build_system_chart(&ctx.sys, ctx.seed, &ChartOptions::default())?;
            let rows = pipeline::trace(&chart, &h, &ctx.point, common.t_max.unwrap_or(10.0), common.dt.unwrap_or(0.1))?;
            emit(common, "trace.csv", &csv(&pipeline::trace_header(&chart), &rows))?;
            true
        }
        Command::Catalog { .. } => unreachable!(),
    };
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(err) => eprintln!("error [{}]: {err}", anchor_of(err)),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(2)
        }
    }
}
