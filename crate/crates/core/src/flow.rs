//! Flows of Hamiltonian vector fields: the R^m action, commutation residuals
//! and completeness probes.
//!
//! Integration uses the Dormand–Prince 5(4) pair with local extrapolation and
//! its free fourth-order continuous extension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::EvalError;
use crate::symplectic::{PhasePoint, VectorFieldHandle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub escape_radius: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { rtol: 1e-10, atol: 1e-12, max_steps: 1_000_000, escape_radius: 1e6 }
    }
}

impl FlowConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        FlowConfig { rtol, atol, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Invalid("flow tolerances must be positive".into()));
        }
        if !(self.escape_radius > 1.0) {
            return Err(Error::Invalid("escape radius must exceed 1".into()));
        }
        Ok(())
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Adaptive Dormand–Prince integrator for `ẏ = f(y)`.
pub struct Integrator<F> {
    f: F,
    cfg: FlowConfig,
    t: f64,
    y: Vec<f64>,
    k: [Vec<f64>; 7],
    ytmp: Vec<f64>,
    ynew: Vec<f64>,
    h: f64,
    steps: usize,
    // dense output of the last accepted step
    last: Option<(f64, f64, [Vec<f64>; 5])>,
}

impl<F> Integrator<F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), EvalError>,
{
    pub fn new(mut f: F, t0: f64, y0: &[f64], cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let d = y0.len();
        let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; d]);
        f(y0, &mut k[0])?;
        Ok(Integrator {
            f,
            cfg,
            t: t0,
            y: y0.to_vec(),
            k,
            ytmp: vec![0.0; d],
            ynew: vec![0.0; d],
            h: 0.0,
            steps: 0,
            last: None,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64] {
        &self.y
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn initial_step(&mut self, dir: f64) -> Result<f64> {
        let d = self.y.len() as f64;
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for (y, f) in self.y.iter().zip(&self.k[0]) {
            let sc = self.cfg.atol + self.cfg.rtol * y.abs();
            d0 += (y / sc).powi(2);
            d1 += (f / sc).powi(2);
        }
        let (d0, d1) = ((d0 / d).sqrt(), (d1 / d).sqrt());
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        for i in 0..self.y.len() {
            self.ytmp[i] = self.y[i] + dir * h0 * self.k[0][i];
        }
        let mut f1 = vec![0.0; self.y.len()];
        (self.f)(&self.ytmp, &mut f1)?;
        let mut d2 = 0.0;
        for i in 0..self.y.len() {
            let sc = self.cfg.atol + self.cfg.rtol * self.y[i].abs();
            d2 += ((f1[i] - self.k[0][i]) / sc).powi(2);
        }
        let d2 = (d2 / d).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1))
    }

    /// Attempts one step of signed size `h`; returns the error norm.
    fn try_step(&mut self, h: f64) -> Result<f64> {
        let d = self.y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let y = &self.y;
        let f = &mut self.f;
        let yt = &mut self.ytmp;
        for i in 0..d {
            yt[i] = y[i] + h * A21 * k1[i];
        }
        f(yt, k2)?;
        for i in 0..d {
            yt[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(yt, k3)?;
        for i in 0..d {
            yt[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(yt, k4)?;
        for i in 0..d {
            yt[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(yt, k5)?;
        for i in 0..d {
            yt[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(yt, k6)?;
        for i in 0..d {
            self.ynew[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(&self.ynew, k7)?;
        let mut err = 0.0;
        for i in 0..d {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = self.cfg.atol + self.cfg.rtol * y[i].abs().max(self.ynew[i].abs());
            err += (e / sc).powi(2);
        }
        Ok((err / d as f64).sqrt())
    }

    /// Takes one accepted step towards `t_end` (never past it).
    pub fn step_towards(&mut self, t_end: f64) -> Result<()> {
        let remaining = t_end - self.t;
        if remaining == 0.0 {
            return Ok(());
        }
        let dir = remaining.signum();
        if self.h == 0.0 {
            self.h = self.initial_step(dir)?;
        }
        loop {
            if self.steps >= self.cfg.max_steps {
                return Err(Error::StepLimit { steps: self.steps, t: self.t });
            }
            let clamped = self.h >= remaining.abs();
            let h = if clamped { remaining } else { dir * self.h };
            if h.abs() <= 1e-14 * self.t.abs().max(1.0) {
                return Err(Error::StepLimit { steps: self.steps, t: self.t });
            }
            let err = self.try_step(h)?;
            self.steps += 1;
            if err <= 1.0 {
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // dense-output coefficients
                let d = self.y.len();
                let mut rc: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; d]);
                for i in 0..d {
                    let ydiff = self.ynew[i] - self.y[i];
                    let bspl = h * self.k[0][i] - ydiff;
                    rc[0][i] = self.y[i];
                    rc[1][i] = ydiff;
                    rc[2][i] = bspl;
                    rc[3][i] = ydiff - h * self.k[6][i] - bspl;
                    rc[4][i] = h
                        * (D1 * self.k[0][i]
                            + D3 * self.k[2][i]
                            + D4 * self.k[3][i]
                            + D5 * self.k[4][i]
                            + D6 * self.k[5][i]
                            + D7 * self.k[6][i]);
                }
                self.last = Some((self.t, h, rc));
                self.t = if clamped { t_end } else { self.t + h };
                std::mem::swap(&mut self.y, &mut self.ynew);
                self.k.swap(0, 6);
                let proposed = h.abs() * fac;
                self.h = if clamped { self.h.max(proposed) } else { proposed };
                if self.y.iter().map(|v| v * v).sum::<f64>().sqrt() > self.cfg.escape_radius {
                    return Err(Error::Escape { t: self.t, radius: self.cfg.escape_radius });
                }
                return Ok(());
            }
            self.h = h.abs() * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }

    /// Integrates until `t == t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        while self.t != t_end {
            self.step_towards(t_end)?;
        }
        Ok(())
    }

    /// Interpolates the state at `t` inside the last accepted step.
    pub fn dense(&self, t: f64, out: &mut [f64]) -> bool {
        let Some((t0, h, rc)) = &self.last else { return false };
        let theta = (t - t0) / h;
        if !(-1e-12..=1.0 + 1e-12).contains(&theta) {
            return false;
        }
        let th1 = 1.0 - theta;
        for i in 0..out.len() {
            out[i] = rc[0][i]
                + theta * (rc[1][i] + th1 * (rc[2][i] + theta * (rc[3][i] + th1 * rc[4][i])));
        }
        true
    }

    /// Integrates through a monotone list of times, calling `visit` at each.
    pub fn sample(
        &mut self,
        times: &[f64],
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        let Some(&t_final) = times.last() else { return Ok(()) };
        let mut buf = vec![0.0; self.y.len()];
        for (i, &t) in times.iter().enumerate() {
            loop {
                if t == self.t {
                    visit(i, &self.y);
                    break;
                }
                if self.dense(t, &mut buf) {
                    visit(i, &buf);
                    break;
                }
                if self.t == t_final {
                    return Err(Error::Invalid("sample times must be monotone".into()));
                }
                self.step_towards(t_final)?;
            }
        }
        Ok(())
    }
}

fn combined_field<'a>(
    fields: &'a [VectorFieldHandle],
    s: &'a [f64],
) -> impl FnMut(&[f64], &mut [f64]) -> Result<(), EvalError> + 'a {
    let d = fields.first().map_or(0, |f| f.dim());
    let mut scratch = vec![0.0; d];
    move |z, out| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (f, &c) in fields.iter().zip(s) {
            if c == 0.0 {
                continue;
            }
            f.eval_into(z, &mut scratch)?;
            for (o, v) in out.iter_mut().zip(&scratch) {
                *o += c * v;
            }
        }
        Ok(())
    }
}

/// Integrator for the single autonomous field `Σ s^λ v_λ`.
pub fn combined_integrator<'a>(
    fields: &'a [VectorFieldHandle],
    s: &'a [f64],
    z0: &[f64],
    cfg: FlowConfig,
) -> Result<Integrator<impl FnMut(&[f64], &mut [f64]) -> Result<(), EvalError> + 'a>> {
    Integrator::new(combined_field(fields, s), 0.0, z0, cfg)
}

/// `Φ_s(z0) = exp(s^λ v_λ) z0`, integrating the combined field over unit time.
pub fn flow_map(
    fields: &[VectorFieldHandle],
    s: &[f64],
    z0: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<f64>> {
    if fields.len() != s.len() {
        return Err(Error::Invalid(format!(
            "{} flow parameters for {} fields",
            s.len(),
            fields.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("flow parameters must be finite".into()));
    }
    if s.iter().all(|&v| v == 0.0) {
        return Ok(z0.to_vec());
    }
    let mut integ = combined_integrator(fields, s, z0, *cfg)?;
    integ.advance_to(1.0)?;
    Ok(integ.state().to_vec())
}

/// Flow of one field for time `t`.
pub fn flow_one(field: &VectorFieldHandle, t: f64, z0: &[f64], cfg: &FlowConfig) -> Result<Vec<f64>> {
    flow_map(std::slice::from_ref(field), &[t], z0, cfg)
}

/// `‖Φ^λ_s Φ^μ_t z − Φ^μ_t Φ^λ_s z‖₂`.
pub fn commutation_residual(
    v_lambda: &VectorFieldHandle,
    v_mu: &VectorFieldHandle,
    z: &[f64],
    s: f64,
    t: f64,
    cfg: &FlowConfig,
) -> Result<f64> {
    let a = flow_one(v_lambda, s, &flow_one(v_mu, t, z, cfg)?, cfg)?;
    let b = flow_one(v_mu, t, &flow_one(v_lambda, s, z, cfg)?, cfg)?;
    Ok(distance(&a, &b))
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ProbeOutcome {
    Ok,
    Escaped { time: f64 },
    StepExhausted { time: f64 },
    DomainError { time: f64, message: String },
}

/// Finite-window completeness probe; not a proof of completeness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    #[serde(flatten)]
    pub outcome: ProbeOutcome,
    pub window: f64,
    pub escape_radius: f64,
    pub start: Vec<f64>,
}

impl ProbeReport {
    pub fn is_ok(&self) -> bool {
        self.outcome == ProbeOutcome::Ok
    }
}

pub fn completeness_probe(
    v: &VectorFieldHandle,
    z: &PhasePoint,
    window: f64,
    cfg: &FlowConfig,
) -> Result<ProbeReport> {
    if !(window > 0.0) {
        return Err(Error::Invalid("probe window must be positive".into()));
    }
    let mut outcome = ProbeOutcome::Ok;
    for end in [window, -window] {
        let mut integ = Integrator::new(|y: &[f64], o: &mut [f64]| v.eval_into(y, o), 0.0, z, *cfg)?;
        let r = integ.advance_to(end);
        let time = integ.t();
        outcome = match r {
            Ok(()) => continue,
            Err(Error::Escape { t, .. }) => ProbeOutcome::Escaped { time: t },
            Err(Error::StepLimit { .. }) => ProbeOutcome::StepExhausted { time },
            Err(Error::Eval(e)) => ProbeOutcome::DomainError { time, message: e.to_string() },
            Err(other) => return Err(other),
        };
        break;
    }
    Ok(ProbeReport { outcome, window, escape_radius: cfg.escape_radius, start: z.to_vec() })
}
