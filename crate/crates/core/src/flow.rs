//! The modified Kähler-Ricci flow on potential grids.
//!
//! With `ψ = ψ_ref + δ` and `φ' = 2δ` the flow reads
//!
//! `∂δ/∂t = ½φ̇`,  `φ̇ = −(h − θ_X) + c_t`,
//!
//! which is `∂g/∂t = −Ric + g + L_{X}g` for `g = ψ_ij(dx dx + dθ dθ)` with
//! `X` acting as the translation `½c·∂_x`. The constant `c_t` makes
//! `∫ φ̇ e^{θ_X} dV = 0`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::banded::{Banded, BandedLu};
use crate::entropy::{self, EntropyOptions, GradientForm, Init};
use crate::error::{LabError, Result};
use crate::fd::Csr;
use crate::grid::{PotentialGrid, ToricModel};
use crate::io::csv_float;
use crate::snapshot::{assemble_snapshot, MetricSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Linearized `log det` and `θ_X` treated implicitly.
    SemiImplicit,
    /// Heun's method; needs `dt ≲ h²/max (D²ψ)⁻¹`.
    ExplicitRk2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Diagnostic sampling interval.
    pub cadence: f64,
    /// Interval between `λ` solves; a multiple of `cadence`.
    pub entropy_cadence: f64,
    /// Interval between stored potentials; `0` stores none.
    #[serde(default)]
    pub checkpoint_cadence: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Steps between refactorizations of the implicit operator.
    #[serde(default = "default_refactor")]
    pub refactor_every: usize,
    #[serde(default)]
    pub entropy: EntropyOptions,
}

fn default_scheme() -> Scheme {
    Scheme::SemiImplicit
}

fn default_refactor() -> usize {
    1
}

impl FlowConfig {
    pub fn new(dt: f64, t_end: f64, cadence: f64) -> FlowConfig {
        FlowConfig {
            dt,
            t_end,
            cadence,
            entropy_cadence: cadence,
            checkpoint_cadence: 0.0,
            scheme: Scheme::SemiImplicit,
            refactor_every: 1,
            entropy: EntropyOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64, name: &str| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(LabError::Invalid(format!("flow.{name} must be positive")))
            }
        };
        pos(self.dt, "dt")?;
        pos(self.t_end, "t_end")?;
        pos(self.cadence, "cadence")?;
        pos(self.entropy_cadence, "entropy_cadence")?;
        if !(self.checkpoint_cadence >= 0.0) {
            return Err(LabError::Invalid("flow.checkpoint_cadence must be nonnegative".into()));
        }
        if self.scheme == Scheme::SemiImplicit && self.dt > 0.1 {
            return Err(LabError::Invalid("semi-implicit steps need dt ≤ 0.1".into()));
        }
        if self.refactor_every == 0 {
            return Err(LabError::Invalid("flow.refactor_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// A point on the flow.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub snapshot: MetricSnapshot,
    /// `∂φ'/∂t = −(h − θ_X) + c_t` at the current metric.
    pub phi_dot: Vec<f64>,
    pub c_t: f64,
}

impl FlowState {
    pub fn new(grid: &PotentialGrid, t: f64) -> Result<FlowState> {
        let snapshot = assemble_snapshot(grid)?;
        Ok(Self::from_snapshot(snapshot, t))
    }

    pub fn from_snapshot(snapshot: MetricSnapshot, t: f64) -> FlowState {
        let c_t = snapshot.theta_mean(&snapshot.u);
        let phi_dot = snapshot.u.iter().map(|u| c_t - u).collect();
        FlowState { t, snapshot, phi_dot, c_t }
    }

    pub fn grid(&self) -> &PotentialGrid {
        &self.snapshot.grid
    }
}

/// The implicit operator `I − ½dt(Δ + 2 + c·∇)`, factored.
pub struct ImplicitOperator {
    lu: BandedLu,
    pub dt: f64,
}

impl ImplicitOperator {
    pub fn new(s: &MetricSnapshot, dt: f64) -> Result<ImplicitOperator> {
        let n = s.dim();
        let st = &s.model().stencils;
        let lap = st.second_order_matrix(&|i| {
            let mut c = [[0.0; 3]; 3];
            for a in 0..n {
                for b in 0..n {
                    c[a][b] = s.inv[i].a[a][b];
                }
            }
            c
        });
        let c = &s.model().extremal.c;
        let mut rows = lap.rows;
        for (i, r) in rows.iter_mut().enumerate() {
            r.iter_mut().for_each(|e| e.1 *= -0.5 * dt);
            r.push((i, 1.0 - dt));
        }
        for a in 0..n {
            if c[a] == 0.0 {
                continue;
            }
            let mut ops = vec![None; n];
            ops[a] = Some(&st.d1_smooth[a]);
            let d1 = Csr::tensor(&ops, st.m);
            for (r, d) in rows.iter_mut().zip(d1.rows) {
                r.extend(d.into_iter().map(|(j, x)| (j, -0.5 * dt * c[a] * x)));
            }
        }
        let lu = Banded::from_rows(&rows).factor()?;
        Ok(ImplicitOperator { lu, dt })
    }
}

/// One accepted step from `state` with step `dt`, retrying with halved
/// steps when convexity is lost. `op` is reused when its step matches.
pub fn step(state: &FlowState, dt: f64, scheme: Scheme, op: Option<&ImplicitOperator>) -> Result<FlowState> {
    let mut h = dt;
    let mut last = String::new();
    for _ in 0..=MAX_HALVINGS {
        let trial = match scheme {
            Scheme::SemiImplicit => {
                let fresh;
                let op = match op {
                    Some(o) if o.dt == h => o,
                    _ => {
                        fresh = ImplicitOperator::new(&state.snapshot, h)?;
                        &fresh
                    }
                };
                let rhs: Vec<f64> = state.phi_dot.iter().map(|p| 0.5 * h * p).collect();
                let d = op.lu.solve(&rhs);
                let delta: Vec<f64> = state.grid().delta.iter().zip(&d).map(|(a, b)| a + b).collect();
                FlowState::new(&state.grid().with_delta(delta), state.t + h)
            }
            Scheme::ExplicitRk2 => {
                let g = state.grid();
                let d1: Vec<f64> = g.delta.iter().zip(&state.phi_dot).map(|(d, p)| d + 0.5 * h * p).collect();
                FlowState::new(&g.with_delta(d1), state.t + h).and_then(|mid| {
                    let delta: Vec<f64> = (0..g.delta.len())
                        .map(|i| g.delta[i] + 0.25 * h * (state.phi_dot[i] + mid.phi_dot[i]))
                        .collect();
                    FlowState::new(&g.with_delta(delta), state.t + h)
                })
            }
        };
        match trial {
            Ok(next) => return Ok(next),
            Err(e @ LabError::ConvexityLost { .. }) => {
                last = e.to_string();
                h *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(LabError::StepCollapse {
        t: state.t,
        detail: format!("{MAX_HALVINGS} halvings of dt = {dt}: {last}; state ‖δ‖∞ = {:.3e}", MetricSnapshot::sup(&state.grid().delta)),
    })
}

pub const MAX_HALVINGS: usize = 10;

/// One row of a [`FlowTrace`]. `c0` is the sup norm over all nodes;
/// gradient and Laplacian norms are sups of `|∇·|` and `|Δ·|` over the
/// resolved nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub lambda: Option<f64>,
    pub mu: f64,
    pub u_c0: f64,
    pub grad_u: f64,
    pub lap_u: f64,
    pub h_c0: f64,
    pub grad_h: f64,
    pub lap_h: f64,
    pub phidot_c0: f64,
    /// `∫|∇u|² e^{θ_X} dV`.
    pub h_t: f64,
    /// Share of the volume in the two outer node layers.
    pub boundary_err: f64,
    /// `(1/V)∫ |∇φ̇|²/2 e^{θ_X} dV`, the rate `−dμ/dt`.
    pub mu_rate: f64,
    /// Minimizer norms, when `λ` was solved.
    pub minimizer: Option<MinimizerNorms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizerNorms {
    pub f_c0: f64,
    pub grad_f: f64,
    pub lap_f: f64,
    pub f_plus_h_c0: f64,
    pub grad_f_plus_h: f64,
    pub f_plus_theta_c0: f64,
    /// [`entropy::trace_form_bound`].
    pub trace_bound: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub t: f64,
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub model: Arc<ToricModel>,
    pub config: FlowConfig,
    pub samples: Vec<TraceSample>,
    pub checkpoints: Vec<Checkpoint>,
    pub warnings: Vec<String>,
    pub steps: usize,
    /// Steps that needed at least one halving.
    pub halved: usize,
    /// `δ` at `t_end`.
    pub final_delta: Vec<f64>,
}

pub const CSV_HEADER: &str = "t,lambda,mu,u_c0,grad_u,lap_u,h_c0,grad_h,lap_h,phidot_c0,H_t,boundary_err";

impl FlowTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            let lam = s.lambda.map(csv_float).unwrap_or_default();
            let cols = [
                csv_float(s.t),
                lam,
                csv_float(s.mu),
                csv_float(s.u_c0),
                csv_float(s.grad_u),
                csv_float(s.lap_u),
                csv_float(s.h_c0),
                csv_float(s.grad_h),
                csv_float(s.lap_h),
                csv_float(s.phidot_c0),
                csv_float(s.h_t),
                csv_float(s.boundary_err),
            ];
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    pub fn final_grid(&self) -> PotentialGrid {
        PotentialGrid { model: self.model.clone(), delta: self.final_delta.clone() }
    }

    pub fn lambdas(&self) -> Vec<(f64, f64)> {
        self.samples.iter().filter_map(|s| s.lambda.map(|l| (s.t, l))).collect()
    }

    pub fn last(&self) -> &TraceSample {
        self.samples.last().expect("a trace has at least one sample")
    }

    /// Potential at time `t`, linear in time between checkpoints.
    pub fn grid_at(&self, t: f64) -> Result<PotentialGrid> {
        let cp = &self.checkpoints;
        let k = cp.partition_point(|c| c.t <= t + 1e-12);
        if k == 0 || (k == cp.len() && (t - cp[k - 1].t).abs() > 1e-9) {
            return Err(LabError::MissingData(format!("no checkpoints around t = {t}")));
        }
        let a = &cp[k - 1];
        if (t - a.t).abs() <= 1e-12 || k == cp.len() {
            return Ok(PotentialGrid { model: self.model.clone(), delta: a.delta.clone() });
        }
        let b = &cp[k];
        let s = (t - a.t) / (b.t - a.t);
        let delta = a.delta.iter().zip(&b.delta).map(|(x, y)| (1.0 - s) * x + s * y).collect();
        Ok(PotentialGrid { model: self.model.clone(), delta })
    }
}

/// Diagnostics at one state; `lambda_from` solves for `λ` when given.
fn sample(
    state: &FlowState,
    mu: f64,
    minimizer: Option<&entropy::WMinimizer>,
) -> TraceSample {
    let s = &state.snapshot;
    let sup = MetricSnapshot::sup;
    let e_theta: Vec<f64> = s.theta_x.iter().map(|t| t.exp()).collect();
    let gu = s.gradient_sq(&s.u);
    let h_t = s.integrate(&gu.iter().zip(&e_theta).map(|(a, b)| a * b).collect::<Vec<_>>());
    let minimizer_norms = minimizer.map(|m| {
        let fh: Vec<f64> = m.f.iter().zip(&s.h).map(|(a, b)| a + b).collect();
        let ft: Vec<f64> = m.f.iter().zip(&s.theta_x).map(|(a, b)| a + b).collect();
        MinimizerNorms {
            f_c0: sup(&m.f),
            grad_f: s.grad_sup(&m.f),
            lap_f: s.lap_sup(&m.f),
            f_plus_h_c0: sup(&fh),
            grad_f_plus_h: s.grad_sup(&fh),
            f_plus_theta_c0: sup(&ft),
            trace_bound: entropy::trace_form_bound(s, &m.f),
            residual: m.residual,
        }
    });
    TraceSample {
        t: state.t,
        lambda: minimizer.map(|m| m.lambda),
        mu,
        u_c0: sup(&s.u),
        grad_u: s.grad_sup(&s.u),
        lap_u: s.lap_sup(&s.u),
        h_c0: sup(&s.h),
        grad_h: s.grad_sup(&s.h),
        lap_h: s.lap_sup(&s.h),
        phidot_c0: sup(&state.phi_dot),
        h_t,
        boundary_err: s.report.boundary_layer,
        mu_rate: mu_rate(state),
        minimizer: minimizer_norms,
    }
}

/// `(1/V)∫ |∇φ̇|²/κ e^{θ_X} dV` with `κ = 2`, the ratio of `|∇·|²` to
/// `‖∂̄·‖²` for invariant functions.
pub fn mu_rate(state: &FlowState) -> f64 {
    let s = &state.snapshot;
    let g = s.gradient_sq(&state.phi_dot);
    let dens: Vec<f64> = g.iter().zip(&s.theta_x).map(|(g, t)| 0.5 * g * t.exp()).collect();
    s.integrate(&dens) / s.volume
}

/// Is `t` on the lattice `k·every` (to a fraction of `dt`)?
fn on_lattice(t: f64, every: f64, dt: f64) -> bool {
    if every <= 0.0 {
        return false;
    }
    let k = (t / every).round();
    (t - k * every).abs() < 0.25 * dt
}

/// Runs the flow from `grid` to `config.t_end`.
pub fn run(grid: &PotentialGrid, config: &FlowConfig) -> Result<FlowTrace> {
    run_from(FlowState::new(grid, 0.0)?, config)
}

pub fn run_from(initial: FlowState, config: &FlowConfig) -> Result<FlowTrace> {
    config.validate()?;
    let model = initial.grid().model.clone();
    let mut trace = FlowTrace {
        model: model.clone(),
        config: config.clone(),
        samples: Vec::new(),
        checkpoints: Vec::new(),
        warnings: Vec::new(),
        steps: 0,
        halved: 0,
        final_delta: Vec::new(),
    };
    let mut state = initial;
    let mut mu = 0.0;
    let mut warm: Option<Vec<f64>> = None;
    let record = |state: &FlowState, mu: f64, trace: &mut FlowTrace, warm: &mut Option<Vec<f64>>| -> Result<()> {
        let solve = on_lattice(state.t, config.entropy_cadence, config.dt);
        let minimizer = if solve {
            let s = &state.snapshot;
            let form = GradientForm::new(s);
            let init = warm.clone().map_or(Init::Warm, Init::V);
            let m = entropy::minimize_w_with(s, &form, init, &config.entropy)?;
            *warm = Some(m.v.clone());
            Some(m)
        } else {
            None
        };
        trace.samples.push(sample(state, mu, minimizer.as_ref()));
        if on_lattice(state.t, config.checkpoint_cadence, config.dt) {
            trace.checkpoints.push(Checkpoint { t: state.t, delta: state.grid().delta.clone() });
        }
        Ok(())
    };
    record(&state, mu, &mut trace, &mut warm)?;
    let mut rate = mu_rate(&state);
    let mut op: Option<ImplicitOperator> = None;
    let mut since_factor = 0usize;
    while state.t < config.t_end - 0.5 * config.dt {
        let dt = config.dt.min(config.t_end - state.t);
        if config.scheme == Scheme::SemiImplicit && (op.is_none() || since_factor >= config.refactor_every) {
            op = Some(ImplicitOperator::new(&state.snapshot, config.dt)?);
            since_factor = 0;
        }
        let next = step(&state, dt, config.scheme, op.as_ref())?;
        since_factor += 1;
        trace.steps += 1;
        if next.t - state.t < 0.75 * dt {
            trace.halved += 1;
            // Halved steps land off the sampling lattice; finish the step.
            let mut s = next;
            while s.t < state.t + dt - 1e-12 {
                let h = (state.t + dt - s.t).min(dt);
                s = step(&s, h, config.scheme, None)?;
            }
            let r = mu_rate(&s);
            mu -= 0.5 * dt * (rate + r);
            rate = r;
            state = s;
        } else {
            let r = mu_rate(&next);
            mu -= 0.5 * (next.t - state.t) * (rate + r);
            rate = r;
            state = next;
        }
        if on_lattice(state.t, config.cadence, config.dt) || on_lattice(state.t, config.checkpoint_cadence, config.dt) {
            record(&state, mu, &mut trace, &mut warm)?;
        }
    }
    if trace.last().t < state.t - 1e-12 {
        record(&state, mu, &mut trace, &mut warm)?;
    }
    trace.warnings = monitor_warnings(&trace.samples);
    trace.final_delta = state.grid().delta.clone();
    Ok(trace)
}

/// Monitors whose sup over the trace exceeds ten times the initial value.
pub fn monitor_warnings(samples: &[TraceSample]) -> Vec<String> {
    let mut out = Vec::new();
    let Some(first) = samples.first() else { return out };
    let series: Vec<(&str, Box<dyn Fn(&TraceSample) -> Option<f64>>)> = vec![
        ("h_c0", Box::new(|s: &TraceSample| Some(s.h_c0))),
        ("grad_h", Box::new(|s: &TraceSample| Some(s.grad_h))),
        ("lap_h", Box::new(|s: &TraceSample| Some(s.lap_h))),
        ("f_c0", Box::new(|s: &TraceSample| s.minimizer.as_ref().map(|m| m.f_c0))),
        ("grad_f", Box::new(|s: &TraceSample| s.minimizer.as_ref().map(|m| m.grad_f))),
        ("lap_f", Box::new(|s: &TraceSample| s.minimizer.as_ref().map(|m| m.lap_f))),
    ];
    for (name, get) in series {
        let Some(init) = get(first) else { continue };
        for s in samples {
            if let Some(x) = get(s) {
                if x > MONITOR_FACTOR * init {
                    out.push(format!("{name} = {x:.3e} at t = {} exceeds {MONITOR_FACTOR}× its initial value {init:.3e}", s.t));
                    break;
                }
            }
        }
    }
    out
}

pub const MONITOR_FACTOR: f64 = 10.0;

/// `μ(t) = −∫₀ᵗ (1/V)∫ |∇φ̇|²/2 e^{θ_X} dV ds` by the trapezoid rule over the
/// trace samples.
pub fn modified_k_energy(trace: &FlowTrace) -> Result<Vec<(f64, f64)>> {
    if trace.samples.len() < 2 {
        return Err(LabError::MissingData("μ needs at least two samples".into()));
    }
    let mut out = vec![(trace.samples[0].t, 0.0)];
    let mut acc = 0.0;
    for w in trace.samples.windows(2) {
        acc -= 0.5 * (w[1].t - w[0].t) * (w[0].mu_rate + w[1].mu_rate);
        out.push((w[1].t, acc));
    }
    Ok(out)
}

/// `ψ_v(x) = ψ(x + v)`: `ψ_ref` exactly, `δ` by cubic interpolation.
/// Translations by more than a quarter of the box are refused.
pub fn gauge_shift(grid: &PotentialGrid, v: &[f64]) -> Result<PotentialGrid> {
    let model = &grid.model;
    let spec = model.spec;
    let n = spec.dim;
    if v.len() != n {
        return Err(LabError::Invalid("translation has the wrong dimension".into()));
    }
    if v.iter().any(|x| x.abs() > 0.25 * spec.half_width) {
        return Err(LabError::GaugeEscape(format!(
            "translation {v:?} exceeds a quarter of the half-width {}",
            spec.half_width
        )));
    }
    if v.iter().all(|x| *x == 0.0) {
        return Ok(grid.clone());
    }
    let delta = (0..spec.len())
        .map(|i| {
            let x: Vec<f64> = spec.coords(i).iter().zip(v).map(|(a, b)| a + b).collect();
            ref_difference(&model.ref_points, model.ref_rate, &spec.coords(i), v) + interpolate(grid, &x)
        })
        .collect();
    Ok(grid.with_delta(delta))
}

/// `ψ_ref(x + v) − ψ_ref(x) = k⁻¹ log Σ_m p_m(x) e^{k⟨v,m⟩}` with `p` the
/// softmax weights at `x`, free of the cancellation in the plain difference.
fn ref_difference(points: &[Vec<f64>], k: f64, x: &[f64], v: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
    let e: Vec<f64> = points.iter().map(|m| k * dot(m, x)).collect();
    let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, ei) in points.iter().zip(&e) {
        let p = (ei - top).exp();
        num += p * (k * dot(m, v)).exp();
        den += p;
    }
    (num / den).ln() / k
}

/// Tensor cubic Lagrange interpolation of `δ`; points outside the box are
/// clamped onto it.
pub fn interpolate(grid: &PotentialGrid, x: &[f64]) -> f64 {
    let spec = grid.spec();
    let n = spec.dim;
    let m = spec.resolution;
    let h = spec.spacing();
    let mut base = [0usize; 3];
    let mut wts = [[0.0; 4]; 3];
    for a in 0..n {
        let s = ((x[a] + spec.half_width) / h).clamp(0.0, (m - 1) as f64);
        let k = (s.floor() as usize).clamp(1, m - 3);
        base[a] = k - 1;
        let t = s - (k - 1) as f64;
        for j in 0..4 {
            let mut w = 1.0;
            for l in 0..4 {
                if l != j {
                    w *= (t - l as f64) / (j as f64 - l as f64);
                }
            }
            wts[a][j] = w;
        }
    }
    let mut total = 0.0;
    for k in 0..4usize.pow(n as u32) {
        let mut w = 1.0;
        let mut idx = 0;
        let mut stride = 1;
        let mut rest = k;
        for a in 0..n {
            let j = rest % 4;
            rest /= 4;
            w *= wts[a][j];
            idx += (base[a] + j) * stride;
            stride *= m;
        }
        total += w * grid.delta[idx];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{perturbed_potential, reference_potential, Profile};
    use crate::polytope::Polytope;

    fn cp1(m: usize) -> PotentialGrid {
        reference_potential(&Polytope::catalog("cp1").unwrap(), 8.0, m).unwrap()
    }

    #[test]
    fn round_sphere_is_stationary() {
        let g = cp1(257);
        let s = FlowState::new(&g, 0.0).unwrap();
        assert!(MetricSnapshot::sup(&s.phi_dot) < 1e-6);
        let next = step(&s, 0.01, Scheme::SemiImplicit, None).unwrap();
        assert!(MetricSnapshot::sup(&next.grid().delta) < 1e-8);
    }

    #[test]
    fn phi_dot_has_zero_theta_mean() {
        let g = cp1(129);
        let (p, _) = perturbed_potential(&g.model, &Profile::MomentPoly, 0.2, 1).unwrap();
        let s = FlowState::new(&p, 0.0).unwrap();
        assert!(s.snapshot.theta_mean(&s.phi_dot).abs() < 1e-12);
    }

    #[test]
    fn explicit_and_semi_implicit_agree_for_tiny_steps() {
        let g = cp1(33);
        let (p, _) = perturbed_potential(&g.model, &Profile::Sech2, 0.1, 0).unwrap();
        let s0 = FlowState::new(&p, 0.0).unwrap();
        let dt = 1e-6;
        let (mut a, mut b) = (s0.clone(), s0);
        for _ in 0..5 {
            a = step(&a, dt, Scheme::SemiImplicit, None).unwrap();
            b = step(&b, dt, Scheme::ExplicitRk2, None).unwrap();
        }
        let diff = (0..a.snapshot.len())
            .map(|i| (a.grid().delta[i] - b.grid().delta[i]).abs())
            .fold(0.0, f64::max);
        let moved = (0..a.snapshot.len())
            .map(|i| (a.grid().delta[i] - p.delta[i]).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-3 * moved, "{diff} vs {moved}");
    }

    #[test]
    fn zero_translation_is_the_identity_and_images_stay_inside() {
        let g = cp1(129);
        assert_eq!(gauge_shift(&g, &[0.0]).unwrap().delta, g.delta);
        let s = assemble_snapshot(&gauge_shift(&g, &[0.3]).unwrap()).unwrap();
        assert!(s.moment.iter().all(|y| y[0].abs() < 1.0));
        assert!(matches!(gauge_shift(&g, &[3.0]), Err(LabError::GaugeEscape(_))));
    }

    #[test]
    fn translated_round_sphere_keeps_lambda() {
        let g = cp1(257);
        let shifted = assemble_snapshot(&gauge_shift(&g, &[0.3]).unwrap()).unwrap();
        let base = assemble_snapshot(&g).unwrap();
        let opts = EntropyOptions::default();
        let a = entropy::minimize_w(&base, Init::Warm, &opts).unwrap().lambda;
        let b = entropy::minimize_w(&shifted, Init::Warm, &opts).unwrap().lambda;
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn csv_has_the_documented_header() {
        let g = cp1(65);
        let t = run(&g, &FlowConfig::new(0.01, 0.02, 0.01)).unwrap();
        let csv = t.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 1 + t.samples.len());
        assert_eq!(t.samples.len(), 3);
    }
}
