//! The entropy functional `W(g, f)` with `τ = 1/2`, its infimum `λ(g)` and
//! their companions along flows.
//!
//! Everything is written in the variable `v = e^{−f/2}`:
//!
//! `(2π)^n W = Σ (½ρ v² − w v² log v²) + 2 vᵀKv`,  `Σ w v² = V_h`,
//!
//! where `w` are the snapshot weights, `vᵀKv` is the discrete `∫|∇v|² dV`
//! in divergence form (staggered differences, `q = adj D²ψ`) and
//! `ρ = 2n w − Kh` stands for `wR`. Pointwise `R = 2n + Δh` carries the
//! factor `(D²ψ)⁻¹ ~ e^{2L}` near the box faces, which turns roundoff in `h`
//! into large errors there; `ρ` only involves the bounded `adj D²ψ`.
//! The Lagrange multiplier of the constraint is `Λ = (2π)^n W / V_h − 1`.

use serde::{Deserialize, Serialize};

use crate::banded::Banded;
use crate::error::{LabError, Result};
use crate::fd::Csr;
use crate::snapshot::MetricSnapshot;

/// `(2π)^n`.
pub fn two_pi_n(n: usize) -> f64 {
    (2.0 * std::f64::consts::PI).powi(n as i32)
}

/// The quadratic form `vᵀKv ≈ ∫|∇v|² dV`.
///
/// `vᵀKv = Σ_a Σ c_a (S_a v)² + 2 Σ_{a<b} Σ c_ab (P_ab v)(Q_ab v)` with `S_a`
/// the staggered derivative on axis `a`, `P_ab = S_a I_b`, `Q_ab = I_a S_b`
/// and `c` the interpolated entries of `adj D²ψ` times the cell weight.
#[derive(Clone, Debug)]
pub struct GradientForm {
    len: usize,
    axes: Vec<(Csr, Vec<f64>)>,
    pairs: Vec<(Csr, Csr, Vec<f64>)>,
    /// `ρ = 2n w − Kh`, the weighted scalar curvature `w R` in divergence
    /// form; `Σ ρ = 2n V_h` exactly.
    pub rho: Vec<f64>,
}

impl GradientForm {
    pub fn new(s: &MetricSnapshot) -> GradientForm {
        let n = s.dim();
        let st = &s.model().stencils;
        let m = st.m;
        let scale = crate::manifold_factor(n) * s.spec().cell();
        let q = |a: usize, b: usize| -> Vec<f64> { s.inv.iter().zip(&s.det).map(|(i, d)| d * i.a[a][b]).collect() };
        let op = |list: &[(usize, &crate::fd::AxisOp)]| -> Csr {
            let mut ops: Vec<Option<&crate::fd::AxisOp>> = vec![None; n];
            for &(a, o) in list {
                ops[a] = Some(o);
            }
            Csr::tensor(&ops, m)
        };
        let mut axes = Vec::with_capacity(n);
        for a in 0..n {
            let d = op(&[(a, &st.stag[a])]);
            let c = op(&[(a, &st.mid[a])]).matvec(&q(a, a)).into_iter().map(|x| x * scale).collect();
            axes.push((d, c));
        }
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let p = op(&[(a, &st.stag[a]), (b, &st.mid[b])]);
                let qq = op(&[(a, &st.mid[a]), (b, &st.stag[b])]);
                let c = op(&[(a, &st.mid[a]), (b, &st.mid[b])])
                    .matvec(&q(a, b))
                    .into_iter()
                    .map(|x| x * scale)
                    .collect();
                pairs.push((p, qq, c));
            }
        }
        let mut form = GradientForm { len: s.len(), axes, pairs, rho: Vec::new() };
        let kh = form.apply(&s.h);
        form.rho = s.weight.iter().zip(&kh).map(|(w, k)| 2.0 * n as f64 * w - k).collect();
        form
    }

    /// `vᵀKv`.
    pub fn energy(&self, v: &[f64]) -> f64 {
        self.bilinear(v, v)
    }

    /// `uᵀKv`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut e = 0.0;
        for (d, c) in &self.axes {
            let du = d.matvec(u);
            let dv = d.matvec(v);
            e += c.iter().zip(du.iter().zip(&dv)).map(|(c, (x, y))| c * x * y).sum::<f64>();
        }
        for (p, q, c) in &self.pairs {
            let (pu, qu, pv, qv) = (p.matvec(u), q.matvec(u), p.matvec(v), q.matvec(v));
            e += (0..c.len()).map(|k| c[k] * (pu[k] * qv[k] + qu[k] * pv[k])).sum::<f64>();
        }
        e
    }

    /// `Kv`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        let mut add = |x: Vec<f64>| out.iter_mut().zip(x).for_each(|(o, x)| *o += x);
        for (d, c) in &self.axes {
            let dv: Vec<f64> = d.matvec(v).iter().zip(c).map(|(x, c)| x * c).collect();
            add(d.tmatvec(&dv));
        }
        for (p, q, c) in &self.pairs {
            let pv: Vec<f64> = p.matvec(v).iter().zip(c).map(|(x, c)| x * c).collect();
            let qv: Vec<f64> = q.matvec(v).iter().zip(c).map(|(x, c)| x * c).collect();
            add(q.tmatvec(&pv));
            add(p.tmatvec(&qv));
        }
        out
    }

    /// Rows of `K`.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); self.len];
        let mut outer = |left: &[(usize, f64)], right: &[(usize, f64)], c: f64| {
            for &(i, x) in left {
                for &(j, y) in right {
                    *rows[i].entry(j).or_insert(0.0) += c * x * y;
                }
            }
        };
        for (d, c) in &self.axes {
            for (r, &ck) in d.rows.iter().zip(c) {
                outer(r, r, ck);
            }
        }
        for (p, q, c) in &self.pairs {
            for k in 0..c.len() {
                outer(&p.rows[k], &q.rows[k], c[k]);
                outer(&q.rows[k], &p.rows[k], c[k]);
            }
        }
        rows.into_iter().map(|r| r.into_iter().collect()).collect()
    }
}

/// Adds the constant making `∫ e^{−f} dV = V_h`.
pub fn normalize_f(s: &MetricSnapshot, f: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = f.iter().map(|x| -x).collect();
    crate::snapshot::normalize_exp(&neg, &s.weight, s.volume).into_iter().map(|x| -x).collect()
}

/// Relative normalization defect `(∫e^{−f} dV − V_h)/V_h`.
pub fn normalization_defect(s: &MetricSnapshot, f: &[f64]) -> f64 {
    let e: Vec<f64> = f.iter().map(|x| (-x).exp()).collect();
    (s.integrate(&e) - s.volume) / s.volume
}

/// Largest normalization defect accepted by [`w_functional`].
pub const NORMALIZATION_TOL: f64 = 1e-8;

/// `W(g, f) = (2π)^{-n} ∫ [½(R + |∇f|²) + f] e^{−f} dV`; `f` must be
/// normalized (see [`normalize_f`]).
pub fn w_functional(s: &MetricSnapshot, f: &[f64]) -> Result<f64> {
    w_functional_with(s, &GradientForm::new(s), f)
}

pub fn w_functional_with(s: &MetricSnapshot, form: &GradientForm, f: &[f64]) -> Result<f64> {
    let defect = normalization_defect(s, f);
    if defect.abs() > NORMALIZATION_TOL {
        return Err(LabError::Normalization(format!(
            "∫e^(-f) dV differs from V by {defect:.2e} (relative)"
        )));
    }
    let v: Vec<f64> = f.iter().map(|x| (-0.5 * x).exp()).collect();
    Ok(v_energy(s, form, &v) / two_pi_n(s.dim()))
}

/// `Σ (½ρ v² − w v² log v²) + 2 vᵀKv`.
fn v_energy(s: &MetricSnapshot, form: &GradientForm, v: &[f64]) -> f64 {
    let local: f64 = (0..v.len())
        .map(|i| {
            let v2 = v[i] * v[i];
            let ent = if v2 > 0.0 { v2 * v2.ln() } else { 0.0 };
            0.5 * form.rho[i] * v2 - s.weight[i] * ent
        })
        .sum();
    local + 2.0 * form.energy(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyOptions {
    /// Stop when the Euler-Lagrange residual is below `tol·V^{1/2}`.
    pub tol: f64,
    pub max_iter: usize,
    /// Positivity floor for `v`.
    pub floor: f64,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        EntropyOptions { tol: 1e-8, max_iter: 10_000, floor: 1e-12 }
    }
}

/// Starting point of [`minimize_w`].
#[derive(Clone, Debug)]
pub enum Init {
    /// `v = e^{θ_X/2}`.
    Warm,
    /// A starting `f`.
    F(Vec<f64>),
    /// A starting positive `v`.
    V(Vec<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WMinimizer {
    pub v: Vec<f64>,
    pub f: Vec<f64>,
    pub lambda: f64,
    /// L² norm of `Δv − ½fv − ¼Rv + ((2π)^n λ/2V) v` against `dV`.
    pub residual: f64,
    pub iterations: usize,
}

/// `λ(g) = inf W(g, ·)` by a constrained Newton iteration in `v`.
///
/// Each step solves the bordered system of the Lagrangian Hessian
/// `4K + diag(w(R − 2log v² − 6 − 2Λ))` against the constraint gradient,
/// with Levenberg damping `τ diag(w)` whenever the undamped step fails to
/// lower `W` after renormalization.
pub fn minimize_w(s: &MetricSnapshot, init: Init, opts: &EntropyOptions) -> Result<WMinimizer> {
    minimize_w_with(s, &GradientForm::new(s), init, opts)
}

pub fn minimize_w_with(s: &MetricSnapshot, form: &GradientForm, init: Init, opts: &EntropyOptions) -> Result<WMinimizer> {
    let n = s.dim();
    let len = s.len();
    let vol = s.volume;
    let w = &s.weight;
    let mut v: Vec<f64> = match init {
        Init::Warm => s.theta_x.iter().map(|t| (0.5 * t).exp()).collect(),
        Init::F(f) => f.iter().map(|x| (-0.5 * x).exp()).collect(),
        Init::V(v) => v,
    };
    if v.len() != len || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(LabError::Invalid("initial v must be positive on every node".into()));
    }
    renormalize(&mut v, w, vol);
    let k4: Vec<Vec<(usize, f64)>> = form
        .rows()
        .into_iter()
        .map(|r| r.into_iter().map(|(j, x)| (j, 4.0 * x)).collect())
        .collect();
    let base = Banded::from_rows(&k4);
    let mut e = v_energy(s, form, &v);
    let mut floor_hits = 0;
    let target = opts.tol * vol.sqrt();
    let mut last_residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        let lam = e / vol - 1.0;
        let kv = form.apply(&v);
        let r: Vec<f64> = (0..len)
            .map(|i| (form.rho[i] - w[i] * (2.0 * (v[i] * v[i]).ln() + 2.0 + 2.0 * lam)) * v[i] + 4.0 * kv[i])
            .collect();
        let residual = 0.25 * (0..len).map(|i| r[i] * r[i] / w[i]).sum::<f64>().sqrt();
        last_residual = residual;
        if residual <= target {
            return Ok(finish(s, v, e, residual, it));
        }
        let diag: Vec<f64> = (0..len)
            .map(|i| form.rho[i] - w[i] * (2.0 * (v[i] * v[i]).ln() + 6.0 + 2.0 * lam))
            .collect();
        let c: Vec<f64> = (0..len).map(|i| 2.0 * w[i] * v[i]).collect();
        let mut accepted = false;
        let mut tau = 0.0;
        for _ in 0..24 {
            let mut b = base.clone();
            for i in 0..len {
                b.add(i, i, diag[i] + tau * w[i]);
            }
            let step = b.factor().ok().and_then(|lu| {
                let neg_r: Vec<f64> = r.iter().map(|x| -x).collect();
                let z1 = lu.solve(&neg_r);
                let z2 = lu.solve(&c);
                let den: f64 = c.iter().zip(&z2).map(|(a, b)| a * b).sum();
                if den == 0.0 || !den.is_finite() {
                    return None;
                }
                let mu = c.iter().zip(&z1).map(|(a, b)| a * b).sum::<f64>() / den;
                let dv: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - mu * b).collect();
                dv.iter().all(|x| x.is_finite()).then_some(dv)
            });
            if let Some(dv) = step {
                // Keep v positive: never remove more than half of any entry.
                let mut alpha: f64 = 1.0;
                for i in 0..len {
                    if dv[i] < 0.0 {
                        alpha = alpha.min(-0.5 * v[i] / dv[i]);
                    }
                }
                for _ in 0..4 {
                    let mut trial: Vec<f64> = (0..len).map(|i| (v[i] + alpha * dv[i]).max(opts.floor)).collect();
                    renormalize(&mut trial, w, vol);
                    let et = v_energy(s, form, &trial);
                    if et <= e + 4.0 * f64::EPSILON * e.abs() {
                        if trial.iter().any(|x| *x <= opts.floor * 1.000001) {
                            floor_hits += 1;
                        }
                        let stalled = (e - et).abs() <= 4.0 * f64::EPSILON * e.abs();
                        v = trial;
                        e = et;
                        accepted = true;
                        if stalled && residual <= 1e3 * target && tau == 0.0 {
                            // Roundoff floor of the energy; accept the iterate.
                            let (res, _) = residual_of(s, form, &v, e);
                            return Ok(finish(s, v, e, res, it + 1));
                        }
                        break;
                    }
                    alpha *= 0.5;
                }
            }
            if accepted {
                break;
            }
            tau = if tau == 0.0 { 1e-2 } else { tau * 4.0 };
        }
        if floor_hits > 10 {
            return Err(LabError::MinimizerDegeneracy(format!(
                "v reached the floor {:.0e} on {floor_hits} iterations",
                opts.floor
            )));
        }
        if !accepted {
            return Err(LabError::MinimizerNotConverged {
                iterations: it,
                residual,
                lambda: e / two_pi_n(n),
            });
        }
    }
    Err(LabError::MinimizerNotConverged {
        iterations: opts.max_iter,
        residual: last_residual,
        lambda: e / two_pi_n(n),
    })
}

fn renormalize(v: &mut [f64], w: &[f64], vol: f64) {
    let s: f64 = v.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let k = (vol / s).sqrt();
    v.iter_mut().for_each(|x| *x *= k);
}

fn residual_of(s: &MetricSnapshot, form: &GradientForm, v: &[f64], e: f64) -> (f64, Vec<f64>) {
    let lam = e / s.volume - 1.0;
    let kv = form.apply(v);
    let w = &s.weight;
    let r: Vec<f64> = (0..v.len())
        .map(|i| (form.rho[i] - w[i] * (2.0 * (v[i] * v[i]).ln() + 2.0 + 2.0 * lam)) * v[i] + 4.0 * kv[i])
        .collect();
    let res = 0.25 * (0..v.len()).map(|i| r[i] * r[i] / w[i]).sum::<f64>().sqrt();
    (res, r)
}

fn finish(s: &MetricSnapshot, v: Vec<f64>, e: f64, residual: f64, iterations: usize) -> WMinimizer {
    let f = v.iter().map(|x| -2.0 * x.ln()).collect();
    WMinimizer { v, f, lambda: e / two_pi_n(s.dim()), residual, iterations }
}

/// L² defect of the scalar Euler-Lagrange equation
/// `Δf + f + ½(R − |∇f|²) = const` against `e^{−f} dV`, using the pointwise
/// operators; the constant is the `e^{−f}`-mean.
pub fn scalar_residual(s: &MetricSnapshot, f: &[f64]) -> f64 {
    let lap = s.laplacian(f);
    let g2 = s.gradient_sq(f);
    let e: Vec<f64> = f.iter().map(|x| (-x).exp()).collect();
    let val: Vec<f64> = (0..f.len()).map(|i| lap[i] + f[i] + 0.5 * (s.scalar[i] - g2[i])).collect();
    let mass = s.integrate(&e);
    let mean = (0..f.len()).map(|i| s.weight[i] * e[i] * val[i]).sum::<f64>() / mass;
    let sq: f64 = (0..f.len()).map(|i| s.weight[i] * e[i] * (val[i] - mean).powi(2)).sum();
    (sq / mass).sqrt()
}

/// `(2π)^{-n}(1/2n) ∫ |Δ(h+f)|² e^{−f} dV`.
///
/// Trace part of `(2π)^{-n}∫|Ric − g + ∇²f|² e^{−f} dV`, using
/// `|T|² ≥ (tr T)²/2n` and `tr(Ric − g + ∇²f) = Δ(h + f)`. Summed over the
/// resolved nodes.
pub fn trace_form_bound(s: &MetricSnapshot, f: &[f64]) -> f64 {
    let n = s.dim();
    let hf: Vec<f64> = s.h.iter().zip(f).map(|(a, b)| a + b).collect();
    let lap = s.laplacian(&hf);
    // Pointwise Δ is noise near the faces, where the weight is negligible.
    let dens: Vec<f64> = lap
        .iter()
        .zip(f)
        .zip(&s.model().resolved)
        .map(|((l, f), &r)| if r { l * l * (-f).exp() } else { 0.0 })
        .collect();
    s.integrate(&dens) / (2.0 * n as f64 * two_pi_n(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstVariation {
    /// Fourth-order central difference of `ε ↦ λ(ψ + εδψ)` at 0.
    pub lhs: f64,
    /// `−(2π)^{-n}∫⟨δg, Ric − g + ∇²f⟩ e^{−f} dV`.
    pub rhs: f64,
    /// [`trace_form_bound`] at the base metric.
    pub trace_bound: f64,
}

/// Compares the derivative of `λ` along `ψ + εδψ` with the pairing formula.
///
/// With `δg = D²δψ (dx dx + dθ dθ)`, only the `(1,1)` part of
/// `Ric − g + ∇²f`, `½D²(h + f)` on both blocks, pairs with `δg`:
/// `⟨δg, ·⟩ = tr((D²ψ)⁻¹ D²δψ (D²ψ)⁻¹ D²(h + f))`.
pub fn lambda_first_variation_check(
    s: &MetricSnapshot,
    minimizer: &WMinimizer,
    dpsi: &[f64],
    eps: f64,
    opts: &EntropyOptions,
) -> Result<FirstVariation> {
    let n = s.dim();
    if dpsi.iter().all(|x| *x == 0.0) {
        return Ok(FirstVariation { lhs: 0.0, rhs: 0.0, trace_bound: trace_form_bound(s, &minimizer.f) });
    }
    let side = |sign: f64| -> Result<f64> {
        let delta: Vec<f64> = s.grid.delta.iter().zip(dpsi).map(|(d, p)| d + sign * eps * p).collect();
        let snap = crate::snapshot::assemble_snapshot(&s.grid.with_delta(delta))?;
        Ok(minimize_w(&snap, Init::V(minimizer.v.clone()), opts)?.lambda)
    };
    let lhs = (8.0 * (side(1.0)? - side(-1.0)?) - (side(2.0)? - side(-2.0)?)) / (12.0 * eps);
    let st = &s.model().stencils;
    let d2p = st.hessian(dpsi, crate::fd::Reflect::Smooth);
    let hf: Vec<f64> = s.h.iter().zip(&minimizer.f).map(|(a, b)| a + b).collect();
    let d2f = st.hessian(&hf, crate::fd::Reflect::Smooth);
    let dens: Vec<f64> = (0..s.len())
        .map(|i| {
            let a = &s.inv[i].a;
            // tr(A P A Q)
            let mut ap = [[0.0; 3]; 3];
            let mut aq = [[0.0; 3]; 3];
            for r in 0..n {
                for c in 0..n {
                    for k in 0..n {
                        ap[r][c] += a[r][k] * d2p[k][c][i];
                        aq[r][c] += a[r][k] * d2f[k][c][i];
                    }
                }
            }
            let mut t = 0.0;
            for r in 0..n {
                for c in 0..n {
                    t += ap[r][c] * aq[c][r];
                }
            }
            t * (-minimizer.f[i]).exp()
        })
        .collect();
    let rhs = -s.integrate(&dens) / two_pi_n(n);
    Ok(FirstVariation { lhs, rhs, trace_bound: trace_form_bound(s, &minimizer.f) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackwardSample {
    pub t: f64,
    /// `W(g_t, f_{t₀}(t))`.
    pub w: f64,
    /// `(∫e^{−f} dV − V_h)/V_h` before the per-step renormalization.
    pub normalization_defect: f64,
    pub f_c0: f64,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackwardHeatPath {
    pub t0: f64,
    pub dt: f64,
    /// From `t₀` down to `t₀ − 1`.
    pub samples: Vec<BackwardSample>,
    pub lambda_t0: f64,
    pub lambda_t0_minus_1: f64,
    /// Largest `W(t_k) − W(t_{k+1})` over consecutive samples in increasing
    /// time; nonpositive when `W` is nondecreasing.
    pub worst_decrease: f64,
    /// Largest normalization defect seen over all steps.
    pub worst_defect: f64,
}

impl BackwardHeatPath {
    /// `λ(t₀) − λ(t₀−1)`.
    pub fn lambda_gap(&self) -> f64 {
        self.lambda_t0 - self.lambda_t0_minus_1
    }

    /// `W(g_{t₀}, f(t₀)) − W(g_{t₀−1}, f(t₀−1))`.
    pub fn w_gap(&self) -> f64 {
        self.samples[0].w - self.samples.last().expect("samples").w
    }
}

/// Largest allowed distance between checkpoints.
pub const MAX_CHECKPOINT_GAP: f64 = 0.1;

/// Solves `∂f/∂t = ½(−Δf + |∇f|² − Δh) + ½⟨c, ∂_x f⟩` backwards from the
/// minimizer at `t₀` down to `t₀ − 1` on the metrics of `trace`.
///
/// In `τ = t₀ − t` each step is linearly implicit in the divergence-form
/// Laplacian: `(W + ½dτ K) f⁺ = W f − dτ W(½|∇f|² + ½⟨c, ∂_x f⟩) − ½dτ K h`,
/// with `W = diag(w)`, on the metric at the new time (linear in time
/// between checkpoints), followed by renormalization.
pub fn backward_heat(trace: &crate::flow::FlowTrace, t0: f64, dt: f64, opts: &EntropyOptions) -> Result<BackwardHeatPath> {
    if t0 < 1.0 {
        return Err(LabError::Invalid("t₀ must be at least 1".into()));
    }
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(LabError::Invalid("backward step must lie in (0, 0.1]".into()));
    }
    let cps: Vec<f64> = trace
        .checkpoints
        .iter()
        .map(|c| c.t)
        .filter(|t| *t >= t0 - 1.0 - 1e-9 && *t <= t0 + 1e-9)
        .collect();
    if cps.is_empty() || cps[0] > t0 - 1.0 + 1e-9 || *cps.last().expect("nonempty") < t0 - 1e-9 {
        return Err(LabError::InsufficientCadence(format!("checkpoints do not cover [{}, {t0}]", t0 - 1.0)));
    }
    if let Some(gap) = cps.windows(2).map(|w| w[1] - w[0]).reduce(f64::max) {
        if gap > MAX_CHECKPOINT_GAP + 1e-9 {
            return Err(LabError::InsufficientCadence(format!(
                "checkpoint gap {gap} exceeds {MAX_CHECKPOINT_GAP}"
            )));
        }
    }
    let steps = (1.0 / dt).round() as usize;
    let h = 1.0 / steps as f64;
    let record_every = ((cps.get(1).map_or(0.05, |c| c - cps[0])) / h).round().max(1.0) as usize;
    let c = trace.model.extremal.c.clone();
    let n = trace.model.dim();

    let snap = crate::snapshot::assemble_snapshot(&trace.grid_at(t0)?)?;
    let form = GradientForm::new(&snap);
    let top = minimize_w_with(&snap, &form, Init::Warm, opts)?;
    let mut f = top.f.clone();
    let mut samples = vec![BackwardSample {
        t: t0,
        w: w_functional_with(&snap, &form, &f)?,
        normalization_defect: normalization_defect(&snap, &f),
        f_c0: MetricSnapshot::sup(&f),
        f: f.clone(),
    }];
    let mut worst_defect: f64 = 0.0;
    let mut last = (snap, form);
    for k in 1..=steps {
        let t = t0 - k as f64 * h;
        let s = crate::snapshot::assemble_snapshot(&trace.grid_at(t.max(t0 - 1.0))?)?;
        let form = GradientForm::new(&s);
        let g2 = s.gradient_sq(&f);
        let grad = s.gradient(&f);
        let kh = form.apply(&s.h);
        let rhs: Vec<f64> = (0..s.len())
            .map(|i| {
                let drift: f64 = (0..n).map(|a| c[a] * grad[a][i]).sum();
                s.weight[i] * (f[i] - h * 0.5 * (g2[i] + drift)) - 0.5 * h * kh[i]
            })
            .collect();
        let mut rows = form.rows();
        for (i, r) in rows.iter_mut().enumerate() {
            r.iter_mut().for_each(|e| e.1 *= 0.5 * h);
            r.push((i, s.weight[i]));
        }
        f = Banded::from_rows(&rows).factor()?.solve(&rhs);
        let defect = normalization_defect(&s, &f);
        worst_defect = worst_defect.max(defect.abs());
        f = normalize_f(&s, &f);
        if k % record_every == 0 || k == steps {
            samples.push(BackwardSample {
                t,
                w: w_functional_with(&s, &form, &f)?,
                normalization_defect: defect,
                f_c0: MetricSnapshot::sup(&f),
                f: f.clone(),
            });
        }
        last = (s, form);
    }
    let (s_bottom, form_bottom) = last;
    let bottom = minimize_w_with(&s_bottom, &form_bottom, Init::F(f.clone()), opts)?;
    let worst_decrease = samples.windows(2).map(|w| w[1].w - w[0].w).fold(f64::NEG_INFINITY, f64::max);
    Ok(BackwardHeatPath {
        t0,
        dt: h,
        samples,
        lambda_t0: top.lambda,
        lambda_t0_minus_1: bottom.lambda,
        worst_decrease,
        worst_defect,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLevel {
    pub estimate: f64,
    /// `(2π)^{-n}[nV − N_X]`.
    pub target: f64,
    pub gap: f64,
    /// Largest `|Δλ|` between consecutive samples in the last quarter.
    pub tail_increment: f64,
}

/// Largest `λ` increment allowed in the last quarter of a trace.
pub const PLATEAU_TOL: f64 = 1e-5;

/// `L(g) = lim λ(g_t)` from the tail of `trace`, with Aitken extrapolation
/// over the last three of five equally spaced tail samples.
pub fn energy_level(trace: &crate::flow::FlowTrace) -> Result<EnergyLevel> {
    let lam = trace.lambdas();
    if lam.len() < 5 {
        return Err(LabError::MissingData("energy level needs at least five λ samples".into()));
    }
    let t_end = lam.last().expect("nonempty").0;
    let t_start = lam[0].0;
    let quarter: Vec<&(f64, f64)> = lam.iter().filter(|(t, _)| *t >= t_end - 0.25 * (t_end - t_start)).collect();
    let tail_increment = quarter.windows(2).map(|w| (w[1].1 - w[0].1).abs()).fold(0.0, f64::max);
    let target = trace.model.extremal.sup_lambda_bound;
    if tail_increment > PLATEAU_TOL {
        return Err(LabError::NotConverged(format!(
            "λ still moves by {tail_increment:.2e} per sample in the last quarter"
        )));
    }
    let k = quarter.len() - 1;
    let (a, b, c) = (quarter[k - 2 * (k / 2)].1, quarter[k - k / 2].1, quarter[k].1);
    let den = (c - b) - (b - a);
    let estimate = if den.abs() > 1e-14 && ((c - b) / (b - a)).abs() < 1.0 && (b - a).abs() > 1e-13 {
        c - (c - b) * (c - b) / den
    } else {
        c
    };
    Ok(EnergyLevel { estimate, target, gap: estimate - target, tail_increment })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizerBoundsReport {
    /// `(t, ‖f‖, ‖∇f‖, ‖Δf‖, ‖f+h‖, ‖∇(f+h)‖, ‖f+θ_X‖)`.
    pub series: Vec<[f64; 7]>,
    /// Every norm stays below ten times its initial value.
    pub bounded: bool,
    /// `‖f + h‖` and `‖f + θ_X‖` at the end of the trace.
    pub final_f_plus_h: f64,
    pub final_f_plus_theta: f64,
}

pub fn minimizer_bounds_monitor(trace: &crate::flow::FlowTrace) -> MinimizerBoundsReport {
    let series: Vec<[f64; 7]> = trace
        .samples
        .iter()
        .filter_map(|s| {
            s.minimizer.as_ref().map(|m| {
                [s.t, m.f_c0, m.grad_f, m.lap_f, m.f_plus_h_c0, m.grad_f_plus_h, m.f_plus_theta_c0]
            })
        })
        .collect();
    let bounded = match series.first() {
        None => true,
        Some(first) => series
            .iter()
            .all(|row| (1..4).all(|k| row[k] <= crate::flow::MONITOR_FACTOR * first[k])),
    };
    let last = series.last().copied().unwrap_or([0.0; 7]);
    MinimizerBoundsReport { series, bounded, final_f_plus_h: last[4], final_f_plus_theta: last[6] }
}
