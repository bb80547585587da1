//! The extremal field and the invariants built from it.
//!
//! For a torus field `b` the normalized potential is
//! `θ_b = ⟨b, ∇ψ⟩ + a_b` with `a_b = log(Vol(Δ) / ∫_Δ e^{⟨b,y⟩} dy)`, so
//! `∫ e^{θ_b} dV = V` on every metric. Two identities hold for every toric
//! metric and are used throughout:
//!
//! * `∫ ⟨b′, ∇ψ⟩ e^{h} dV = 0`, hence `H(b) = ∫ θ_b e^{h} dV = a_b V`;
//! * `F̃_b(b′) = −n!(2π)^n e^{a_b} ∫_Δ ⟨b′,y⟩ e^{⟨b,y⟩} dy`.
//!
//! The extremal field `c` minimizes `Φ(c) = ∫_Δ e^{⟨c,y⟩} dy`, equivalently
//! maximizes `H`, and `N_c = a_c V`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::polytope::Polytope;
use crate::quadrature::weighted_moment_integrals;
use crate::snapshot::MetricSnapshot;
use crate::small::solve_dense;

/// A field in the Lie algebra of the real torus, with its normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusField {
    pub b: Vec<f64>,
    pub a: f64,
}

impl TorusField {
    pub fn new(p: &Polytope, b: &[f64]) -> TorusField {
        TorusField { b: b.to_vec(), a: theta_normalizer(p, b) }
    }

    pub fn zero(dim: usize) -> TorusField {
        TorusField { b: vec![0.0; dim], a: 0.0 }
    }

    /// `θ_b` at a point with moment coordinates `y`.
    pub fn theta_at(&self, y: &[f64]) -> f64 {
        self.b.iter().zip(y).map(|(b, y)| b * y).sum::<f64>() + self.a
    }
}

pub fn theta_normalizer(p: &Polytope, b: &[f64]) -> f64 {
    let r = weighted_moment_integrals(p, b);
    p.volume().0.ln() - r.phi.ln() - r.log_offset
}

/// `N_b = ∫ θ_b e^{θ_b} dV`, independent of the metric.
pub fn invariant_n(p: &Polytope, b: &[f64]) -> f64 {
    let r = weighted_moment_integrals(p, b);
    let (vol, v) = p.volume();
    let a = vol.ln() - r.phi.ln() - r.log_offset;
    a * v + crate::manifold_factor(p.dim) * vol * r.linear_weighted / r.phi
}

/// `H(b) = a_b V` from polytope data alone.
pub fn h_polytope(p: &Polytope, b: &[f64]) -> f64 {
    theta_normalizer(p, b) * p.volume().1
}

/// `F̃_b(b′)` from polytope data alone; equals the derivative of `H` at `b`
/// in direction `b′`.
pub fn futaki_polytope(p: &Polytope, b: &[f64], b_prime: &[f64]) -> f64 {
    let r = weighted_moment_integrals(p, b);
    let proj: f64 = r.grad.iter().zip(b_prime).map(|(g, d)| g * d).sum();
    -p.volume().1 * proj / r.phi
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HSample {
    pub b: Vec<f64>,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub polytope: String,
    pub c: Vec<f64>,
    pub a_c: f64,
    #[serde(rename = "N_X")]
    pub n_x: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub vol_delta: f64,
    pub sup_lambda_bound: f64,
    /// `∫_Δ y e^{⟨c,y⟩} dy` at the returned `c`.
    pub futaki_residual: Vec<f64>,
    /// Gradient norms of the Newton iterates.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    #[serde(rename = "H_values")]
    pub h_values: Vec<HSample>,
}

impl InvariantReport {
    pub fn field(&self) -> TorusField {
        TorusField { b: self.c.clone(), a: self.a_c }
    }
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX: usize = 100;

/// Damped Newton on `log Φ`; stops when `‖∫_Δ y e^{⟨c,y⟩}‖ ≤ 1e-10 Vol(Δ)`.
pub fn extremal_field(p: &Polytope) -> Result<InvariantReport> {
    let n = p.dim;
    let (vol, v) = p.volume();
    let mut c = vec![0.0; n];
    let mut residuals = Vec::new();
    let mut iterations = 0;
    loop {
        let r = weighted_moment_integrals(p, &c);
        let scale = r.log_offset.exp();
        let res = r.grad.iter().map(|g| (g * scale).powi(2)).sum::<f64>().sqrt();
        residuals.push(res);
        if res <= NEWTON_TOL * vol {
            break;
        }
        if iterations == NEWTON_MAX {
            return Err(LabError::NewtonFailed { iterations, residual: res, last: c });
        }
        iterations += 1;
        let mean: Vec<f64> = r.grad.iter().map(|g| g / r.phi).collect();
        let cov: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| r.hess[i][j] / r.phi - mean[i] * mean[j]).collect())
            .collect();
        let step = solve_dense(cov, mean.iter().map(|g| -g).collect())
            .ok_or_else(|| LabError::Singular("moment covariance".into()))?;
        let f0 = r.phi.ln() + r.log_offset;
        let slope: f64 = mean.iter().zip(&step).map(|(g, s)| g * s).sum();
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = c.iter().zip(&step).map(|(c, s)| c + t * s).collect();
            let rt = weighted_moment_integrals(p, &trial);
            let ft = rt.phi.ln() + rt.log_offset;
            if ft <= f0 + 1e-4 * t * slope || t < 1e-12 {
                c = trial;
                break;
            }
            t *= 0.5;
        }
    }
    let r = weighted_moment_integrals(p, &c);
    let scale = r.log_offset.exp();
    let a_c = theta_normalizer(p, &c);
    let n_x = invariant_n(p, &c);
    let h_values = sample_h(p, &c);
    Ok(InvariantReport {
        polytope: p.canonical_json(),
        c: c.clone(),
        a_c,
        n_x,
        v,
        vol_delta: vol,
        sup_lambda_bound: (n as f64 * v - n_x) / (2.0 * std::f64::consts::PI).powi(n as i32),
        futaki_residual: r.grad.iter().map(|g| g * scale).collect(),
        residuals,
        iterations,
        h_values,
    })
}

/// `H` along the segment from 0 to 2c and along each axis, for the report.
fn sample_h(p: &Polytope, c: &[f64]) -> Vec<HSample> {
    let mut out = Vec::new();
    for k in 0..=4 {
        let b: Vec<f64> = c.iter().map(|x| x * k as f64 * 0.5).collect();
        out.push(HSample { h: h_polytope(p, &b), b });
    }
    for a in 0..p.dim {
        for s in [-0.5, 0.5] {
            let mut b = c.to_vec();
            b[a] += s;
            out.push(HSample { h: h_polytope(p, &b), b });
        }
    }
    out
}

/// Minimizer of `t ↦ ∫_Δ e^{t⟨d,y⟩} dy` by bisection on its derivative.
pub fn extremal_on_line(p: &Polytope, d: &[f64]) -> f64 {
    let slope = |t: f64| {
        let b: Vec<f64> = d.iter().map(|x| t * x).collect();
        let r = weighted_moment_integrals(p, &b);
        r.grad.iter().zip(d).map(|(g, x)| g * x).sum::<f64>() / r.phi
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while slope(lo) > 0.0 {
        lo *= 2.0;
    }
    while slope(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn same_polytope(p: &Polytope, snap: &MetricSnapshot) -> Result<()> {
    if snap.polytope().canonical_json() != p.canonical_json() {
        return Err(LabError::Invalid("snapshot was built over a different polytope".into()));
    }
    Ok(())
}

/// `F̃_b(b′) = ∫ θ_{b′} e^{h} dV − ∫ θ_{b′} e^{θ_b} dV` on the snapshot.
pub fn futaki_modified(p: &Polytope, snap: Option<&MetricSnapshot>, b: &TorusField, b_prime: &[f64]) -> Result<f64> {
    let snap = snap.ok_or_else(|| {
        LabError::MissingData("modified Futaki invariant needs a metric snapshot".into())
    })?;
    same_polytope(p, snap)?;
    let lin = snap.linear_moment(b_prime);
    let theta = snap.theta(b);
    let eh: Vec<f64> = lin.iter().zip(&snap.h).map(|(l, h)| l * h.exp()).collect();
    let et: Vec<f64> = lin.iter().zip(&theta).map(|(l, t)| l * t.exp()).collect();
    Ok(snap.integrate(&eh) - snap.integrate(&et))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HEvaluation {
    /// `∫ θ_b e^{h} dV` on the snapshot.
    pub direct: f64,
    /// `a_b V` from the polytope.
    pub closed_form: f64,
    /// `|direct − closed_form| / (|H| + ‖b‖V)`.
    pub discrepancy: f64,
}

/// Both evaluations of `H(b)`; errors when they differ by more than `1e-4`
/// relative. Returns the direct value in `direct`.
pub fn h_functional(p: &Polytope, snap: &MetricSnapshot, b: &[f64]) -> Result<HEvaluation> {
    same_polytope(p, snap)?;
    let field = TorusField::new(p, b);
    let theta = snap.theta(&field);
    let integrand: Vec<f64> = theta.iter().zip(&snap.h).map(|(t, h)| t * h.exp()).collect();
    let direct = snap.integrate(&integrand);
    let v = p.volume().1;
    let closed_form = field.a * v;
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = closed_form.abs() + norm_b * v;
    let discrepancy = if scale > 0.0 { (direct - closed_form).abs() / scale } else { (direct - closed_form).abs() };
    if discrepancy > 1e-4 {
        return Err(LabError::NormalizationInconsistency(format!(
            "H({b:?}): direct integral {direct} vs a_b V = {closed_form}"
        )));
    }
    Ok(HEvaluation { direct, closed_form, discrepancy })
}

/// Maximizes `H` by ascent with gradients `F̃_b(e_k)` measured on the snapshot.
/// Cross-check for [`extremal_field`].
pub fn h_ascent(p: &Polytope, snap: &MetricSnapshot, tol: f64) -> Result<Vec<f64>> {
    let n = p.dim;
    let v = p.volume().1;
    let grad = |b: &[f64]| -> Result<Vec<f64>> {
        let f = TorusField::new(p, b);
        (0..n)
            .map(|k| {
                let mut e = vec![0.0; n];
                e[k] = 1.0;
                futaki_modified(p, Some(snap), &f, &e)
            })
            .collect()
    };
    let mut b = vec![0.0; n];
    let mut g = grad(&b)?;
    let mut step = 1.0 / v;
    for _ in 0..500 {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= tol * v {
            return Ok(b);
        }
        let next: Vec<f64> = b.iter().zip(&g).map(|(b, g)| b + step * g).collect();
        let gn = grad(&next)?;
        let s: Vec<f64> = next.iter().zip(&b).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        // Concave ascent: sᵀy < 0, Barzilai-Borwein length ss/|sy|.
        if sy < 0.0 {
            step = ss / -sy;
        }
        b = next;
        g = gn;
    }
    Err(LabError::NotConverged("H ascent did not reach tolerance".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionSample {
    pub b: Vec<f64>,
    pub futaki_self: f64,
    #[serde(rename = "N_Y")]
    pub n_y: f64,
    /// `(2π)^{-n}[nV − F̃_Y(Y) − N_Y]`
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionReport {
    pub polytope: String,
    pub sup_h: f64,
    pub samples: Vec<ObstructionSample>,
    pub best_bound: f64,
    pub seed: u64,
    pub lambda_estimate: Option<f64>,
    pub lambda_within_best_bound: Option<bool>,
}

/// Bounds on `sup λ` over a sample of fields: `Y = 0`, `Y = X` and `count`
/// seeded random fields in `[−1, 1]^n`.
pub fn obstruction_report(
    p: &Polytope,
    snap: &MetricSnapshot,
    count: usize,
    seed: u64,
    lambda_estimate: Option<f64>,
) -> Result<ObstructionReport> {
    let ext = extremal_field(p)?;
    let n = p.dim;
    let v = p.volume().1;
    let two_pi_n = (2.0 * std::f64::consts::PI).powi(n as i32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fields = vec![vec![0.0; n], ext.c.clone()];
    for _ in 0..count {
        fields.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let mut samples = Vec::with_capacity(fields.len());
    for b in fields {
        let f = TorusField::new(p, &b);
        let futaki_self = futaki_modified(p, Some(snap), &f, &b)?;
        let n_y = invariant_n(p, &b);
        let bound = (n as f64 * v - futaki_self - n_y) / two_pi_n;
        samples.push(ObstructionSample { b, futaki_self, n_y, bound });
    }
    let best_bound = samples.iter().map(|s| s.bound).fold(f64::INFINITY, f64::min);
    Ok(ObstructionReport {
        polytope: p.canonical_json(),
        sup_h: ext.n_x,
        samples,
        best_bound,
        seed,
        lambda_estimate,
        lambda_within_best_bound: lambda_estimate.map(|l| l <= best_bound + 1e-9 * best_bound.abs()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_examples() {
        let p = Polytope::catalog("cp1").unwrap();
        assert_eq!(theta_normalizer(&p, &[0.0]), 0.0);
        assert!((theta_normalizer(&p, &[1.0]) + 1f64.sinh().ln()).abs() < 1e-14);
    }

    #[test]
    fn n_on_interval_matches_closed_form() {
        let p = Polytope::catalog("cp1").unwrap();
        let a = -1f64.sinh().ln();
        let e = std::f64::consts::E;
        let expected = 2.0 * std::f64::consts::PI * a.exp() * (2.0 / e + a * (e - 1.0 / e));
        assert!((invariant_n(&p, &[1.0]) - expected).abs() < 1e-13);
        assert_eq!(invariant_n(&p, &[0.0]), 0.0);
    }

    #[test]
    fn symmetric_polytopes_have_zero_extremal_field() {
        for name in ["cp1", "cp2", "cp1xcp1"] {
            let r = extremal_field(&Polytope::catalog(name).unwrap()).unwrap();
            assert!(r.c.iter().all(|x| x.abs() < 1e-8), "{name}: {:?}", r.c);
            assert!(r.n_x.abs() < 1e-9);
        }
    }

    #[test]
    fn blowup_extremal_field_is_diagonal_and_n_positive() {
        let p = Polytope::catalog("bl1cp2").unwrap();
        let r = extremal_field(&p).unwrap();
        assert!((r.c[0] - r.c[1]).abs() < 1e-10);
        let t = extremal_on_line(&p, &[1.0, 1.0]);
        assert!((r.c[0] - t).abs() < 1e-8, "{} vs {t}", r.c[0]);
        assert!(r.n_x > 0.0);
        let res = r.futaki_residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(res <= 1e-10 * r.vol_delta);
        // Quadratic convergence near the root.
        let k = r.residuals.len();
        if k >= 3 && r.residuals[k - 2] > 1e-14 {
            let ratio = r.residuals[k - 1] / r.residuals[k - 2].powi(2);
            assert!(ratio < 1e3, "ratio {ratio}");
        }
    }

    #[test]
    fn n_equals_h_at_the_extremal_field() {
        let p = Polytope::catalog("bl1cp2").unwrap();
        let r = extremal_field(&p).unwrap();
        assert!((h_polytope(&p, &r.c) - r.n_x).abs() < 1e-10 * r.v);
        let b = [0.3, -0.1];
        let eps = 1e-5;
        for d in [[1.0, 0.0], [0.0, 1.0]] {
            let plus: Vec<f64> = b.iter().zip(&d).map(|(x, y)| x + eps * y).collect();
            let minus: Vec<f64> = b.iter().zip(&d).map(|(x, y)| x - eps * y).collect();
            let fd = (h_polytope(&p, &plus) - h_polytope(&p, &minus)) / (2.0 * eps);
            let exact = futaki_polytope(&p, &b, &d);
            assert!((fd - exact).abs() < 1e-6 * exact.abs().max(1.0));
        }
    }
    #[test]
    fn normalizer_obeys_jensen_and_is_positive_on_the_blowup() {
        // a_b = log Vol − log ∫ e^⟨b,y⟩ ≤ −⟨b, ȳ⟩ with ȳ the barycenter.
        let p = Polytope::catalog("bl1cp2").unwrap();
        let bary = weighted_moment_integrals(&p, &[0.0, 0.0]);
        let ybar: Vec<f64> = bary.grad.iter().map(|g| g / bary.phi).collect();
        for b in [[0.5, 0.5], [-1.0, 0.3], [2.0, -1.5]] {
            let bound = -(b[0] * ybar[0] + b[1] * ybar[1]);
            assert!(theta_normalizer(&p, &b) <= bound + 1e-12);
        }
        // a_X = N_X / V > 0, so a_X ≤ 0 fails here.
        let r = extremal_field(&p).unwrap();
        assert!((r.a_c - r.n_x / r.v).abs() < 1e-12);
        assert!(r.a_c > 0.0);
    }
}
