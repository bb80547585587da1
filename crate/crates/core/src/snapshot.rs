//! Derived geometry of a potential grid.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fd::Reflect;
use crate::grid::{GridSpec, PotentialGrid, ToricModel};
use crate::invariants::TorusField;
use crate::io;
use crate::polytope::{self, Polytope};
use crate::small::Mat3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotOptions {
    /// Largest allowed `|∫dV − V| / V`.
    pub calibration_tol: f64,
}

impl Default for SnapshotOptions {
    fn default() -> Self {
        SnapshotOptions { calibration_tol: 1e-4 }
    }
}

/// Normalization and consistency figures measured at assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    /// `(∫dV − V)/V` with `V` from the polytope.
    pub volume_error: f64,
    /// `(∫e^h dV − V)/V`.
    pub eh_error: f64,
    /// `(∫e^{θ_X} dV − V)/V`.
    pub etheta_error: f64,
    /// `(∫R dV − 2nV)/(2nV)`.
    pub total_curvature_error: f64,
    /// Share of the volume carried by the two outer layers.
    pub boundary_layer: f64,
}

/// Geometry derived from a [`PotentialGrid`]; immutable once assembled.
#[derive(Clone, Debug)]
pub struct MetricSnapshot {
    pub grid: PotentialGrid,
    pub hess: Vec<Mat3>,
    pub inv: Vec<Mat3>,
    pub det: Vec<f64>,
    pub logdet: Vec<f64>,
    /// `∇ψ`, the moment map.
    pub moment: Vec<[f64; 3]>,
    /// Quadrature weights of `dV`.
    pub weight: Vec<f64>,
    /// `∫ dV` on the grid; all normalizations use this value.
    pub volume: f64,
    /// Ricci potential, `∫ e^h dV = volume`.
    pub h: Vec<f64>,
    pub scalar: Vec<f64>,
    /// `θ_X` for the extremal field of the polytope.
    pub theta_x: Vec<f64>,
    /// `u = h − θ_X`.
    pub u: Vec<f64>,
    pub report: SnapshotReport,
}

pub fn assemble_snapshot(grid: &PotentialGrid) -> Result<MetricSnapshot> {
    assemble_snapshot_with(grid, &SnapshotOptions { calibration_tol: grid.model.calibration_tol })
}

pub fn assemble_snapshot_with(grid: &PotentialGrid, opts: &SnapshotOptions) -> Result<MetricSnapshot> {
    let model = &grid.model;
    let spec = model.spec;
    let n = spec.dim;
    let total = spec.len();
    let hess = grid.hessians();
    for (i, m) in hess.iter().enumerate() {
        if !m.is_positive_definite() {
            return Err(LabError::ConvexityLost {
                node: i,
                x: spec.coords(i),
                detail: format!("det D²ψ = {:.3e}", m.det()),
            });
        }
    }
    let det: Vec<f64> = hess.iter().map(|m| m.det()).collect();
    let inv: Vec<Mat3> = hess.iter().map(|m| m.inverse()).collect();
    let logdet: Vec<f64> = det.iter().map(|d| d.ln()).collect();
    let st = &model.stencils;
    let dgrad = st.gradient(&grid.delta, Reflect::Smooth);
    let moment: Vec<[f64; 3]> = (0..total)
        .map(|i| {
            let mut y = model.grad_ref[i];
            for a in 0..n {
                y[a] += dgrad[a][i];
            }
            y
        })
        .collect();
    let factor = crate::manifold_factor(n) * spec.cell();
    let weight: Vec<f64> = det.iter().map(|d| factor * d).collect();
    let volume: f64 = weight.iter().sum();
    let v_exact = model.volume();
    let volume_error = (volume - v_exact) / v_exact;
    if volume_error.abs() > opts.calibration_tol {
        return Err(LabError::ResolutionInsufficient(format!(
            "∫dV = {volume} differs from V = {v_exact} by {volume_error:.2e} (tolerance {:.0e})",
            opts.calibration_tol
        )));
    }
    let psi = grid.psi();
    let h_raw: Vec<f64> = logdet.iter().zip(&psi).map(|(l, p)| -l - 2.0 * p).collect();
    let h = normalize_exp(&h_raw, &weight, volume);
    let lap_h = laplacian_with(&inv, st, &h, n);
    let scalar: Vec<f64> = lap_h.iter().map(|l| 2.0 * n as f64 + l).collect();
    let field = model.extremal.field();
    let theta_x: Vec<f64> = moment.iter().map(|y| field.theta_at(&y[..n])).collect();
    let u: Vec<f64> = h.iter().zip(&theta_x).map(|(a, b)| a - b).collect();

    let total_r: f64 = weight.iter().zip(&scalar).map(|(w, r)| w * r).sum();
    let total_curvature_error = (total_r - 2.0 * n as f64 * volume) / (2.0 * n as f64 * volume);
    let eh: f64 = weight.iter().zip(&h).map(|(w, h)| w * h.exp()).sum();
    let et: f64 = weight.iter().zip(&theta_x).map(|(w, t)| w * t.exp()).sum();
    let layer: f64 = (0..total).filter(|&i| spec.is_boundary_layer(i, 2)).map(|i| weight[i]).sum();
    let report = SnapshotReport {
        volume_error,
        eh_error: (eh - v_exact) / v_exact,
        etheta_error: (et - v_exact) / v_exact,
        total_curvature_error,
        boundary_layer: layer / v_exact,
    };
    Ok(MetricSnapshot {
        grid: grid.clone(),
        hess,
        inv,
        det,
        logdet,
        moment,
        weight,
        volume,
        h,
        scalar,
        theta_x,
        u,
        report,
    })
}

/// Adds the constant making `∫ e^{f} dV = target`.
pub fn normalize_exp(f: &[f64], weight: &[f64], target: f64) -> Vec<f64> {
    let top = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = weight.iter().zip(f).map(|(w, x)| w * (x - top).exp()).sum();
    let k = target.ln() - top - s.ln();
    f.iter().map(|x| x + k).collect()
}

fn laplacian_with(inv: &[Mat3], st: &crate::fd::Stencils, f: &[f64], n: usize) -> Vec<f64> {
    let d2 = st.hessian(f, Reflect::Smooth);
    (0..f.len())
        .map(|i| {
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    s += inv[i].a[a][b] * d2[a][b][i];
                }
            }
            s
        })
        .collect()
}

impl MetricSnapshot {
    pub fn model(&self) -> &ToricModel {
        &self.grid.model
    }

    pub fn polytope(&self) -> &Polytope {
        &self.grid.model.polytope
    }

    pub fn dim(&self) -> usize {
        self.grid.model.spec.dim
    }

    pub fn spec(&self) -> GridSpec {
        self.grid.model.spec
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    /// `∫_M F dV`, summed in node order.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weight.iter().zip(f).map(|(w, x)| w * x).sum()
    }

    pub fn gradient(&self, f: &[f64]) -> Vec<Vec<f64>> {
        self.model().stencils.gradient(f, Reflect::Smooth)
    }

    /// `|∇f|² = ∇fᵀ (D²ψ)⁻¹ ∇f`.
    pub fn gradient_sq(&self, f: &[f64]) -> Vec<f64> {
        let g = self.gradient(f);
        let n = self.dim();
        (0..f.len())
            .map(|i| {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        s += self.inv[i].a[a][b] * g[a][i] * g[b][i];
                    }
                }
                s
            })
            .collect()
    }

    /// `Δf = tr((D²ψ)⁻¹ D²f)`, the Riemannian Laplacian on invariant functions.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        laplacian_with(&self.inv, &self.model().stencils, f, self.dim())
    }

    /// `⟨b, ∇ψ⟩` at every node.
    pub fn linear_moment(&self, b: &[f64]) -> Vec<f64> {
        self.moment
            .iter()
            .map(|y| b.iter().zip(y.iter()).map(|(b, y)| b * y).sum())
            .collect()
    }

    pub fn theta(&self, field: &TorusField) -> Vec<f64> {
        let n = self.dim();
        self.moment.iter().map(|y| field.theta_at(&y[..n])).collect()
    }

    /// Mean of `f` against `e^{θ_X} dV`.
    pub fn theta_mean(&self, f: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((w, t), x) in self.weight.iter().zip(&self.theta_x).zip(f) {
            let e = w * t.exp();
            num += e * x;
            den += e;
        }
        num / den
    }

    /// Sup norm over all nodes.
    pub fn sup(f: &[f64]) -> f64 {
        f.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sup norm over the resolved nodes ([`ToricModel::resolved`]).
    pub fn sup_resolved(&self, f: &[f64]) -> f64 {
        f.iter()
            .zip(&self.model().resolved)
            .filter(|(_, r)| **r)
            .fold(0.0, |m, (x, _)| m.max(x.abs()))
    }

    /// Sup of `|∇f|` over the resolved nodes.
    pub fn grad_sup(&self, f: &[f64]) -> f64 {
        let g: Vec<f64> = self.gradient_sq(f).iter().map(|x| x.max(0.0).sqrt()).collect();
        self.sup_resolved(&g)
    }

    /// Sup of `|Δf|` over the resolved nodes.
    pub fn lap_sup(&self, f: &[f64]) -> f64 {
        self.sup_resolved(&self.laplacian(f))
    }

    /// `(∫ F² dV / V)^{1/2}`.
    pub fn rms(&self, f: &[f64]) -> f64 {
        let sq: Vec<f64> = f.iter().map(|x| x * x).collect();
        (self.integrate(&sq) / self.volume).sqrt()
    }

    pub fn calibrate(&self, tol: f64) -> Result<CalibrationReport> {
        calibrate(self, tol)
    }

    pub fn to_document(&self) -> SnapshotDocument {
        let n = self.dim();
        let mut fields = vec![
            ("delta".to_string(), io::encode_f64s(&self.grid.delta)),
            ("psi".to_string(), io::encode_f64s(&self.grid.psi())),
            ("det_hess".to_string(), io::encode_f64s(&self.det)),
            ("h".to_string(), io::encode_f64s(&self.h)),
            ("scalar_curvature".to_string(), io::encode_f64s(&self.scalar)),
            ("theta_x".to_string(), io::encode_f64s(&self.theta_x)),
        ];
        for a in 0..n {
            let y: Vec<f64> = self.moment.iter().map(|m| m[a]).collect();
            fields.push((format!("moment_{a}"), io::encode_f64s(&y)));
        }
        SnapshotDocument {
            format: SNAPSHOT_FORMAT.into(),
            layout: "f64 little-endian, base64, axis 0 fastest".into(),
            polytope: self.polytope().to_document(),
            grid: self.spec(),
            volume: self.volume,
            report: self.report.clone(),
            fields: fields.into_iter().collect(),
        }
    }
}

pub const SNAPSHOT_FORMAT: &str = "kahler-lab/snapshot/1";

/// Text form of a snapshot. Every field is a base64 string of little-endian
/// `f64` values in node order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotDocument {
    pub format: String,
    pub layout: String,
    pub polytope: polytope::PolytopeDocument,
    pub grid: GridSpec,
    pub volume: f64,
    pub report: SnapshotReport,
    pub fields: std::collections::BTreeMap<String, String>,
}

impl SnapshotDocument {
    /// Rebuilds the potential grid; the geometry is reassembled from `delta`.
    pub fn to_grid(&self) -> Result<PotentialGrid> {
        if self.format != SNAPSHOT_FORMAT {
            return Err(LabError::Parse(format!("unknown snapshot format `{}`", self.format)));
        }
        let p = Polytope::from_document(&self.polytope)?;
        let model = ToricModel::new(p, self.grid.half_width, self.grid.resolution)?;
        let delta = io::decode_f64s(
            self.fields
                .get("delta")
                .ok_or_else(|| LabError::Parse("snapshot lacks the `delta` field".into()))?,
        )?;
        if delta.len() != model.spec.len() {
            return Err(LabError::Parse("`delta` has the wrong length".into()));
        }
        Ok(PotentialGrid { model, delta })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Pinned constants of `|∇f|²`, `Δf` and the first-order correction.
    pub kappa_g: f64,
    pub kappa_delta: f64,
    pub kappa_c: f64,
    /// Ratio of `|∂̄f|²`-type norms to `gradient_sq`.
    pub kappa_pair: f64,
    /// `−∫|∇θ|²e^θ / ∫Δθ e^θ` fitted from the weighted identity (ideal 1).
    pub fitted_ratio: f64,
    /// `(∫R dV − 2nV)/(2nV)`.
    pub total_curvature_error: f64,
    /// `|∫ Δf k dV + ∫⟨∇f,∇k⟩ dV| / ∫|∇f||∇k| dV`.
    pub self_adjoint_residual: f64,
    /// `|∫(Δθ_b + |∇θ_b|²)e^{θ_b} dV| / V` for `b = e₁, 2e₁`.
    pub weighted_residuals: Vec<f64>,
}

/// Checks the three operator identities with `κ_g = κ_Δ = 1`, `κ_c = 0`.
pub fn calibrate(snap: &MetricSnapshot, tol: f64) -> Result<CalibrationReport> {
    let n = snap.dim();
    let p = snap.polytope();
    let f: Vec<f64> = snap.moment.iter().map(|y| y[0]).collect();
    let k: Vec<f64> = snap.moment.iter().map(|y| y[0] * y[0] + y[n - 1]).collect();
    let lap_f = snap.laplacian(&f);
    let gf = snap.gradient(&f);
    let gk = snap.gradient(&k);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut scale = 0.0;
    for i in 0..snap.len() {
        let mut dot = 0.0;
        let mut ff = 0.0;
        let mut kk = 0.0;
        for a in 0..n {
            for b in 0..n {
                let ai = snap.inv[i].a[a][b];
                dot += ai * gf[a][i] * gk[b][i];
                ff += ai * gf[a][i] * gf[b][i];
                kk += ai * gk[a][i] * gk[b][i];
            }
        }
        lhs += snap.weight[i] * lap_f[i] * k[i];
        rhs += snap.weight[i] * dot;
        scale += snap.weight[i] * (ff * kk).sqrt();
    }
    let self_adjoint_residual = (lhs + rhs).abs() / scale;
    let mut weighted_residuals = Vec::new();
    let mut num = 0.0;
    let mut den = 0.0;
    for s in [1.0, 2.0] {
        let mut b = vec![0.0; n];
        b[0] = s;
        let field = TorusField::new(p, &b);
        let theta = snap.theta(&field);
        let lap = snap.laplacian(&theta);
        let g2 = snap.gradient_sq(&theta);
        let e: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let a1: f64 = (0..snap.len()).map(|i| snap.weight[i] * lap[i] * e[i]).sum();
        let a2: f64 = (0..snap.len()).map(|i| snap.weight[i] * g2[i] * e[i]).sum();
        weighted_residuals.push((a1 + a2).abs() / snap.volume);
        num += a2;
        den += a1;
    }
    let report = CalibrationReport {
        kappa_g: 1.0,
        kappa_delta: 1.0,
        kappa_c: 0.0,
        kappa_pair: 2.0,
        fitted_ratio: -num / den,
        total_curvature_error: snap.report.total_curvature_error,
        self_adjoint_residual,
        weighted_residuals,
    };
    let worst = report
        .weighted_residuals
        .iter()
        .cloned()
        .fold(report.self_adjoint_residual, f64::max);
    if worst > tol {
        return Err(LabError::OperatorConvention(format!(
            "calibration identities fail: self-adjoint {:.2e}, weighted {:?} (tolerance {tol:.0e})",
            report.self_adjoint_residual, report.weighted_residuals
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WBoundCheck {
    /// `W(g, −θ_X)` by quadrature.
    pub direct: f64,
    /// `(2π)^{-n}[nV − N_X]`.
    pub closed_form: f64,
    pub relative_error: f64,
}

/// Compares `W(g, −θ_c)` with `(2π)^{-n}[nV − N_c]`; errors above `tol`.
pub fn w_bound_check(snap: &MetricSnapshot, c: &TorusField, tol: f64) -> Result<WBoundCheck> {
    let p = snap.polytope();
    let n = p.dim;
    let theta = snap.theta(c);
    let f: Vec<f64> = theta.iter().map(|t| -t).collect();
    let f = crate::entropy::normalize_f(snap, &f);
    let direct = crate::entropy::w_functional(snap, &f)?;
    let v = p.volume().1;
    let n_c = crate::invariants::invariant_n(p, &c.b);
    let closed_form = (n as f64 * v - n_c) / (2.0 * std::f64::consts::PI).powi(n as i32);
    let relative_error = (direct - closed_form).abs() / closed_form.abs();
    if relative_error > tol {
        return Err(LabError::IdentityBroken(format!(
            "W(g, −θ) = {direct} but (2π)^-n (nV − N) = {closed_form}"
        )));
    }
    Ok(WBoundCheck { direct, closed_form, relative_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::reference_potential;

    #[test]
    fn round_sphere_is_einstein() {
        let p = Polytope::catalog("cp1").unwrap();
        let g = reference_potential(&p, 8.0, 257).unwrap();
        let s = assemble_snapshot(&g).unwrap();
        assert!(MetricSnapshot::sup(&s.h) < 1e-6, "h sup {}", MetricSnapshot::sup(&s.h));
        let r_err = s.scalar.iter().map(|r| (r - 2.0).abs()).fold(0.0, f64::max);
        assert!(r_err < 1e-4, "R error {r_err}");
        assert!(s.report.volume_error.abs() < 1e-6);
        assert!(s.theta_x.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn operator_identities_hold_on_reference_metrics() {
        for (name, m) in [("cp1", 257), ("cp2", 257), ("cp1xcp1", 129), ("bl1cp2", 257)] {
            let p = Polytope::catalog(name).unwrap();
            let s = assemble_snapshot(&reference_potential(&p, 8.0, m).unwrap()).unwrap();
            let c = s.calibrate(1e-4).unwrap();
            assert!((c.fitted_ratio - 1.0).abs() < 1e-4, "{name}: {}", c.fitted_ratio);
            let r = s.report.total_curvature_error;
            assert!(r.abs() < 1e-5, "{name}: {r}");
        }
    }

    #[test]
    fn document_round_trip_restores_the_potential() {
        let p = Polytope::catalog("cp1").unwrap();
        let g = reference_potential(&p, 6.0, 64).unwrap();
        let s = assemble_snapshot(&g).unwrap();
        let text = serde_json::to_string(&s.to_document()).unwrap();
        let doc: SnapshotDocument = serde_json::from_str(&text).unwrap();
        let back = doc.to_grid().unwrap();
        assert_eq!(back.delta, g.delta);
    }
}
