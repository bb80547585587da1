//! Convex potentials sampled on a box in logarithmic coordinates.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fd::{Reflect, Stencils};
use crate::invariants::{self, InvariantReport};
use crate::polytope::Polytope;
use crate::small::Mat3;

/// Box `[−L, L]^n` with `resolution` nodes per axis, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.resolution - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-axis node indices of flat index `i` (axis 0 fastest).
    pub fn multi_index(&self, mut i: usize) -> [usize; 3] {
        let mut k = [0usize; 3];
        for slot in k.iter_mut().take(self.dim) {
            *slot = i % self.resolution;
            i /= self.resolution;
        }
        k
    }

    pub fn coords(&self, i: usize) -> Vec<f64> {
        let k = self.multi_index(i);
        let h = self.spacing();
        (0..self.dim).map(|a| -self.half_width + k[a] as f64 * h).collect()
    }

    /// Nodes within `layers` of the box boundary.
    pub fn is_boundary_layer(&self, i: usize, layers: usize) -> bool {
        let k = self.multi_index(i);
        (0..self.dim).any(|a| k[a] < layers || k[a] + layers >= self.resolution)
    }

    /// Quadrature weight `h^n` of every node.
    pub fn cell(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }
}

/// Polytope, grid and everything about the reference metric that does not
/// depend on the perturbation.
#[derive(Debug)]
pub struct ToricModel {
    pub polytope: Polytope,
    pub spec: GridSpec,
    pub stencils: Stencils,
    pub extremal: InvariantReport,
    /// Exponent points and rate of the reference potential.
    pub ref_points: Vec<Vec<f64>>,
    pub ref_rate: f64,
    pub psi_ref: Vec<f64>,
    pub grad_ref: Vec<[f64; 3]>,
    pub hess_ref: Vec<Mat3>,
    /// Nodes with `det D²ψ_ref ≥ RESOLVED_FRACTION · max det D²ψ_ref`.
    /// Outside, `(D²ψ)⁻¹` turns roundoff in second differences into errors
    /// above `1e-3` in pointwise derivatives, so derivative sup norms skip them.
    pub resolved: Vec<bool>,
    pub calibration_tol: f64,
}

pub const RESOLVED_FRACTION: f64 = 1e-3;

/// Default largest `|∫dV − V|/V` accepted when assembling a snapshot.
pub const DEFAULT_CALIBRATION: f64 = 1e-4;

impl ToricModel {
    pub fn new(polytope: Polytope, half_width: f64, resolution: usize) -> Result<Arc<ToricModel>> {
        ToricModel::with_calibration(polytope, half_width, resolution, DEFAULT_CALIBRATION)
    }

    /// As [`ToricModel::new`], with the volume calibration tolerance used by
    /// [`crate::snapshot::assemble_snapshot`] on this model.
    pub fn with_calibration(
        polytope: Polytope,
        half_width: f64,
        resolution: usize,
        calibration_tol: f64,
    ) -> Result<Arc<ToricModel>> {
        if !(calibration_tol > 0.0 && calibration_tol < 1.0) {
            return Err(LabError::Invalid("calibration tolerance must lie in (0, 1)".into()));
        }
        if resolution < 16 {
            return Err(LabError::Invalid(format!("resolution {resolution} is below 16")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(LabError::Invalid("box half-width must be positive".into()));
        }
        let dim = polytope.dim;
        let spec = GridSpec { dim, half_width, resolution };
        let total = spec.len();
        let mut psi_ref = Vec::with_capacity(total);
        let mut grad_ref = Vec::with_capacity(total);
        let mut hess_ref = Vec::with_capacity(total);
        let (ref_points, ref_rate) = reference_points(&polytope);
        for i in 0..total {
            let (psi, g, hs) = log_sum_exp(&ref_points, ref_rate, &spec.coords(i));
            psi_ref.push(psi);
            grad_ref.push(g);
            hess_ref.push(hs);
        }
        let extremal = invariants::extremal_field(&polytope)?;
        let signs = diagonal_signs(&polytope);
        let stencils = Stencils::adapted(
            dim,
            resolution,
            spec.spacing(),
            half_width,
            &|x, v| direction_gap(&ref_points, ref_rate, x, v),
            &signs,
        );
        let max_det = hess_ref.iter().map(|h| h.det()).fold(0.0, f64::max);
        let resolved = hess_ref.iter().map(|h| h.det() >= RESOLVED_FRACTION * max_det).collect();
        let model = ToricModel {
            calibration_tol,
            resolved,
            stencils,
            polytope,
            spec,
            extremal,
            ref_points,
            ref_rate,
            psi_ref,
            grad_ref,
            hess_ref,
        };
        model.check_box()?;
        Ok(Arc::new(model))
    }

    /// Rejects boxes whose outer layers still carry a noticeable share of the
    /// volume, or whose moment map leaves the polytope.
    fn check_box(&self) -> Result<()> {
        let (_, v) = self.polytope.volume();
        let factor = crate::manifold_factor(self.spec.dim) * self.spec.cell();
        let mut layer = 0.0;
        for i in 0..self.spec.len() {
            let g = &self.grad_ref[i][..self.spec.dim];
            if !self.polytope.contains(g, 1e-9) {
                return Err(LabError::BoxTooSmall(format!(
                    "moment map leaves the polytope at node {i}"
                )));
            }
            if self.spec.is_boundary_layer(i, 2) {
                layer += factor * self.hess_ref[i].det();
            }
        }
        if layer > BOX_LAYER_LIMIT * v {
            return Err(LabError::BoxTooSmall(format!(
                "outer layers carry {:.2e} of the volume (limit {BOX_LAYER_LIMIT:.0e}); increase the half-width",
                layer / v
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn volume(&self) -> f64 {
        self.polytope.volume().1
    }
}

/// Largest share of `V` allowed in the two outer node layers of a box.
pub const BOX_LAYER_LIMIT: f64 = 1e-3;

/// Points `S` and rate `k` of the reference potential `k⁻¹ log Σ_{m∈S} e^{k⟨x,m⟩}`.
///
/// With `g` the gcd of all vertex differences, `S = Δ ∩ (v₀ + gℤⁿ)` and
/// `k = 2/g`. This is the pull-back of a Fubini-Study metric, smooth and
/// nondegenerate along every divisor. On `CP^1` it is the round metric.
pub fn reference_points(p: &Polytope) -> (Vec<Vec<f64>>, f64) {
    let verts: Vec<Vec<i64>> = p
        .vertices
        .iter()
        .map(|v| v.iter().map(|r| r.to_integer()).collect())
        .collect();
    let mut g = 0i64;
    for v in &verts {
        for (a, b) in v.iter().zip(&verts[0]) {
            g = gcd(g, (a - b).abs());
        }
    }
    let lo: Vec<i64> = (0..p.dim).map(|a| verts.iter().map(|v| v[a]).min().unwrap()).collect();
    let hi: Vec<i64> = (0..p.dim).map(|a| verts.iter().map(|v| v[a]).max().unwrap()).collect();
    let mut points = Vec::new();
    let mut cur = lo.clone();
    loop {
        let congruent = cur.iter().zip(&verts[0]).all(|(a, b)| (a - b).rem_euclid(g) == 0);
        let inside = p
            .facets
            .iter()
            .all(|nu| nu.iter().zip(&cur).map(|(a, b)| a * b).sum::<i64>() >= -1);
        if congruent && inside {
            points.push(cur.iter().map(|&c| c as f64).collect());
        }
        let mut a = 0;
        loop {
            if a == p.dim {
                return (points, 2.0 / g as f64);
            }
            cur[a] += 1;
            if cur[a] <= hi[a] {
                break;
            }
            cur[a] = lo[a];
            a += 1;
        }
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `k⁻¹ log Σ_m e^{k⟨x,m⟩}` with its gradient and Hessian.
pub fn log_sum_exp(points: &[Vec<f64>], k: f64, x: &[f64]) -> (f64, [f64; 3], Mat3) {
    let n = x.len();
    let vertices = points;
    let e: Vec<f64> = vertices
        .iter()
        .map(|v| k * v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = e.iter().map(|t| (t - top).exp()).collect();
    let s: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|t| t / s).collect();
    let mut g = [0.0; 3];
    for (pv, v) in p.iter().zip(vertices) {
        for a in 0..n {
            g[a] += pv * v[a];
        }
    }
    // Pairwise form of the covariance avoids cancellation far from the origin.
    let mut hs = Mat3::zeros(n);
    for i in 0..vertices.len() {
        for j in i + 1..vertices.len() {
            let pij = k * p[i] * p[j];
            for a in 0..n {
                for b in 0..n {
                    hs.a[a][b] += pij * (vertices[i][a] - vertices[j][a]) * (vertices[i][b] - vertices[j][b]);
                }
            }
        }
    }
    ((top + s.ln()) / k, g, hs)
}

/// Grid diagonal used for the mixed derivative in each coordinate plane:
/// `−1` when some facet normal has `n_a n_b < 0` and none has `n_a n_b > 0`.
pub fn diagonal_signs(p: &Polytope) -> Vec<f64> {
    let mut out = Vec::new();
    for a in 0..p.dim {
        for b in a + 1..p.dim {
            let pos = p.facets.iter().any(|n| n[a] * n[b] > 0);
            let neg = p.facets.iter().any(|n| n[a] * n[b] < 0);
            out.push(if neg && !pos { -1.0 } else { 1.0 });
        }
    }
    out
}

/// `max_m ⟨v,m⟩ − ⟨v,∇ψ_ref⟩`, summed as positive terms so it keeps full
/// relative precision where it is tiny.
///
/// Along a grid line with direction `v` this is a smooth parameter for
/// every smooth invariant field, both where the line runs into a facet
/// transversally and where it runs along one, so it serves as the
/// extrapolation variable past the box.
pub fn direction_gap(points: &[Vec<f64>], k: f64, x: &[f64], v: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let e: Vec<f64> = points.iter().map(|m| k * dot(m, x)).collect();
    let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ext = points.iter().map(|m| dot(m, v)).fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, m) in e.iter().zip(points) {
        let w = (t - top).exp();
        num += w * (ext - dot(m, v));
        den += w;
    }
    num / den
}

/// `ψ = ψ_ref + δ`; fields are extended past the box by [`direction_gap`] extrapolation.
#[derive(Clone, Debug)]
pub struct PotentialGrid {
    pub model: Arc<ToricModel>,
    pub delta: Vec<f64>,
}

impl PotentialGrid {
    /// `δ = 0` on `model`.
    pub fn reference(model: &Arc<ToricModel>) -> PotentialGrid {
        PotentialGrid { model: model.clone(), delta: vec![0.0; model.spec.len()] }
    }

    pub fn spec(&self) -> GridSpec {
        self.model.spec
    }

    pub fn psi(&self) -> Vec<f64> {
        self.model.psi_ref.iter().zip(&self.delta).map(|(a, b)| a + b).collect()
    }

    pub fn with_delta(&self, delta: Vec<f64>) -> PotentialGrid {
        PotentialGrid { model: self.model.clone(), delta }
    }

    /// Hessians `D²ψ` at every node.
    pub fn hessians(&self) -> Vec<Mat3> {
        let st = &self.model.stencils;
        let n = self.model.dim();
        let d2 = st.hessian(&self.delta, Reflect::Smooth);
        let mut out = self.model.hess_ref.clone();
        for (i, m) in out.iter_mut().enumerate() {
            for a in 0..n {
                for b in 0..n {
                    m.a[a][b] += d2[a][b][i];
                }
            }
        }
        out
    }

    /// First node where `D²ψ` fails to be positive definite.
    pub fn first_nonconvex(&self) -> Option<usize> {
        self.hessians().iter().position(|m| !m.is_positive_definite())
    }
}

/// The reference metric `ψ_ref`; see [`reference_points`].
pub fn reference_potential(polytope: &Polytope, half_width: f64, resolution: usize) -> Result<PotentialGrid> {
    Ok(PotentialGrid::reference(&ToricModel::new(polytope.clone(), half_width, resolution)?))
}

/// Shape of an initial perturbation `δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    None,
    /// `A Π sech(x_a)`; on `CP^1` this has a conical point at the poles.
    Sech,
    /// `A Π sech²(x_a)`, equal to `A Π (1 − y_a²)` on products of intervals.
    Sech2,
    /// `A |y|²` with `y = ∇ψ_ref`.
    MomentQuadratic,
    /// Seeded random cubic polynomial in `y = ∇ψ_ref`.
    MomentPoly,
}

impl Profile {
    pub fn parse(id: &str) -> Result<Profile> {
        match id {
            "none" => Ok(Profile::None),
            "sech" => Ok(Profile::Sech),
            "sech2" => Ok(Profile::Sech2),
            "moment_quadratic" => Ok(Profile::MomentQuadratic),
            "moment_poly" => Ok(Profile::MomentPoly),
            other => Err(LabError::Invalid(format!("unknown perturbation profile `{other}`"))),
        }
    }
}

/// Evaluates a perturbation profile with unit amplitude.
pub fn profile_field(model: &ToricModel, profile: &Profile, seed: u64) -> Vec<f64> {
    let n = model.dim();
    let spec = model.spec;
    let monomials = cubic_monomials(n);
    let coeffs: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        monomials.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    (0..spec.len())
        .map(|i| {
            let x = spec.coords(i);
            let y = &model.grad_ref[i][..n];
            match profile {
                Profile::None => 0.0,
                Profile::Sech => x.iter().map(|t| 1.0 / t.cosh()).product(),
                Profile::Sech2 => x.iter().map(|t| 1.0 / (t.cosh() * t.cosh())).product(),
                Profile::MomentQuadratic => y.iter().map(|t| t * t).sum(),
                Profile::MomentPoly => monomials
                    .iter()
                    .zip(&coeffs)
                    .map(|(m, c)| c * m.iter().map(|&a| y[a]).product::<f64>())
                    .sum(),
            }
        })
        .collect()
}

/// Exponent lists of the nonconstant monomials of degree ≤ 3 in `n` variables.
fn cubic_monomials(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..n {
        out.push(vec![a]);
        for b in a..n {
            out.push(vec![a, b]);
            for c in b..n {
                out.push(vec![a, b, c]);
            }
        }
    }
    out
}

/// `ψ_ref + A·profile`, halving `A` until `D²ψ ≻ 0` everywhere.
/// Returns the grid and the amplitude actually used.
pub fn perturbed_potential(
    model: &Arc<ToricModel>,
    profile: &Profile,
    amplitude: f64,
    seed: u64,
) -> Result<(PotentialGrid, f64)> {
    let shape = profile_field(model, profile, seed);
    let mut amp = amplitude;
    for _ in 0..40 {
        let grid = PotentialGrid {
            model: model.clone(),
            delta: shape.iter().map(|s| amp * s).collect(),
        };
        if grid.first_nonconvex().is_none() {
            return Ok((grid, amp));
        }
        amp *= 0.5;
    }
    Err(LabError::Invalid("perturbation cannot be made convex".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_potential_on_cp1_is_log_two_cosh() {
        let p = Polytope::catalog("cp1").unwrap();
        let g = reference_potential(&p, 8.0, 65).unwrap();
        for i in [0, 20, 32, 64] {
            let x = g.spec().coords(i)[0];
            assert!((g.model.psi_ref[i] - (2.0 * x.cosh()).ln()).abs() < 1e-14);
            assert!((g.model.grad_ref[i][0] - x.tanh()).abs() < 1e-15);
            let sech2 = 1.0 / (x.cosh() * x.cosh());
            assert!((g.model.hess_ref[i].a[0][0] - sech2).abs() < 1e-13 * sech2);
        }
    }

    #[test]
    fn value_at_origin_is_log_point_count() {
        for name in crate::polytope::CATALOG {
            let p = Polytope::catalog(name).unwrap();
            let (pts, k) = reference_points(&p);
            let (psi, _, _) = log_sum_exp(&pts, k, &vec![0.0; p.dim]);
            assert!((psi - (pts.len() as f64).ln() / k).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_points_per_catalog_entry() {
        let count = |n: &str| {
            let (pts, k) = reference_points(&Polytope::catalog(n).unwrap());
            (pts.len(), k)
        };
        assert_eq!(count("cp1"), (2, 1.0));
        assert_eq!(count("cp2"), (3, 2.0 / 3.0));
        assert_eq!(count("cp1xcp1"), (4, 1.0));
        assert_eq!(count("bl1cp2"), (9, 2.0));
    }

    #[test]
    fn square_potential_separates() {
        let p = Polytope::catalog("cp1xcp1").unwrap();
        let x = [0.7, -1.3];
        let (pts, k) = reference_points(&p);
        let (psi, _, _) = log_sum_exp(&pts, k, &x);
        let one = |t: f64| (2.0 * f64::cosh(t)).ln();
        assert!((psi - one(x[0]) - one(x[1])).abs() < 1e-14);
    }

    #[test]
    fn small_box_and_resolution_are_rejected() {
        let p = Polytope::catalog("cp1").unwrap();
        assert!(matches!(reference_potential(&p, 8.0, 8), Err(LabError::Invalid(_))));
        assert!(matches!(reference_potential(&p, 1.0, 64), Err(LabError::BoxTooSmall(_))));
    }

    #[test]
    fn large_perturbation_is_shrunk_to_stay_convex() {
        let p = Polytope::catalog("cp1").unwrap();
        let g = reference_potential(&p, 8.0, 128).unwrap();
        let (grid, amp) = perturbed_potential(&g.model, &Profile::Sech2, 5.0, 0).unwrap();
        assert!(amp < 5.0 && grid.first_nonconvex().is_none());
    }
}
