//! Finite-difference experiments with the W-entropy, its minimum λ and the
//! normalized Ricci flow of torus-invariant metrics on toric Fano surfaces
//! and curves.
//!
//! Torus-invariant Kähler metrics in `2πc₁(M)` are represented by convex
//! potentials `ψ` on a truncated box in logarithmic coordinates. The
//! Riemannian metric is `g = ψ_ij (dx_i dx_j + dθ_i dθ_j)`, so that
//!
//! * the moment map is `∇ψ`, with image the reflexive polytope `Δ`;
//! * `∫_M F dV = n!(2π)^n ∫ F det D²ψ dx` and `V = n!(2π)^n Vol(Δ)`;
//! * the Laplacian and gradient of invariant functions are
//!   `Δf = tr((D²ψ)⁻¹ D²f)` and `|∇f|² = ∇fᵀ (D²ψ)⁻¹ ∇f`;
//! * the Ricci potential is `h = −log det D²ψ − 2ψ + const` and `R = 2n + Δh`;
//! * a torus field `b` has potential `θ_b = ⟨b, ∇ψ⟩ + a_b`.
//!
//! Module map: [`polytope`] and [`quadrature`] hold the polytope data and
//! the exact exponential moment integrals; [`invariants`] computes the
//! extremal field and the invariants derived from it; [`grid`],
//! [`snapshot`] and [`fd`] represent metrics; [`flow`] evolves them;
//! [`entropy`] computes `λ(g)` and its companions; [`experiment`] holds the
//! batch front door used by the CLI.

pub mod banded;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod flow;
pub mod grid;
pub mod invariants;
pub mod io;
pub mod polytope;
pub mod quadrature;
pub mod rational;
pub mod small;
pub mod snapshot;

pub use error::{LabError, Result};
pub use grid::{GridSpec, PotentialGrid, ToricModel};
pub use invariants::{InvariantReport, TorusField};
pub use polytope::Polytope;
pub use snapshot::MetricSnapshot;

/// `n! (2π)^n`, the factor relating polytope integrals to manifold integrals.
pub fn manifold_factor(dim: usize) -> f64 {
    let fact: f64 = (1..=dim).map(|k| k as f64).product();
    fact * (2.0 * std::f64::consts::PI).powi(dim as i32)
}
