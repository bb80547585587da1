//! Exact integrals of `e^{⟨b,y⟩}` times low-degree monomials over `Δ`.
//!
//! On a simplex with apex at the origin the integrals reduce to divided
//! differences of `exp` at the values of `⟨b,·⟩` on the vertices (the
//! Hermite-Genocchi formula). Divided differences, including repeated nodes,
//! are read off the exponential of a bidiagonal matrix, which has no
//! cancellation when nodes coincide or nearly coincide.

use serde::{Deserialize, Serialize};

use crate::polytope::Polytope;

/// Exponents above this are shifted out and reported in `log_offset`.
pub const OVERFLOW_EXPONENT: f64 = 600.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentIntegralReport {
    /// `∫_Δ e^{⟨b,y⟩} dy`
    pub phi: f64,
    /// `∫_Δ y e^{⟨b,y⟩} dy`
    pub grad: Vec<f64>,
    /// `∫_Δ y yᵀ e^{⟨b,y⟩} dy`
    pub hess: Vec<Vec<f64>>,
    /// `∫_Δ ⟨b,y⟩ e^{⟨b,y⟩} dy`
    pub linear_weighted: f64,
    /// All values above are multiplied by `e^{−log_offset}`; zero unless the
    /// exponent would overflow.
    pub log_offset: f64,
}

/// Divided difference `exp[x_0, …, x_m]`; repeated nodes are allowed.
pub fn exp_divided_difference(nodes: &[f64]) -> f64 {
    let m = nodes.len();
    assert!(m >= 1 && m <= 8);
    if m == 1 {
        return nodes[0].exp();
    }
    // Shift so the matrix is small, then undo with exp(shift).
    let shift = nodes.iter().sum::<f64>() / m as f64;
    let spread = nodes.iter().map(|x| (x - shift).abs()).fold(0.0, f64::max);
    let norm = spread + 1.0;
    let mut s = 0u32;
    while norm / 2f64.powi(s as i32) > 0.5 {
        s += 1;
    }
    let scale = 2f64.powi(-(s as i32));
    let mut b = [[0.0f64; 8]; 8];
    for i in 0..m {
        b[i][i] = (nodes[i] - shift) * scale;
        if i + 1 < m {
            b[i][i + 1] = scale;
        }
    }
    // Taylor series of exp(B); ‖B‖ ≤ 1/2 so 22 terms reach machine precision.
    let mut e = [[0.0f64; 8]; 8];
    let mut term = [[0.0f64; 8]; 8];
    for i in 0..m {
        e[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..=22 {
        term = upper_mul(&term, &b, m);
        let inv = 1.0 / k as f64;
        for i in 0..m {
            for j in i..m {
                term[i][j] *= inv;
                e[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        e = upper_mul(&e, &e, m);
    }
    e[0][m - 1] * shift.exp()
}

fn upper_mul(a: &[[f64; 8]; 8], b: &[[f64; 8]; 8], m: usize) -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for i in 0..m {
        for j in i..m {
            let mut s = 0.0;
            for k in i..=j {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

/// Computes phi, grad, hess and the linear-weighted integral for one `b`.
pub fn weighted_moment_integrals(p: &Polytope, b: &[f64]) -> MomentIntegralReport {
    assert_eq!(b.len(), p.dim, "field dimension must match the polytope");
    let n = p.dim;
    let top = p.max_linear(b).max(0.0);
    let log_offset = if top > OVERFLOW_EXPONENT { top } else { 0.0 };
    let mut phi = 0.0;
    let mut grad = vec![0.0; n];
    let mut hess = vec![vec![0.0; n]; n];
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    for k in 0..p.simplices.len() {
        let pts = p.simplex_points(k);
        let scale = fact * p.simplex_volume_f64(k);
        // Node 0 is the apex at the origin.
        let a: Vec<f64> = pts
            .iter()
            .map(|v| v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() - log_offset)
            .collect();
        phi += scale * exp_divided_difference(&a);
        let mut first = vec![0.0; n + 1];
        for i in 1..=n {
            let mut nodes = a.clone();
            nodes.push(a[i]);
            first[i] = scale * exp_divided_difference(&nodes);
            for d in 0..n {
                grad[d] += pts[i][d] * first[i];
            }
        }
        for i in 1..=n {
            for j in i..=n {
                let mut nodes = a.clone();
                nodes.push(a[i]);
                nodes.push(a[j]);
                let mut val = scale * exp_divided_difference(&nodes);
                if i == j {
                    val *= 2.0;
                }
                for r in 0..n {
                    for c in 0..n {
                        let contrib = if i == j {
                            pts[i][r] * pts[i][c] * val
                        } else {
                            (pts[i][r] * pts[j][c] + pts[j][r] * pts[i][c]) * val
                        };
                        hess[r][c] += contrib;
                    }
                }
            }
        }
    }
    let linear_weighted = grad.iter().zip(b).map(|(g, x)| g * x).sum();
    MomentIntegralReport { phi, grad, hess, linear_weighted, log_offset }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn divided_differences_match_closed_forms() {
        let e = |x: f64| x.exp();
        assert!((exp_divided_difference(&[0.0, 1.0]) - (e(1.0) - 1.0)).abs() < 1e-15);
        // Confluent node gives the derivative.
        assert!((exp_divided_difference(&[2.0, 2.0]) - e(2.0)).abs() < 1e-13);
        assert!((exp_divided_difference(&[1.0, 1.0, 1.0]) - e(1.0) / 2.0).abs() < 1e-14);
        let (a, b, c) = (-3.0, 0.5, 4.0);
        let ab = (e(b) - e(a)) / (b - a);
        let bc = (e(c) - e(b)) / (c - b);
        let abc = (bc - ab) / (c - a);
        assert!((exp_divided_difference(&[a, b, c]) - abc).abs() < 1e-13 * abc);
        let near = exp_divided_difference(&[0.0, 1e-9, 2e-9]);
        assert!((near - 0.5).abs() < 1e-8);
    }

    #[test]
    fn interval_examples() {
        let p = Polytope::catalog("cp1").unwrap();
        let r0 = weighted_moment_integrals(&p, &[0.0]);
        assert!((r0.phi - 2.0).abs() < 1e-15 && r0.grad[0].abs() < 1e-15);
        assert!((r0.hess[0][0] - 2.0 / 3.0).abs() < 1e-15);
        let r1 = weighted_moment_integrals(&p, &[1.0]);
        assert!((r1.phi - 2.0 * 1f64.sinh()).abs() < 1e-14);
        assert!((r1.grad[0] - 2.0 / std::f64::consts::E).abs() < 1e-14);
        // ∫ y² e^y = (y² − 2y + 2)e^y on [−1, 1].
        let h = std::f64::consts::E - 5.0 / std::f64::consts::E;
        assert!((r1.hess[0][0] - h).abs() < 1e-14);
        assert!((r1.linear_weighted - r1.grad[0]).abs() < 1e-15);
    }

    #[test]
    fn large_exponents_are_shifted() {
        let p = Polytope::catalog("cp1").unwrap();
        let r = weighted_moment_integrals(&p, &[900.0]);
        assert!(r.phi.is_finite() && r.log_offset == 900.0);
        // ∫ e^{900(y−1)} ≈ 1/900.
        assert!((r.phi - 1.0 / 900.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_sum_equals_volume() {
        for name in crate::polytope::CATALOG {
            let p = Polytope::catalog(name).unwrap();
            let r = weighted_moment_integrals(&p, &vec![0.0; p.dim]);
            assert!((r.phi - p.volume().0).abs() < 1e-12 * p.volume().0, "{name}");
        }
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (proptest::collection::vec(-3.0..3.0f64, 2), proptest::collection::vec(-3.0..3.0f64, 2))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn phi_is_log_convex((b1, b2) in pair(), name in prop::sample::select(vec!["cp2", "cp1xcp1", "bl1cp2"])) {
            let p = Polytope::catalog(name).unwrap();
            let mid: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| 0.5 * (a + b)).collect();
            let l = |b: &[f64]| weighted_moment_integrals(&p, b).phi.ln();
            prop_assert!(l(&mid) <= 0.5 * (l(&b1) + l(&b2)) + 1e-12);
        }

        #[test]
        fn gradient_is_derivative_of_phi((b, dir) in pair()) {
            let p = Polytope::catalog("bl1cp2").unwrap();
            let eps = 1e-5;
            let shifted = |t: f64| -> Vec<f64> { b.iter().zip(&dir).map(|(x, d)| x + t * d).collect() };
            let fd = (weighted_moment_integrals(&p, &shifted(eps)).phi
                - weighted_moment_integrals(&p, &shifted(-eps)).phi) / (2.0 * eps);
            let r = weighted_moment_integrals(&p, &b);
            let exact: f64 = r.grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            prop_assert!((fd - exact).abs() <= 1e-6 * (exact.abs() + r.phi));
        }

        #[test]
        fn second_moment_is_positive_definite(b in proptest::collection::vec(-4.0..4.0f64, 2)) {
            let p = Polytope::catalog("bl1cp2").unwrap();
            let h = weighted_moment_integrals(&p, &b).hess;
            prop_assert!((h[0][1] - h[1][0]).abs() <= 1e-12 * h[0][0]);
            prop_assert!(h[0][0] > 0.0 && h[0][0] * h[1][1] - h[0][1] * h[1][0] > 0.0);
        }
    }
}
