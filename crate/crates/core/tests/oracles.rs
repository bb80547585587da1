//! Independent checks of polytope data and invariants by brute-force sampling.

use kahler_lab::invariants::{self, theta_normalizer};
use kahler_lab::quadrature::weighted_moment_integrals;
use kahler_lab::Polytope;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bbox(p: &Polytope) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; p.dim];
    let mut hi = vec![f64::NEG_INFINITY; p.dim];
    for v in p.vertices_f64() {
        for a in 0..p.dim {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    (lo, hi)
}

/// Midpoint rule on an `m^n` lattice over the bounding box.
fn raster<F: Fn(&[f64]) -> f64>(p: &Polytope, m: usize, f: F) -> f64 {
    let (lo, hi) = bbox(p);
    let h: Vec<f64> = (0..p.dim).map(|a| (hi[a] - lo[a]) / m as f64).collect();
    let cell: f64 = h.iter().product();
    let total = m.pow(p.dim as u32);
    let mut y = vec![0.0; p.dim];
    let mut acc = 0.0;
    for k in 0..total {
        let mut r = k;
        for a in 0..p.dim {
            y[a] = lo[a] + (r % m) as f64 * h[a] + 0.5 * h[a];
            r /= m;
        }
        if p.contains(&y, 0.0) {
            acc += f(&y);
        }
    }
    acc * cell
}

#[test]
fn rasterized_volumes_match_exact_volumes() {
    for name in ["cp1", "cp2", "cp1xcp1", "bl1cp2"] {
        let p = Polytope::catalog(name).unwrap();
        let m = if p.dim == 1 { 100_000 } else { 2000 };
        let r = raster(&p, m, |_| 1.0);
        let exact = p.volume().0;
        assert!((r - exact).abs() < 2e-3 * exact, "{name}: {r} vs {exact}");
    }
}

#[test]
fn monte_carlo_barycenters_match_moment_integrals() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in ["cp2", "cp1xcp1", "bl1cp2"] {
        let p = Polytope::catalog(name).unwrap();
        let (lo, hi) = bbox(&p);
        let mut sum = vec![0.0; p.dim];
        let mut count = 0usize;
        let draws = 400_000;
        for _ in 0..draws {
            let y: Vec<f64> = (0..p.dim).map(|a| rng.gen_range(lo[a]..hi[a])).collect();
            if p.contains(&y, 0.0) {
                count += 1;
                for a in 0..p.dim {
                    sum[a] += y[a];
                }
            }
        }
        let r = weighted_moment_integrals(&p, &vec![0.0; p.dim]);
        let box_vol: f64 = (0..p.dim).map(|a| hi[a] - lo[a]).product();
        let vol_mc = box_vol * count as f64 / draws as f64;
        assert!((vol_mc - r.phi).abs() < 0.01 * r.phi, "{name}: volume {vol_mc} vs {}", r.phi);
        for a in 0..p.dim {
            let mc = sum[a] / count as f64;
            let exact = r.grad[a] / r.phi;
            // Standard error of the mean is below 2e-3 for these boxes.
            assert!((mc - exact).abs() < 1e-2, "{name}: barycenter {a}: {mc} vs {exact}");
        }
    }
}

#[test]
fn exponential_moments_match_rasterized_integrals() {
    let p = Polytope::catalog("bl1cp2").unwrap();
    for b in [[0.0, 0.0], [-0.52, -0.52], [1.0, -0.4]] {
        let r = weighted_moment_integrals(&p, &b);
        let scale = r.log_offset.exp();
        let phi = raster(&p, 3000, |y| (b[0] * y[0] + b[1] * y[1]).exp());
        assert!((phi - r.phi * scale).abs() < 1e-3 * phi, "{b:?}: {phi} vs {}", r.phi * scale);
        let g0 = raster(&p, 3000, |y| y[0] * (b[0] * y[0] + b[1] * y[1]).exp());
        assert!((g0 - r.grad[0] * scale).abs() < 2e-3 * phi, "{b:?}: {g0} vs {}", r.grad[0] * scale);
    }
}

#[test]
fn n_x_by_rasterization() {
    let p = Polytope::catalog("bl1cp2").unwrap();
    let rep = invariants::extremal_field(&p).unwrap();
    let a = rep.a_c;
    let c = rep.c.clone();
    let integral = raster(&p, 3000, |y| {
        let t = c[0] * y[0] + c[1] * y[1] + a;
        t * t.exp()
    });
    let n = kahler_lab::manifold_factor(2) * integral;
    assert!((n - rep.n_x).abs() < 2e-3 * rep.n_x, "{n} vs {}", rep.n_x);
}

#[test]
fn theta_normalization_by_rasterization() {
    let p = Polytope::catalog("cp2").unwrap();
    let b = [0.7, -0.2];
    let a = theta_normalizer(&p, &b);
    let integral = raster(&p, 3000, |y| (b[0] * y[0] + b[1] * y[1] + a).exp());
    assert!((integral - p.volume().0).abs() < 1e-3 * p.volume().0);
}
