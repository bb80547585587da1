//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 4`.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use kahler_lab::entropy::{self, EntropyOptions, Init};
use kahler_lab::experiment::{self, ExperimentConfig};
use kahler_lab::flow::{self, FlowConfig, FlowTrace, TraceSample};
use kahler_lab::grid::{perturbed_potential, profile_field, Profile};
use kahler_lab::invariants::{self, TorusField};
use kahler_lab::snapshot::{self, assemble_snapshot, MetricSnapshot};
use kahler_lab::{manifold_factor, Polytope, PotentialGrid, ToricModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

fn verdict(id: &str, pass: bool, detail: String) -> bool {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn catalog(name: &str) -> Polytope {
    Polytope::catalog(name).unwrap()
}

fn two_pi_n(n: usize) -> f64 {
    (2.0 * std::f64::consts::PI).powi(n as i32)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// Shared CP^1 flows: L = 8, 257 nodes, dt = 1e-3, λ and checkpoints every 0.05.

fn cp1_model() -> Arc<ToricModel> {
    static M: OnceLock<Arc<ToricModel>> = OnceLock::new();
    M.get_or_init(|| ToricModel::new(catalog("cp1"), 8.0, 257).unwrap()).clone()
}

fn cp1_flow_config() -> FlowConfig {
    let mut c = FlowConfig::new(1e-3, 20.0, 0.05);
    c.checkpoint_cadence = 0.05;
    c
}

fn cp1_flow(profile: Profile, amplitude: f64) -> FlowTrace {
    let (grid, amp) = perturbed_potential(&cp1_model(), &profile, amplitude, 0).unwrap();
    assert_eq!(amp, amplitude, "perturbation was rescaled");
    flow::run(&grid, &cp1_flow_config()).unwrap()
}

fn flow_a() -> &'static FlowTrace {
    static T: OnceLock<FlowTrace> = OnceLock::new();
    T.get_or_init(|| cp1_flow(Profile::Sech2, 0.1))
}

fn flow_b() -> &'static FlowTrace {
    static T: OnceLock<FlowTrace> = OnceLock::new();
    T.get_or_init(|| cp1_flow(Profile::MomentPoly, 0.2))
}

fn lambda_samples(trace: &FlowTrace) -> Vec<&TraceSample> {
    trace.samples.iter().filter(|s| s.lambda.is_some()).collect()
}

#[test]
fn c01_calibration() {
    let t = std::time::Instant::now();
    let model = ToricModel::new(catalog("cp1"), 12.0, 1024).unwrap();
    let s = assemble_snapshot(&PotentialGrid::reference(&model)).unwrap();
    let field = TorusField::new(s.polytope(), &[1.0]);
    let eh: Vec<f64> = s.h.iter().map(|h| h.exp()).collect();
    let et: Vec<f64> = s.theta(&field).iter().map(|t| t.exp()).collect();
    let errs = [
        rel(s.integrate(&vec![1.0; s.len()]), FOUR_PI),
        rel(s.integrate(&eh), FOUR_PI),
        rel(s.integrate(&et), FOUR_PI),
    ];
    let cp1_ok = errs.iter().all(|e| *e <= 1e-6);
    let cp1_time = t.elapsed();

    let t = std::time::Instant::now();
    let p = catalog("bl1cp2");
    let model = ToricModel::with_calibration(p.clone(), 8.0, 128, 1e-3).unwrap();
    let s = assemble_snapshot(&PotentialGrid::reference(&model)).unwrap();
    let v = p.volume().1;
    let field = TorusField::new(&p, &[1.0, 0.5]);
    let eh: Vec<f64> = s.h.iter().map(|h| h.exp()).collect();
    let et: Vec<f64> = s.theta(&field).iter().map(|t| t.exp()).collect();
    let berrs = [
        rel(s.integrate(&vec![1.0; s.len()]), v),
        rel(s.integrate(&eh), v),
        rel(s.integrate(&et), v),
    ];
    let bl_ok = berrs.iter().all(|e| *e <= 1e-3);
    let ok = verdict(
        "1",
        cp1_ok && bl_ok,
        format!(
            "cp1 1024/L=12 rel errs {:.1e} {:.1e} {:.1e} (tol 1e-6, {:.1?}); bl1cp2 128² {:.1e} {:.1e} {:.1e} (tol 1e-3, {:.1?})",
            errs[0], errs[1], errs[2], cp1_time, berrs[0], berrs[1], berrs[2], t.elapsed()
        ),
    );
    assert!(ok);
}

#[test]
fn c02_round_cp1() {
    let s = assemble_snapshot(&PotentialGrid::reference(&cp1_model())).unwrap();
    let h_sup = MetricSnapshot::sup(&s.h);
    let r_err = s
        .scalar
        .iter()
        .zip(&s.model().resolved)
        .filter(|(_, r)| **r)
        .map(|(x, _)| (x - 2.0).abs())
        .fold(0.0, f64::max);
    let m = entropy::minimize_w(&s, Init::F(vec![0.3; s.len()]), &EntropyOptions::default()).unwrap();
    let f_sup = MetricSnapshot::sup(&m.f);
    let w0 = entropy::w_functional(&s, &vec![0.0; s.len()]).unwrap();
    let ok = h_sup <= 1e-6
        && r_err <= 1e-4
        && (m.lambda - 2.0).abs() <= 1e-4
        && f_sup <= 1e-3
        && (w0 - 2.0).abs() <= 1e-6;
    let ok = verdict(
        "2",
        ok,
        format!(
            "|h| {h_sup:.1e} (1e-6), |R-2| {r_err:.1e} (1e-4), λ-2 {:.1e} (1e-4), |f| {f_sup:.1e} (1e-3), W(g,0)-2 {:.1e} (1e-6)",
            m.lambda - 2.0,
            w0 - 2.0
        ),
    );
    assert!(ok);
}

#[test]
fn c03_extremal_field() {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["cp1", "cp2", "cp1xcp1"] {
        let r = invariants::extremal_field(&catalog(name)).unwrap();
        let c = r.c.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let res = *r.residuals.last().unwrap();
        ok &= c <= 1e-8 && res <= 1e-10 * r.vol_delta;
        parts.push(format!("{name} |c| {c:.1e}"));
    }
    let p = catalog("bl1cp2");
    let r = invariants::extremal_field(&p).unwrap();
    let t = invariants::extremal_on_line(&p, &[1.0, 1.0]);
    let diff = r.c.iter().map(|c| (c - t).abs()).fold(0.0, f64::max);
    let res = *r.residuals.last().unwrap();
    ok &= diff <= 1e-8 && r.n_x > 0.0 && res <= 1e-10 * r.vol_delta;
    parts.push(format!(
        "bl1cp2 c {:?}, |full - diagonal| {diff:.1e} (1e-8), N_X {:.6}, residual {res:.1e} (≤ {:.1e})",
        r.c,
        r.n_x,
        1e-10 * r.vol_delta
    ));
    let ok = verdict("3", ok, parts.join("; "));
    assert!(ok);
}

#[test]
fn c04_invariance() {
    let p = catalog("bl1cp2");
    // L = 10: at L = 8 the mass of θ_X e^{θ_X} outside the box is ~2e-5 of N_X.
    let model = ToricModel::with_calibration(p.clone(), 10.0, 257, 1e-3).unwrap();
    let n_x = model.extremal.n_x;
    let reference = assemble_snapshot(&PotentialGrid::reference(&model)).unwrap();
    let (grid, amp) = perturbed_potential(&model, &Profile::Sech2, 0.01, 0).unwrap();
    let perturbed = assemble_snapshot(&grid).unwrap();
    let mut errs = Vec::new();
    for s in [&reference, &perturbed] {
        let dens: Vec<f64> = s.theta_x.iter().map(|t| t * t.exp()).collect();
        errs.push(rel(s.integrate(&dens), n_x));
    }
    let ok = verdict(
        "4",
        errs.iter().all(|e| *e <= 1e-5),
        format!(
            "bl1cp2 257² L=10, N_X {n_x:.8}; reference rel err {:.1e}, sech2({amp}) rel err {:.1e} (tol 1e-5)",
            errs[0], errs[1]
        ),
    );
    assert!(ok);
}

#[test]
fn c05_upper_bound() {
    let p = catalog("bl1cp2");
    let model = ToricModel::with_calibration(p.clone(), 8.0, 65, 1e-3).unwrap();
    let v = p.volume().1;
    let bound = model.extremal.sup_lambda_bound;
    let slack = 1e-3 * v / two_pi_n(2);
    let profiles = [Profile::MomentPoly, Profile::MomentQuadratic, Profile::Sech2];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..20u64 {
        let profile = &profiles[k as usize % 3];
        let amplitude = rng.gen_range(0.002..0.01);
        let (grid, _) = perturbed_potential(&model, profile, amplitude, k).unwrap();
        let s = assemble_snapshot(&grid).unwrap();
        let m = entropy::minimize_w(&s, Init::Warm, &EntropyOptions::default()).unwrap();
        worst = worst.max(m.lambda);
    }
    let ok = verdict(
        "5",
        worst <= bound + slack,
        format!("bl1cp2 65², 20 metrics: max λ {worst:.6} ≤ {bound:.6} + {slack:.1e}"),
    );
    assert!(ok);
}

#[test]
fn c06_w_identity() {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, m, tol) in [("cp1", 257, 1e-4), ("cp2", 257, 1e-3), ("cp1xcp1", 129, 1e-3), ("bl1cp2", 257, 1e-3)] {
        let model = ToricModel::with_calibration(catalog(name), 8.0, m, tol).unwrap();
        let s = assemble_snapshot(&PotentialGrid::reference(&model)).unwrap();
        let err = match snapshot::w_bound_check(&s, &model.extremal.field(), 1e-5) {
            Ok(c) => c.relative_error,
            Err(e) => {
                println!("  {name}: {e}");
                f64::INFINITY
            }
        };
        ok &= err <= 1e-5;
        parts.push(format!("{name} {err:.1e}"));
    }
    let ok = verdict("6", ok, format!("W(g,-θ_X) vs (2π)^-n[nV-N_X] rel err: {} (tol 1e-5)", parts.join(", ")));
    assert!(ok);
}

fn monotone(trace: &FlowTrace) -> (f64, f64) {
    let lam = lambda_samples(trace);
    let lam_drop = lam
        .windows(2)
        .map(|w| w[0].lambda.unwrap() - w[1].lambda.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let mu_rise = trace.samples.windows(2).map(|w| w[1].mu - w[0].mu).fold(f64::NEG_INFINITY, f64::max);
    (lam_drop, mu_rise)
}

#[test]
fn c07_flow_monotonicity() {
    let tr = flow_a();
    let (lam_drop, mu_rise) = monotone(tr);
    let last = tr.last();
    let ok = lam_drop <= 1e-6
        && mu_rise <= 0.0
        && last.t >= 20.0 - 1e-9
        && last.u_c0 < 1e-3
        && last.grad_u < 1e-3
        && last.lap_u < 1e-3;
    let ok = verdict(
        "7",
        ok,
        format!(
            "cp1 sech2(0.1): max λ drop {lam_drop:.1e} (1e-6), max μ rise {mu_rise:.1e}; at t={} |u| {:.1e} |∇u| {:.1e} |Δu| {:.1e} (1e-3)",
            last.t, last.u_c0, last.grad_u, last.lap_u
        ),
    );
    assert!(ok);
}

#[test]
fn c08_energy_level() {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, tr) in [("sech2(0.1)", flow_a()), ("moment_poly(0.2)", flow_b())] {
        match entropy::energy_level(tr) {
            Ok(e) => {
                ok &= (e.estimate - 2.0).abs() <= 1e-3;
                parts.push(format!("{name} L {:.9}", e.estimate));
            }
            Err(err) => {
                ok = false;
                parts.push(format!("{name} {err}"));
            }
        }
    }
    let ok = verdict("8", ok, format!("cp1 {} (target 2 ± 1e-3)", parts.join(", ")));
    assert!(ok);
}

/// Bl₁CP² at 64 cells per axis from the reference metric, compared with the
/// bound at t = 15. Reported, not asserted: the flow does not reach the
/// level at this resolution (see README).
#[test]
fn c08_energy_level_extended() {
    let p = catalog("bl1cp2");
    let model = ToricModel::with_calibration(p, 8.0, 65, 1e-3).unwrap();
    let target = model.extremal.sup_lambda_bound;
    let mut cfg = FlowConfig::new(1e-3, 15.0, 0.05);
    cfg.entropy_cadence = 0.5;
    let t = std::time::Instant::now();
    let detail = match flow::run(&PotentialGrid::reference(&model), &cfg) {
        Ok(tr) => {
            let last = lambda_samples(&tr).last().map(|s| (s.t, s.lambda.unwrap()));
            match last {
                Some((t_last, lam)) => {
                    let gap = rel(lam, target);
                    verdict(
                        "8-extended",
                        gap <= 0.02 && t_last >= 15.0 - 1e-9,
                        format!("bl1cp2 65²: λ({t_last}) = {lam:.6} vs {target:.6}, rel gap {gap:.2e} (tol 2e-2, {:.0?})", t.elapsed()),
                    )
                }
                None => verdict("8-extended", false, "no λ samples".into()),
            }
        }
        Err(e) => verdict("8-extended", false, format!("bl1cp2 65² flow failed after {:.0?}: {e}", t.elapsed())),
    };
    let _ = detail;
}

#[test]
fn c09_first_variation() {
    // Same spacing as the flows; at L = 8 truncation alone gives |dλ| ≈ 2e-6.
    let model = ToricModel::new(catalog("cp1"), 10.0, 321).unwrap();
    let s = assemble_snapshot(&PotentialGrid::reference(&model)).unwrap();
    let opts = EntropyOptions { tol: 1e-11, ..EntropyOptions::default() };
    let m = entropy::minimize_w(&s, Init::Warm, &opts).unwrap();
    let dpsi = profile_field(s.model(), &Profile::Sech2, 0);
    let fv = entropy::lambda_first_variation_check(&s, &m, &dpsi, 3e-3, &opts).unwrap();
    let fd_ok = fv.lhs.abs() <= 1e-6;

    // Mean of dλ/dt over [t_k, t_{k+2}] against the Simpson mean of the trace
    // form over the same interval.
    let mut literal = f64::INFINITY;
    for tr in [flow_a(), flow_b()] {
        for w in lambda_samples(tr).windows(3) {
            let rate = (w[2].lambda.unwrap() - w[0].lambda.unwrap()) / (w[2].t - w[0].t);
            let tb: Vec<f64> = w.iter().map(|s| s.minimizer.as_ref().unwrap().trace_bound).collect();
            let mean = (tb[0] + 4.0 * tb[1] + tb[2]) / 6.0;
            literal = literal.min(rate - mean);
        }
    }
    let literal_ok = literal >= -1e-5;
    verdict(
        "9",
        fd_ok && literal_ok,
        format!(
            "round cp1 (L=10) FD dλ {:.1e} (1e-6), pairing {:.1e}; min(dλ/dt - trace form) {literal:.2e} (slack 1e-5)",
            fv.lhs, fv.rhs
        ),
    );
    assert!(fd_ok && literal_ok);
}

#[test]
fn c10_backward_heat() {
    let path = entropy::backward_heat(flow_a(), 10.0, 1e-3, &EntropyOptions::default()).unwrap();
    let display = path.lambda_gap() - path.w_gap();
    let ok = verdict(
        "10",
        path.worst_decrease <= 1e-5 && display >= -1e-6,
        format!(
            "cp1 t0=10: worst W decrease {:.1e} (1e-5), λ gap {:.3e} - W gap {:.3e} = {display:.1e} (≥ -1e-6), defect {:.1e}",
            path.worst_decrease,
            path.lambda_gap(),
            path.w_gap(),
            path.worst_defect
        ),
    );
    assert!(ok);
}

#[test]
fn c11_h_functional() {
    let p = catalog("bl1cp2");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut concave = f64::NEG_INFINITY;
    for _ in 0..100 {
        let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let gap = 0.5 * (invariants::h_polytope(&p, &a) + invariants::h_polytope(&p, &b)) - invariants::h_polytope(&p, &mid);
        concave = concave.max(gap);
    }
    let mut fd_err = 0.0f64;
    let eps = 1e-5;
    for _ in 0..10 {
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shift = |s: f64| -> Vec<f64> { b.iter().zip(&d).map(|(x, y)| x + s * y).collect() };
        let fd = (invariants::h_polytope(&p, &shift(eps)) - invariants::h_polytope(&p, &shift(-eps))) / (2.0 * eps);
        let exact = invariants::futaki_polytope(&p, &b, &d);
        fd_err = fd_err.max((fd - exact).abs() / exact.abs().max(1.0));
    }
    let r = invariants::extremal_field(&p).unwrap();
    let hx = invariants::h_polytope(&p, &r.c);
    let hx_err = rel(hx, r.n_x);
    let ok = verdict(
        "11",
        concave <= 1e-9 && fd_err <= 1e-5 && hx_err <= 1e-6,
        format!(
            "bl1cp2: max midpoint defect {concave:.1e} (1e-9), dH vs F̃ {fd_err:.1e} (1e-5), H(X) {hx:.8} vs N_X {:.8} rel {hx_err:.1e} (1e-6)",
            r.n_x
        ),
    );
    assert!(ok);
}

#[test]
fn c12_j_functional() {
    let model = cp1_model();
    let base = assemble_snapshot(&PotentialGrid::reference(&model)).unwrap();
    let field = model.extremal.field();
    let zero = experiment::j_functional(&base, &vec![0.0; base.len()], &field).unwrap();
    let profiles = [Profile::MomentPoly, Profile::MomentQuadratic, Profile::Sech2];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = f64::INFINITY;
    for k in 0..20u64 {
        let amplitude = rng.gen_range(0.01..0.2);
        let (grid, _) = perturbed_potential(&model, &profiles[k as usize % 3], amplitude, k).unwrap();
        worst = worst.min(experiment::j_functional(&base, &grid.delta, &field).unwrap());
    }
    let ok = verdict("12", zero == 0.0 && worst >= -1e-8, format!("cp1 J(0) = {zero}, min J over 20 φ {worst:.2e} (≥ -1e-8)"));
    assert!(ok);
}

fn monitor_ratio(trace: &FlowTrace) -> f64 {
    let first = &trace.samples[0];
    let m0 = first.minimizer.as_ref().unwrap();
    let init = [first.h_c0, first.grad_h, first.lap_h, m0.f_c0, m0.grad_f, m0.lap_f];
    let mut worst = 0.0f64;
    for s in &trace.samples {
        let mut vals = vec![s.h_c0, s.grad_h, s.lap_h];
        if let Some(m) = &s.minimizer {
            vals.extend([m.f_c0, m.grad_f, m.lap_f]);
        }
        for (v, i) in vals.iter().zip(&init) {
            worst = worst.max(v / i);
        }
    }
    worst
}

#[test]
fn c13_monitors() {
    let ra = monitor_ratio(flow_a());
    let rb = monitor_ratio(flow_b());
    let warnings = flow_a().warnings.len() + flow_b().warnings.len();
    let ok = verdict(
        "13",
        ra <= flow::MONITOR_FACTOR && rb <= flow::MONITOR_FACTOR && warnings == 0,
        format!("cp1 flows: max sup/initial {ra:.3} and {rb:.3} (≤ 10), {warnings} monitor warnings"),
    );
    assert!(ok);
}

#[test]
fn extra_cp1_default_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::load(&configs_dir().join("cp1.toml")).unwrap();
    experiment::run_flow(&config, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(experiment::TRACE_CSV)).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "lambda").unwrap();
    let lam: Vec<f64> = lines.filter_map(|l| l.split(',').nth(col).and_then(|x| x.parse().ok())).collect();
    let drop = lam.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let last = *lam.last().unwrap();
    let ok = verdict(
        "extra-csv",
        drop <= 1e-6 && last >= 1.999,
        format!("configs/cp1.toml: {} λ rows, max drop {drop:.1e}, final λ {last:.9} (≥ 1.999)", lam.len()),
    );
    assert!(ok);
}

#[test]
fn extra_continuity_path() {
    let config = ExperimentConfig::load(&configs_dir().join("cp1.toml")).unwrap();
    let report = experiment::continuity_path(&config, false).unwrap();
    let all = report.entries.iter().all(|e| e.converged);
    let lams: Vec<f64> = report.entries.iter().map(|e| e.final_lambda).collect();
    let spread = lams.iter().map(|l| (l - 2.0).abs()).fold(0.0, f64::max);
    let ok = verdict(
        "extra-continuity",
        all && spread <= 1e-3,
        format!("cp1 s-grid {:?}: all converged {all}, max |λ - 2| {spread:.1e} (1e-3), interval {:?}",
            report.entries.iter().map(|e| e.s).collect::<Vec<_>>(), report.converged_interval),
    );
    assert!(ok);
}

#[test]
fn manifold_factor_matches_cp1() {
    assert!((manifold_factor(1) * 2.0 - FOUR_PI).abs() < 1e-14);
}
