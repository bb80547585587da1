//! Experiment configuration, the continuity path, the J-functional and the
//! documents written by the command line front end.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::{self, EntropyOptions, Init};
use crate::error::{LabError, Result};
use crate::flow::{self, Checkpoint, FlowConfig, FlowTrace, Scheme};
use crate::grid::{perturbed_potential, profile_field, PotentialGrid, Profile, ToricModel};
use crate::invariants::{extremal_field, InvariantReport, TorusField};
use crate::io;
use crate::polytope::Polytope;
use crate::snapshot::{assemble_snapshot, assemble_snapshot_with, MetricSnapshot, SnapshotDocument, SnapshotOptions};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_width: f64,
    pub resolution: usize,
    /// Largest `|∫dV − V|/V` accepted for assembled metrics.
    #[serde(default = "default_calibration")]
    pub calibration_tol: f64,
}

fn default_calibration() -> f64 {
    crate::grid::DEFAULT_CALIBRATION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub dt: f64,
    pub t_end: f64,
    pub cadence: f64,
    /// Defaults to `cadence`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_cadence: Option<f64>,
    #[serde(default)]
    pub checkpoint_cadence: f64,
    #[serde(default = "semi_implicit")]
    pub scheme: Scheme,
}

fn semi_implicit() -> Scheme {
    Scheme::SemiImplicit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub amplitude: f64,
    /// One of `none`, `sech`, `sech2`, `moment_quadratic`, `moment_poly`.
    pub profile: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuitySection {
    pub s_values: Vec<f64>,
    /// Converged when `‖u‖_∞ < u_tol` ...
    pub u_tol: f64,
    /// ... and `|λ − target| < gap_tol · target`.
    pub gap_tol: f64,
    #[serde(default = "yes")]
    pub gauge: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardSection {
    pub t0: f64,
    pub dt: f64,
}

/// Everything a run depends on. Field names are the TOML keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `catalog:<name>` or a path to a polytope document.
    pub polytope: String,
    pub output_dir: PathBuf,
    pub grid: GridSection,
    pub flow: FlowSection,
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub entropy: EntropyOptions,
    pub continuity: ContinuitySection,
    pub backward: BackwardSection,
}

impl ExperimentConfig {
    /// Defaults at `L = 8`: 257 nodes per axis in one dimension; 65 in two,
    /// where the volume calibration is relaxed to `1e-3`.
    pub fn defaults(polytope: &str, dim: usize) -> ExperimentConfig {
        let (resolution, checkpoint_cadence, calibration_tol) =
            if dim == 1 { (257, 0.05, 1e-4) } else { (65, 0.0, 1e-3) };
        ExperimentConfig {
            polytope: polytope.into(),
            output_dir: PathBuf::from("out"),
            grid: GridSection { half_width: 8.0, resolution, calibration_tol },
            flow: FlowSection {
                dt: 1e-3,
                t_end: 20.0,
                cadence: 0.05,
                entropy_cadence: None,
                checkpoint_cadence,
                scheme: Scheme::SemiImplicit,
            },
            perturbation: PerturbationSpec { amplitude: 0.1, profile: "sech2".into(), seed: 0 },
            entropy: EntropyOptions::default(),
            continuity: ContinuitySection {
                s_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                u_tol: 1e-3,
                gap_tol: 1e-3,
                gauge: true,
            },
            backward: BackwardSection { t0: 10.0, dt: 1e-3 },
        }
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Parse(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the TOML form with `output_dir` blanked, so moving
    /// the output does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Invalid(m.into()));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.grid.calibration_tol) || self.grid.calibration_tol >= 1.0 {
            return bad("grid.calibration_tol must lie in (0, 1)");
        }
        if !pos(self.grid.half_width) {
            return bad("grid.half_width must be positive");
        }
        if self.grid.resolution < 9 || self.grid.resolution % 2 == 0 {
            return bad("grid.resolution must be odd and at least 9");
        }
        self.flow_config().validate()?;
        if !(self.perturbation.amplitude.is_finite() && self.perturbation.amplitude >= 0.0) {
            return bad("perturbation.amplitude must be nonnegative");
        }
        Profile::parse(&self.perturbation.profile)?;
        if self.perturbation.seed > i64::MAX as u64 {
            return bad("perturbation.seed must fit in 63 bits");
        }
        if !pos(self.entropy.tol) || self.entropy.max_iter == 0 || !pos(self.entropy.floor) {
            return bad("entropy tolerances must be positive");
        }
        let s = &self.continuity.s_values;
        if s.is_empty() || s[0] != 0.0 || s.windows(2).any(|w| !(w[1] > w[0])) || s.iter().any(|x| !x.is_finite()) {
            return bad("continuity.s_values must start at 0 and increase strictly");
        }
        if !pos(self.continuity.u_tol) || !pos(self.continuity.gap_tol) {
            return bad("continuity tolerances must be positive");
        }
        if !pos(self.backward.dt) || !(self.backward.t0 >= 1.0) {
            return bad("backward.dt must be positive and backward.t0 at least 1");
        }
        Ok(())
    }

    pub fn flow_config(&self) -> FlowConfig {
        let f = &self.flow;
        FlowConfig {
            dt: f.dt,
            t_end: f.t_end,
            cadence: f.cadence,
            entropy_cadence: f.entropy_cadence.unwrap_or(f.cadence),
            checkpoint_cadence: f.checkpoint_cadence,
            scheme: f.scheme,
            refactor_every: 1,
            entropy: self.entropy,
        }
    }

    pub fn profile(&self) -> Profile {
        Profile::parse(&self.perturbation.profile).expect("validated profile")
    }

    pub fn load_polytope(&self) -> Result<Polytope> {
        Polytope::load(&self.polytope)
    }

    pub fn model(&self) -> Result<Arc<ToricModel>> {
        ToricModel::with_calibration(
            self.load_polytope()?,
            self.grid.half_width,
            self.grid.resolution,
            self.grid.calibration_tol,
        )
    }

    /// The perturbed starting potential; returns the amplitude used.
    pub fn initial_grid(&self, model: &Arc<ToricModel>) -> Result<(PotentialGrid, f64)> {
        perturbed_potential(model, &self.profile(), self.perturbation.amplitude, self.perturbation.seed)
    }
}

/// Embedded in every document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format: String,
    /// Canonical JSON of the polytope.
    pub polytope: String,
    pub config_hash: String,
    pub code_version: String,
}

impl Provenance {
    pub fn new(format: &str, polytope: &Polytope, config: &ExperimentConfig) -> Provenance {
        Provenance {
            format: format.into(),
            polytope: polytope.canonical_json(),
            config_hash: config.hash(),
            code_version: CODE_VERSION.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document<T> {
    pub provenance: Provenance,
    pub body: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub config_hash: String,
    pub code_version: String,
    pub wall_time_seconds: f64,
    pub seed: u64,
    pub polytope: Option<String>,
    pub outputs: Vec<String>,
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Nodes and weights of `n`-point Gauss-Legendre quadrature on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

pub const J_NODES: usize = 16;

/// Volume calibration tolerance for the snapshots along `λφ`.
pub const J_CALIBRATION: f64 = 1e-3;

/// `J(φ) = −∫ φ e^{θ_b(φ)} ω_φ^n + ∫_0^1 ∫ φ e^{θ_b(λφ)} ω_{λφ}^n dλ`.
///
/// `phi` is an increment of the convex potential `ψ`; the Kähler potential
/// is `2·phi`. The λ-integral uses [`J_NODES`]-point Gauss-Legendre; the
/// snapshots at the nodes are calibrated to [`J_CALIBRATION`].
pub fn j_functional(base: &MetricSnapshot, phi: &[f64], b: &TorusField) -> Result<f64> {
    if phi.len() != base.len() {
        return Err(LabError::Invalid("φ has the wrong length".into()));
    }
    if phi.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    let pairing = |lam: f64| -> Result<f64> {
        let delta = base.grid.delta.iter().zip(phi).map(|(d, p)| d + lam * p).collect();
        let grid = base.grid.with_delta(delta);
        if let Some(node) = grid.first_nonconvex() {
            return Err(LabError::ConvexityLost {
                node,
                x: grid.spec().coords(node),
                detail: format!("ψ + {lam}·φ is not convex"),
            });
        }
        let s = assemble_snapshot_with(&grid, &SnapshotOptions { calibration_tol: J_CALIBRATION })?;
        let theta = s.theta(b);
        Ok(s.weight.iter().zip(&theta).zip(phi).map(|((w, t), p)| w * t.exp() * 2.0 * p).sum())
    };
    let mut mean = 0.0;
    for (x, w) in gauss_legendre(J_NODES) {
        mean += w * pairing(x)?;
    }
    Ok(mean - pairing(1.0)?)
}

/// Golden-section minimization of `f` on `[lo, hi]`.
pub fn golden_section(mut f: impl FnMut(f64) -> Result<f64>, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeFix {
    pub translation: Vec<f64>,
    pub j_raw: f64,
    pub j_gauged: f64,
}

/// Translation `v` minimizing `J(ψ_end(· + v) − ψ_base)` by cyclic
/// golden-section sweeps over the axes, with `|v_a| ≤ L/5`.
/// Golden-section assumes `J` unimodal in each coordinate.
pub fn gauge_fix(base: &MetricSnapshot, end: &PotentialGrid, b: &TorusField) -> Result<GaugeFix> {
    let n = base.dim();
    let bound = 0.2 * base.spec().half_width;
    // Translations that break discrete convexity near the box edge score +∞.
    let j_of = |v: &[f64]| -> Result<f64> {
        let moved = flow::gauge_shift(end, v)?;
        let phi: Vec<f64> = moved.delta.iter().zip(&base.grid.delta).map(|(a, b)| a - b).collect();
        match j_functional(base, &phi, b) {
            Err(LabError::ConvexityLost { .. }) | Err(LabError::ResolutionInsufficient(_)) if v.iter().any(|x| *x != 0.0) => {
                Ok(f64::INFINITY)
            }
            r => r,
        }
    };
    let j_raw = j_of(&vec![0.0; n])?;
    let mut v = vec![0.0; n];
    let mut best = j_raw;
    for _ in 0..if n == 1 { 1 } else { 3 } {
        for a in 0..n {
            let (x, fx) = golden_section(
                |t| {
                    let mut w = v.clone();
                    w[a] = t;
                    j_of(&w)
                },
                -bound,
                bound,
                1e-4,
            )?;
            if fx < best {
                best = fx;
                v[a] = x;
            }
        }
    }
    Ok(GaugeFix { translation: v, j_raw, j_gauged: best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityEntry {
    pub s: f64,
    pub converged: bool,
    pub final_u_c0: f64,
    pub final_lambda: f64,
    /// `λ − target`.
    pub gap: f64,
    pub gauge: Option<GaugeFix>,
    /// Least-squares rate `k` in `‖u‖_∞ ≈ C e^{−kt}` for `t ≥ 1`, over the
    /// samples more than a thousand times above the smallest one.
    pub u_decay_rate: Option<f64>,
    pub amplitude: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub target: f64,
    pub entries: Vec<ContinuityEntry>,
    /// `[0, s]` with every grid value up to `s` converged.
    pub converged_interval: [f64; 2],
}

/// Runs the flow from `ψ_0 + s·A·profile` for each configured `s`, where
/// `ψ_0` is the endpoint of the `s = 0` run from the reference potential.
/// Runs after the baseline execute on separate threads unless `sequential`.
pub fn continuity_path(config: &ExperimentConfig, sequential: bool) -> Result<ContinuityReport> {
    config.validate()?;
    let model = config.model()?;
    let fc = config.flow_config();
    let cs = &config.continuity;
    let target = model.extremal.sup_lambda_bound;
    let field = model.extremal.field();
    let converged = |t: &FlowTrace| {
        let lam = t.lambdas().last().map(|x| x.1).unwrap_or(f64::NAN);
        t.last().u_c0 < cs.u_tol && (lam - target).abs() < cs.gap_tol * target.abs()
    };

    let baseline = flow::run(&PotentialGrid::reference(&model), &fc)?;
    if !converged(&baseline) {
        return Err(LabError::NotConverged(format!(
            "baseline at s = 0 ends with ‖u‖ = {:.3e}, λ = {:?}",
            baseline.last().u_c0,
            baseline.lambdas().last()
        )));
    }
    let soliton = baseline.final_grid();
    let base_snap = assemble_snapshot(&soliton)?;
    // Amplitude halved until ψ_0 + φ is convex; then every ψ_0 + sφ, s ≤ 1, is.
    let unit = profile_field(&model, &config.profile(), config.perturbation.seed);
    let mut amp = config.perturbation.amplitude;
    let mut shape: Vec<f64> = unit.iter().map(|x| x * amp).collect();
    let end_delta = |shape: &[f64]| soliton.delta.iter().zip(shape).map(|(d, p)| d + p).collect::<Vec<_>>();
    for _ in 0..40 {
        if soliton.with_delta(end_delta(&shape)).first_nonconvex().is_none() {
            break;
        }
        amp *= 0.5;
        shape = unit.iter().map(|x| x * amp).collect();
    }

    let entry = |s: f64, trace: Result<(FlowTrace, f64)>| -> ContinuityEntry {
        match trace {
            Err(e) => ContinuityEntry {
                s,
                converged: false,
                final_u_c0: f64::NAN,
                final_lambda: f64::NAN,
                gap: f64::NAN,
                gauge: None,
                u_decay_rate: None,
                amplitude: 0.0,
                error: Some(format!("{}: {e}", e.kind())),
            },
            Ok((t, amp)) => {
                let lam = t.lambdas().last().map(|x| x.1).unwrap_or(f64::NAN);
                let ok = converged(&t);
                let (gauge, error) = if cs.gauge && ok {
                    match gauge_fix(&base_snap, &t.final_grid(), &field) {
                        Ok(g) => (Some(g), None),
                        Err(e) => (None, Some(format!("{}: {e}", e.kind()))),
                    }
                } else {
                    (None, None)
                };
                ContinuityEntry {
                    s,
                    converged: ok,
                    final_u_c0: t.last().u_c0,
                    final_lambda: lam,
                    gap: lam - target,
                    gauge,
                    u_decay_rate: decay_rate(&t),
                    amplitude: amp,
                    error,
                }
            }
        }
    };
    let run_s = |s: f64| -> Result<(FlowTrace, f64)> {
        if s == 0.0 {
            return Ok((baseline.clone(), 0.0));
        }
        let delta: Vec<f64> = soliton.delta.iter().zip(&shape).map(|(d, p)| d + s * p).collect();
        let grid = soliton.with_delta(delta);
        if let Some(node) = grid.first_nonconvex() {
            return Err(LabError::ConvexityLost {
                node,
                x: grid.spec().coords(node),
                detail: format!("ψ_0 + {s}·φ is not convex"),
            });
        }
        Ok((flow::run(&grid, &fc)?, s * amp))
    };

    let entries: Vec<ContinuityEntry> = if sequential {
        cs.s_values.iter().map(|&s| entry(s, run_s(s))).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cs
                .s_values
                .iter()
                .map(|&s| {
                    let (run_s, entry) = (&run_s, &entry);
                    scope.spawn(move || entry(s, run_s(s)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("continuity worker panicked")).collect()
        })
    };
    let mut top = 0.0;
    for e in &entries {
        if !e.converged {
            break;
        }
        top = e.s;
    }
    Ok(ContinuityReport { target, entries, converged_interval: [0.0, top] })
}

fn decay_rate(trace: &FlowTrace) -> Option<f64> {
    let floor = 1e3 * trace.samples.iter().map(|s| s.u_c0).fold(f64::INFINITY, f64::min).max(1e-15);
    let pts: Vec<(f64, f64)> = trace
        .samples
        .iter()
        .filter(|s| s.t >= 1.0 && s.u_c0 > floor)
        .map(|s| (s.t, s.u_c0.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let (st, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mt, my) = (st / m, sy / m);
    let (num, den) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + (p.0 - mt) * (p.1 - my), a.1 + (p.0 - mt).powi(2)));
    Some(-num / den)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub t: f64,
    /// Base64 `δ`, axis 0 fastest.
    pub delta: String,
}

/// Written by `flow` next to the CSV; read back by `backward`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub config: ExperimentConfig,
    pub amplitude: f64,
    pub steps: usize,
    pub halved: usize,
    pub warnings: Vec<String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_delta: String,
    pub energy_level: Option<entropy::EnergyLevel>,
}

impl TraceRecord {
    /// Rebuilds the trace; diagnostics samples are not stored.
    pub fn to_trace(&self) -> Result<FlowTrace> {
        let model = self.config.model()?;
        let decode = |s: &str| -> Result<Vec<f64>> {
            let d = io::decode_f64s(s)?;
            if d.len() != model.spec.len() {
                return Err(LabError::Parse("checkpoint length does not match the grid".into()));
            }
            Ok(d)
        };
        let checkpoints = self
            .checkpoints
            .iter()
            .map(|c| Ok(Checkpoint { t: c.t, delta: decode(&c.delta)? }))
            .collect::<Result<Vec<_>>>()?;
        let final_delta = decode(&self.final_delta)?;
        Ok(FlowTrace {
            model,
            config: self.config.flow_config(),
            samples: Vec::new(),
            checkpoints,
            warnings: self.warnings.clone(),
            steps: self.steps,
            halved: self.halved,
            final_delta,
        })
    }
}

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_RECORD: &str = "trace.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyBody {
    pub lambda: f64,
    pub residual: f64,
    pub iterations: usize,
    /// `W(g, 0)` after normalization and `W(g, −θ_X)`.
    pub w_zero: f64,
    pub w_minus_theta: f64,
    pub trace_form_bound: f64,
    pub grid: crate::GridSpec,
    /// Base64 minimizer `f`.
    pub f: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackwardBody {
    pub t0: f64,
    pub dt: f64,
    /// `(t, W, normalization defect, ‖f‖_∞)` from `t₀` downwards.
    pub samples: Vec<(f64, f64, f64, f64)>,
    pub lambda_t0: f64,
    pub lambda_t0_minus_1: f64,
    pub lambda_gap: f64,
    pub w_gap: f64,
    pub worst_decrease: f64,
    pub worst_defect: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JBody {
    pub amplitude: f64,
    pub profile: String,
    pub seed: u64,
    pub field: Vec<f64>,
    pub j: f64,
    pub gauge: GaugeFix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowSummary {
    pub amplitude: f64,
    pub final_lambda: Option<f64>,
    pub final_u_c0: f64,
    pub lambda_monotone: bool,
    pub worst_lambda_drop: f64,
    pub energy_level: Option<entropy::EnergyLevel>,
    pub warnings: Vec<String>,
    pub steps: usize,
    pub halved: usize,
}

/// Outcome of a command: files written and a one-line summary.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: String,
    pub polytope: Option<Polytope>,
}

fn write_doc<T: Serialize>(out: &Path, name: &str, prov: Provenance, body: T) -> Result<PathBuf> {
    let path = out.join(name);
    io::write_json(&path, &Document { provenance: prov, body })?;
    Ok(path)
}

pub fn run_invariants(config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let p = config.load_polytope()?;
    let report: InvariantReport = extremal_field(&p)?;
    let summary = format!("c={:?} n_x={:.12e} bound={:.12}", report.c, report.n_x, report.sup_lambda_bound);
    let path = write_doc(out, "invariants.json", Provenance::new("kahler-lab/invariants/1", &p, config), report)?;
    Ok(Outcome { outputs: vec![path], summary, polytope: Some(p) })
}

pub fn run_flow(config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let model = config.model()?;
    let (grid, amplitude) = config.initial_grid(&model)?;
    let trace = flow::run(&grid, &config.flow_config())?;
    let p = model.polytope.clone();
    let csv = out.join(TRACE_CSV);
    std::fs::write(&csv, trace.to_csv())?;
    let energy = entropy::energy_level(&trace).ok();
    let record = TraceRecord {
        config: config.clone(),
        amplitude,
        steps: trace.steps,
        halved: trace.halved,
        warnings: trace.warnings.clone(),
        checkpoints: trace
            .checkpoints
            .iter()
            .map(|c| CheckpointRecord { t: c.t, delta: io::encode_f64s(&c.delta) })
            .collect(),
        final_delta: io::encode_f64s(&trace.final_delta),
        energy_level: energy.clone(),
    };
    let rec = write_doc(out, TRACE_RECORD, Provenance::new("kahler-lab/trace/1", &p, config), record)?;
    let lam = trace.lambdas();
    let worst_lambda_drop = lam.windows(2).map(|w| w[0].1 - w[1].1).fold(f64::NEG_INFINITY, f64::max);
    let summary = FlowSummary {
        amplitude,
        final_lambda: lam.last().map(|x| x.1),
        final_u_c0: trace.last().u_c0,
        lambda_monotone: worst_lambda_drop <= 1e-6,
        worst_lambda_drop,
        energy_level: energy,
        warnings: trace.warnings.clone(),
        steps: trace.steps,
        halved: trace.halved,
    };
    let line = format!(
        "final_lambda={:?} final_u={:.3e} warnings={}",
        summary.final_lambda,
        summary.final_u_c0,
        summary.warnings.len()
    );
    let sum = write_doc(out, "flow_summary.json", Provenance::new("kahler-lab/flow-summary/1", &p, config), summary)?;
    let snap = assemble_snapshot(&trace.final_grid())?;
    let snap_path = write_doc(
        out,
        "final_snapshot.json",
        Provenance::new("kahler-lab/snapshot-document/1", &p, config),
        snap.to_document(),
    )?;
    Ok(Outcome { outputs: vec![csv, rec, sum, snap_path], summary: line, polytope: Some(p) })
}

/// `λ` of a stored snapshot, or of the configured starting potential.
pub fn run_entropy(config: &ExperimentConfig, snapshot: Option<&Path>, out: &Path) -> Result<Outcome> {
    let grid = match snapshot {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let doc: SnapshotDocument = match serde_json::from_str::<Document<SnapshotDocument>>(&text) {
                Ok(d) => d.body,
                Err(_) => serde_json::from_str(&text).map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?,
            };
            doc.to_grid()?
        }
        None => config.initial_grid(&config.model()?)?.0,
    };
    let s = assemble_snapshot(&grid)?;
    let m = entropy::minimize_w(&s, Init::Warm, &config.entropy)?;
    let zero = entropy::normalize_f(&s, &vec![0.0; s.len()]);
    let minus_theta: Vec<f64> = s.theta_x.iter().map(|t| -t).collect();
    let body = EntropyBody {
        lambda: m.lambda,
        residual: m.residual,
        iterations: m.iterations,
        w_zero: entropy::w_functional(&s, &zero)?,
        w_minus_theta: entropy::w_functional(&s, &entropy::normalize_f(&s, &minus_theta))?,
        trace_form_bound: entropy::trace_form_bound(&s, &m.f),
        grid: s.spec(),
        f: io::encode_f64s(&m.f),
    };
    let p = s.polytope().clone();
    let summary = format!("lambda={:.12} residual={:.3e} iterations={}", m.lambda, m.residual, m.iterations);
    let path = write_doc(out, "entropy.json", Provenance::new("kahler-lab/entropy/1", &p, config), body)?;
    Ok(Outcome { outputs: vec![path], summary, polytope: Some(p) })
}

pub fn run_backward(config: &ExperimentConfig, trace_dir: &Path, t0: Option<f64>, out: &Path) -> Result<Outcome> {
    let doc: Document<TraceRecord> = io::read_json(&trace_dir.join(TRACE_RECORD))?;
    let trace = doc.body.to_trace()?;
    let t0 = t0.unwrap_or(config.backward.t0);
    let path = entropy::backward_heat(&trace, t0, config.backward.dt, &config.entropy)?;
    let body = BackwardBody {
        t0: path.t0,
        dt: path.dt,
        samples: path.samples.iter().map(|s| (s.t, s.w, s.normalization_defect, s.f_c0)).collect(),
        lambda_t0: path.lambda_t0,
        lambda_t0_minus_1: path.lambda_t0_minus_1,
        lambda_gap: path.lambda_gap(),
        w_gap: path.w_gap(),
        worst_decrease: path.worst_decrease,
        worst_defect: path.worst_defect,
    };
    let p = trace.model.polytope.clone();
    let summary = format!(
        "worst_w_decrease={:.3e} lambda_gap={:.6e} w_gap={:.6e}",
        body.worst_decrease, body.lambda_gap, body.w_gap
    );
    let mut prov = Provenance::new("kahler-lab/backward/1", &p, config);
    prov.config_hash = doc.provenance.config_hash;
    let out_path = write_doc(out, "backward.json", prov, body)?;
    Ok(Outcome { outputs: vec![out_path], summary, polytope: Some(p) })
}

/// `J` of the configured perturbation at the reference metric, raw and gauge-fixed.
pub fn run_jfunc(config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let model = config.model()?;
    let base = assemble_snapshot(&PotentialGrid::reference(&model))?;
    let (grid, amplitude) = config.initial_grid(&model)?;
    let field = model.extremal.field();
    let j = j_functional(&base, &grid.delta, &field)?;
    let gauge = gauge_fix(&base, &grid, &field)?;
    let p = model.polytope.clone();
    let summary = format!("j={j:.12e} j_gauged={:.12e} v={:?}", gauge.j_gauged, gauge.translation);
    let body = JBody {
        amplitude,
        profile: config.perturbation.profile.clone(),
        seed: config.perturbation.seed,
        field: field.b.clone(),
        j,
        gauge,
    };
    let path = write_doc(out, "jfunc.json", Provenance::new("kahler-lab/jfunc/1", &p, config), body)?;
    Ok(Outcome { outputs: vec![path], summary, polytope: Some(p) })
}

pub fn run_continuity(config: &ExperimentConfig, sequential: bool, out: &Path) -> Result<Outcome> {
    let report = continuity_path(config, sequential)?;
    let p = config.load_polytope()?;
    let summary = format!(
        "converged_interval=[{}, {}] runs={}",
        report.converged_interval[0],
        report.converged_interval[1],
        report.entries.len()
    );
    let path = write_doc(out, "continuity.json", Provenance::new("kahler-lab/continuity/1", &p, config), report)?;
    Ok(Outcome { outputs: vec![path], summary, polytope: Some(p) })
}

/// Runs `body`, timing it and writing the manifest whether or not it failed.
pub fn with_manifest(
    command: &str,
    config: &ExperimentConfig,
    out: &Path,
    body: impl FnOnce() -> Result<Outcome>,
) -> Result<Outcome> {
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let result = body();
    let (status, outputs, polytope, error) = match &result {
        Ok(o) => (
            "ok",
            o.outputs.iter().map(|p| p.display().to_string()).collect(),
            o.polytope.as_ref().map(|p| p.canonical_json()),
            None,
        ),
        Err(e) => ("error", Vec::new(), config.load_polytope().ok().map(|p| p.canonical_json()), Some(e.to_string())),
    };
    let manifest = Manifest {
        command: command.into(),
        status: status.into(),
        config_hash: config.hash(),
        code_version: CODE_VERSION.into(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        seed: config.perturbation.seed,
        polytope,
        outputs,
        error,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    result
}
