//! Fourth-order finite differences on tensor grids.
//!
//! One-dimensional operators are stored as sparse rows with the boundary
//! extension already folded in, so the same object serves for application,
//! transposed application and matrix assembly. Rows near the ends of an axis
//! may differ from line to line ([`AxisOp`]).

/// Extension rule for values beyond the last node of an axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reflect {
    /// `f(−k) = f(k)`.
    Even,
    /// `f(−k) = 2f(0) − f(k)`: functions with linear growth such as `log det`.
    OddLinear,
    /// Cubic extrapolation in `s = e^{−2|x|}`: exact for `c₀ + … + c₃s³`.
    Pole,
    /// The extension a [`Stencils`] was built with for smooth invariant
    /// fields; [`Reflect::Pole`] for plain line operators.
    Smooth,
}

const D1: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
const D2: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];
const STAG: [f64; 4] = [1.0 / 24.0, -27.0 / 24.0, 27.0 / 24.0, -1.0 / 24.0];
const INTERP: [f64; 4] = [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0];

/// Stencil shape: output row `r` reads virtual nodes `r + first + t`.
#[derive(Clone, Copy, Debug)]
struct Shape {
    out_len: usize,
    first: isize,
    taps: &'static [f64],
    scale: f64,
}

impl Shape {
    fn d1(m: usize, h: f64) -> Self {
        Shape { out_len: m, first: -2, taps: &D1, scale: 1.0 / h }
    }
    fn d2(m: usize, h: f64) -> Self {
        Shape { out_len: m, first: -2, taps: &D2, scale: 1.0 / (h * h) }
    }
    fn staggered(m: usize, h: f64) -> Self {
        Shape { out_len: m - 1, first: -1, taps: &STAG, scale: 1.0 / h }
    }
    fn midpoint(m: usize) -> Self {
        Shape { out_len: m - 1, first: -1, taps: &INTERP, scale: 1.0 }
    }

    fn row(&self, r: usize, fold: &dyn Fn(isize) -> Vec<(usize, f64)>) -> Vec<(usize, f64)> {
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(self.taps.len() + 3);
        for (t, &c) in self.taps.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (idx, w) in fold(r as isize + self.first + t as isize) {
                push(&mut row, idx, c * self.scale * w);
            }
        }
        row
    }

    fn reaches_outside(&self, r: usize, m: usize) -> bool {
        let lo = r as isize + self.first;
        let hi = lo + self.taps.len() as isize - 1;
        lo < 0 || hi > m as isize - 1
    }
}

#[derive(Clone, Debug)]
pub struct LineOp {
    pub in_len: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl LineOp {
    fn build(m: usize, h: f64, shape: Shape, mode: Reflect) -> Self {
        let ghosts = LineGhosts::pole(h);
        let f = |k: isize| fold(k, m, mode, &ghosts);
        LineOp { in_len: m, rows: (0..shape.out_len).map(|r| shape.row(r, &f)).collect() }
    }

    /// Centered first derivative at the nodes.
    pub fn d1(m: usize, h: f64, mode: Reflect) -> Self {
        Self::build(m, h, Shape::d1(m, h), mode)
    }

    /// Centered second derivative at the nodes.
    pub fn d2(m: usize, h: f64, mode: Reflect) -> Self {
        Self::build(m, h, Shape::d2(m, h), mode)
    }

    /// First derivative at the `m − 1` midpoints.
    pub fn staggered(m: usize, h: f64, mode: Reflect) -> Self {
        Self::build(m, h, Shape::staggered(m, h), mode)
    }

    /// Interpolation to the `m − 1` midpoints.
    pub fn midpoint(m: usize, h: f64, mode: Reflect) -> Self {
        Self::build(m, h, Shape::midpoint(m), mode)
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn apply_line(&self, f: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(i, c)| c * f[i]).sum();
        }
    }

    pub fn apply_line_t(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (gi, row) in g.iter().zip(&self.rows) {
            for &(i, c) in row {
                out[i] += c * gi;
            }
        }
    }
}

fn push(row: &mut Vec<(usize, f64)>, idx: usize, v: f64) {
    if let Some(e) = row.iter_mut().find(|e| e.0 == idx) {
        e.1 += v;
    } else {
        row.push((idx, v));
    }
}

/// Extrapolation weights for the two ghost nodes beyond each end of a line,
/// over the four nodes nearest that end (edge node first).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineGhosts {
    pub lo: [[f64; 4]; 2],
    pub hi: [[f64; 4]; 2],
}

impl LineGhosts {
    /// Cubic Lagrange extrapolation in a parameter `σ`; `nodes` holds `σ` at
    /// the edge node and the three nodes inward, `ghosts` at one and two steps out.
    pub fn lagrange(nodes: [f64; 4], ghosts: [f64; 2]) -> [[f64; 4]; 2] {
        let mut w = [[0.0; 4]; 2];
        for (g, &t) in ghosts.iter().enumerate() {
            for i in 0..4 {
                let mut c = 1.0;
                for j in 0..4 {
                    if j != i {
                        c *= (t - nodes[j]) / (nodes[i] - nodes[j]);
                    }
                }
                w[g][i] = c;
            }
        }
        w
    }

    /// `σ = e^{−2|x|}` relative to the edge node.
    pub fn pole(h: f64) -> Self {
        let e = |k: f64| (2.0 * h * k).exp();
        let w = Self::lagrange([1.0, e(1.0), e(2.0), e(3.0)], [e(-1.0), e(-2.0)]);
        LineGhosts { lo: w, hi: w }
    }
}

/// Expresses the value at virtual index `k` as a combination of real nodes.
fn fold(k: isize, m: usize, mode: Reflect, ghosts: &LineGhosts) -> Vec<(usize, f64)> {
    let last = m as isize - 1;
    if (0..=last).contains(&k) {
        return vec![(k as usize, 1.0)];
    }
    let (edge, inward, steps) = if k < 0 { (0, 1, -k) } else { (last, -1, k - last) };
    let mirror = (edge + inward * steps).clamp(0, last) as usize;
    match mode {
        Reflect::Even => vec![(mirror, 1.0)],
        Reflect::OddLinear => vec![(edge as usize, 2.0), (mirror, -1.0)],
        Reflect::Pole | Reflect::Smooth => {
            assert!(steps <= 2, "stencils reach at most two nodes past the edge");
            let w = if k < 0 { ghosts.lo } else { ghosts.hi };
            (0..4)
                .map(|i| ((edge + inward * i as isize) as usize, w[steps as usize - 1][i]))
                .collect()
        }
    }
}

/// A line operator whose rows near the two ends may depend on the line.
///
/// Lines along axis `a` are keyed by the indices on the other axes, read in
/// increasing axis order with base `m`.
#[derive(Clone, Debug)]
pub struct AxisOp {
    pub core: LineOp,
    /// Per line: `(row, entries)` replacing `core.rows[row]`; empty when uniform.
    pub edges: Vec<Vec<(usize, Vec<(usize, f64)>)>>,
}

impl AxisOp {
    pub fn uniform(core: LineOp) -> Self {
        AxisOp { core, edges: Vec::new() }
    }

    fn adapted(m: usize, h: f64, shape: Shape, lines: &[LineGhosts]) -> Self {
        let core = LineOp::build(m, h, shape, Reflect::Pole);
        let edges = lines
            .iter()
            .map(|g| {
                let f = |k: isize| fold(k, m, Reflect::Smooth, g);
                (0..shape.out_len)
                    .filter(|&r| shape.reaches_outside(r, m))
                    .map(|r| (r, shape.row(r, &f)))
                    .collect()
            })
            .collect();
        AxisOp { core, edges }
    }

    pub fn in_len(&self) -> usize {
        self.core.in_len
    }

    pub fn out_len(&self) -> usize {
        self.core.out_len()
    }

    pub fn row(&self, line: usize, r: usize) -> &[(usize, f64)] {
        if let Some(e) = self.edges.get(line) {
            if let Some((_, row)) = e.iter().find(|(k, _)| *k == r) {
                return row;
            }
        }
        &self.core.rows[r]
    }

    pub fn apply_line(&self, line: usize, f: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(line, r).iter().map(|&(i, c)| c * f[i]).sum();
        }
    }

    pub fn apply_line_t(&self, line: usize, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (r, gi) in g.iter().enumerate() {
            for &(i, c) in self.row(line, r) {
                out[i] += c * gi;
            }
        }
    }
}

/// Row-major tensor shape with axis 0 varying fastest.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len());
    let mut acc = 1;
    for &m in shape {
        s.push(acc);
        acc *= m;
    }
    s
}

/// Key of the line through `idx` along `axis`, for grids with `m` nodes per axis.
pub fn line_key(idx: &[usize], axis: usize, m: usize) -> usize {
    let mut key = 0;
    let mut base = 1;
    for (a, &i) in idx.iter().enumerate() {
        if a != axis {
            key += i.min(m - 1) * base;
            base *= m;
        }
    }
    key
}

/// Applies an axis operator along `axis`; returns the new field and its shape.
pub fn apply_axis(op: &AxisOp, f: &[f64], shape: &[usize], axis: usize, transpose: bool) -> (Vec<f64>, Vec<usize>) {
    let m_nodes = op.in_len();
    let m_in = if transpose { op.out_len() } else { op.in_len() };
    let m_out = if transpose { op.in_len() } else { op.out_len() };
    debug_assert_eq!(shape[axis], m_in);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = m_out;
    let s_in = strides(shape);
    let s_out = strides(&out_shape);
    let total_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; total_out];
    let lines: usize = shape.iter().enumerate().filter(|(a, _)| *a != axis).map(|(_, m)| m).product();
    let mut line_in = vec![0.0; m_in];
    let mut line_out = vec![0.0; m_out];
    let mut others: Vec<usize> = vec![0; shape.len()];
    for _ in 0..lines {
        let base_in: usize = (0..shape.len()).filter(|&a| a != axis).map(|a| others[a] * s_in[a]).sum();
        let base_out: usize = (0..shape.len()).filter(|&a| a != axis).map(|a| others[a] * s_out[a]).sum();
        let key = line_key(&others, axis, m_nodes);
        for (k, x) in line_in.iter_mut().enumerate() {
            *x = f[base_in + k * s_in[axis]];
        }
        if transpose {
            op.apply_line_t(key, &line_in, &mut line_out);
        } else {
            op.apply_line(key, &line_in, &mut line_out);
        }
        for (k, x) in line_out.iter().enumerate() {
            out[base_out + k * s_out[axis]] = *x;
        }
        for a in 0..shape.len() {
            if a == axis {
                continue;
            }
            others[a] += 1;
            if others[a] < shape[a] {
                break;
            }
            others[a] = 0;
        }
    }
    (out, out_shape)
}

/// Derivative operators for a cubic grid with `m` nodes per axis.
///
/// Smooth fields use the compact second difference on the diagonal of the
/// Hessian and, for `a ≠ b`, `∂_a∂_b = σ(Δ_σ − ∂_a² − ∂_b²)/2` where `Δ_σ`
/// is the compact second difference along the grid diagonal `e_a + σe_b`.
/// This keeps `Σ n_a n_b ∂_a∂_b f` exact for profiles constant along a
/// facet normal `n ∝ e_a + σe_b`, where `(D²ψ)⁻¹` is large.
#[derive(Clone, Debug)]
pub struct Stencils {
    pub dim: usize,
    pub m: usize,
    pub h: f64,
    /// Extension weights, `[axis][line]`.
    pub ghosts: Vec<Vec<LineGhosts>>,
    pub d1_smooth: Vec<AxisOp>,
    pub d2_smooth: Vec<AxisOp>,
    pub d1_odd: AxisOp,
    pub d2_odd: AxisOp,
    /// Staggered derivative and midpoint interpolation, per axis.
    pub stag: Vec<AxisOp>,
    pub mid: Vec<AxisOp>,
    /// `(a, b, σ, Δ_σ)` for every pair `a < b`.
    pub diag: Vec<(usize, usize, f64, Csr)>,
}

impl Stencils {
    /// Smooth fields extended by [`Reflect::Pole`] on every line; diagonals
    /// along `e_a + e_b`.
    pub fn new(dim: usize, m: usize, h: f64) -> Self {
        let lines = m.pow(dim as u32 - 1);
        let ghosts = vec![vec![LineGhosts::pole(h); lines]; dim];
        let pairs = dim * (dim - 1) / 2;
        Self::with_ghosts(dim, m, h, ghosts, &vec![1.0; pairs], None)
    }

    /// Smooth fields extended by cubic extrapolation in a parameter
    /// `sigma(x, v)` along each grid line, where `v` is the direction of
    /// travel past the box and `sigma` decreases along it; nodes sit at
    /// `x_k = −half_width + k h`. `sigma` must be finite two nodes past the
    /// box. `signs` gives `σ` for the pairs `(0,1), (0,2), (1,2)` in order.
    pub fn adapted(
        dim: usize,
        m: usize,
        h: f64,
        half_width: f64,
        sigma: &dyn Fn(&[f64], &[f64]) -> f64,
        signs: &[f64],
    ) -> Self {
        let lines = m.pow(dim as u32 - 1);
        let ghosts: Vec<Vec<LineGhosts>> = (0..dim)
            .map(|a| {
                (0..lines)
                    .map(|key| {
                        let mut x = vec![0.0; dim];
                        let mut rest = key;
                        for (b, xb) in x.iter_mut().enumerate() {
                            if b != a {
                                *xb = -half_width + (rest % m) as f64 * h;
                                rest /= m;
                            }
                        }
                        let mut side = |upper: bool| {
                            let (edge, dir) = if upper { (half_width, -1.0) } else { (-half_width, 1.0) };
                            let mut v = vec![0.0; dim];
                            v[a] = -dir;
                            let mut at = |steps: f64| {
                                x[a] = edge + dir * steps * h;
                                sigma(&x, &v)
                            };
                            let nodes = [at(0.0), at(1.0), at(2.0), at(3.0)];
                            let ghosts = [at(-1.0), at(-2.0)];
                            LineGhosts::lagrange(nodes, ghosts)
                        };
                        LineGhosts { lo: side(false), hi: side(true) }
                    })
                    .collect()
            })
            .collect();
        Self::with_ghosts(dim, m, h, ghosts, signs, Some((half_width, sigma)))
    }

    fn with_ghosts(
        dim: usize,
        m: usize,
        h: f64,
        ghosts: Vec<Vec<LineGhosts>>,
        signs: &[f64],
        along: Option<(f64, &dyn Fn(&[f64], &[f64]) -> f64)>,
    ) -> Self {
        let per_axis = |shape: Shape| -> Vec<AxisOp> {
            (0..dim).map(|a| AxisOp::adapted(m, h, shape, &ghosts[a])).collect()
        };
        let mut st = Stencils {
            dim,
            m,
            h,
            d1_smooth: per_axis(Shape::d1(m, h)),
            d2_smooth: per_axis(Shape::d2(m, h)),
            d1_odd: AxisOp::uniform(LineOp::d1(m, h, Reflect::OddLinear)),
            d2_odd: AxisOp::uniform(LineOp::d2(m, h, Reflect::OddLinear)),
            stag: per_axis(Shape::staggered(m, h)),
            mid: per_axis(Shape::midpoint(m)),
            ghosts,
            diag: Vec::new(),
        };
        let mut k = 0;
        for a in 0..dim {
            for b in a + 1..dim {
                let sign = signs.get(k).copied().unwrap_or(1.0);
                let op = st.diagonal_second_difference(a, b, sign, along);
                st.diag.push((a, b, sign, op));
                k += 1;
            }
        }
        st
    }

    /// The node value at a virtual multi-index, folded onto real nodes one
    /// axis at a time.
    pub fn fold_point(&self, idx: &[isize]) -> Vec<(usize, f64)> {
        let m = self.m as isize;
        let Some(a) = (0..self.dim).find(|&a| idx[a] < 0 || idx[a] >= m) else {
            let s = strides(&vec![self.m; self.dim]);
            let flat = idx.iter().zip(&s).map(|(&i, &st)| i as usize * st).sum();
            return vec![(flat, 1.0)];
        };
        let clamped: Vec<usize> = idx.iter().map(|&i| i.clamp(0, m - 1) as usize).collect();
        let key = line_key(&clamped, a, self.m);
        let mut out: Vec<(usize, f64)> = Vec::new();
        for (j, w) in fold(idx[a], self.m, Reflect::Smooth, &self.ghosts[a][key]) {
            let mut next = idx.to_vec();
            next[a] = j as isize;
            for (flat, v) in self.fold_point(&next) {
                push(&mut out, flat, w * v);
            }
        }
        out
    }

    /// Compact second difference along `e_a + σe_b`. Points past the box are
    /// extrapolated along the diagonal itself when `along` is given and four
    /// nodes of the diagonal lie inside; otherwise folded axis by axis.
    fn diagonal_second_difference(
        &self,
        a: usize,
        b: usize,
        sign: f64,
        along: Option<(f64, &dyn Fn(&[f64], &[f64]) -> f64)>,
    ) -> Csr {
        let total = self.m.pow(self.dim as u32);
        let shape = vec![self.m; self.dim];
        let s = strides(&shape);
        let scale = 1.0 / (self.h * self.h);
        let step = sign as isize;
        let m = self.m as isize;
        let inside = |p: &[isize]| p.iter().all(|&i| (0..m).contains(&i));
        let flat = |p: &[isize]| -> usize { p.iter().zip(&s).map(|(&i, &st)| i as usize * st).sum() };
        let rows = (0..total)
            .map(|node| {
                let idx: Vec<isize> = (0..self.dim).map(|d| ((node / s[d]) % self.m) as isize).collect();
                let mut row = Vec::with_capacity(8);
                for (t, &c) in D2.iter().enumerate() {
                    let off = t as isize - 2;
                    let shift = |p: &[isize], k: isize| -> Vec<isize> {
                        let mut q = p.to_vec();
                        q[a] += k;
                        q[b] += step * k;
                        q
                    };
                    let p = shift(&idx, off);
                    let entries = if inside(&p) {
                        vec![(flat(&p), 1.0)]
                    } else {
                        let dir = off.signum();
                        let mut e = 0;
                        while inside(&shift(&idx, dir * (e + 1))) {
                            e += 1;
                        }
                        let edge = shift(&idx, dir * e);
                        let inner: Vec<Vec<isize>> = (0..4).map(|i| shift(&edge, -dir * i)).collect();
                        match along {
                            Some((half_width, sigma)) if inner.iter().all(|q| inside(q)) => {
                                let mut v = vec![0.0; self.dim];
                                v[a] = dir as f64;
                                v[b] = (dir * step) as f64;
                                let x = |q: &[isize]| -> Vec<f64> {
                                    q.iter().map(|&i| -half_width + i as f64 * self.h).collect()
                                };
                                let nodes = [0, 1, 2, 3].map(|i| sigma(&x(&inner[i]), &v));
                                let ghosts = [1, 2].map(|j| sigma(&x(&shift(&edge, dir * j)), &v));
                                let w = LineGhosts::lagrange(nodes, ghosts);
                                let j = (off.abs() - e) as usize;
                                (0..4).map(|i| (flat(&inner[i]), w[j - 1][i])).collect()
                            }
                            _ => self.fold_point(&p),
                        }
                    };
                    for (j, w) in entries {
                        push(&mut row, j, c * scale * w);
                    }
                }
                row
            })
            .collect();
        Csr { ncols: total, rows }
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.m; self.dim]
    }

    fn ops(&self, mode: Reflect, axis: usize) -> (&AxisOp, &AxisOp) {
        match mode {
            Reflect::Smooth | Reflect::Pole => (&self.d1_smooth[axis], &self.d2_smooth[axis]),
            Reflect::OddLinear => (&self.d1_odd, &self.d2_odd),
            Reflect::Even => panic!("grid stencils are built for smooth and odd-linear extension"),
        }
    }

    pub fn d1(&self, f: &[f64], axis: usize, mode: Reflect) -> Vec<f64> {
        apply_axis(self.ops(mode, axis).0, f, &self.shape(), axis, false).0
    }

    /// `∂_a ∂_b f`. Odd-linear fields use `D1 ⊗ D1` off the diagonal.
    pub fn d2(&self, f: &[f64], a: usize, b: usize, mode: Reflect) -> Vec<f64> {
        if a == b {
            return apply_axis(self.ops(mode, a).1, f, &self.shape(), a, false).0;
        }
        if mode == Reflect::OddLinear {
            let (g, s) = apply_axis(self.ops(mode, a).0, f, &self.shape(), a, false);
            return apply_axis(self.ops(mode, b).0, &g, &s, b, false).0;
        }
        let faa = self.d2(f, a, a, mode);
        let fbb = self.d2(f, b, b, mode);
        self.mixed_from(f, a, b, &faa, &fbb)
    }

    fn mixed_from(&self, f: &[f64], a: usize, b: usize, faa: &[f64], fbb: &[f64]) -> Vec<f64> {
        let (lo, hi) = (a.min(b), a.max(b));
        let (_, _, sign, op) = self.diag.iter().find(|d| d.0 == lo && d.1 == hi).expect("pair operator");
        let along = op.matvec(f);
        along
            .iter()
            .zip(faa)
            .zip(fbb)
            .map(|((d, x), y)| 0.5 * sign * (d - x - y))
            .collect()
    }

    pub fn gradient(&self, f: &[f64], mode: Reflect) -> Vec<Vec<f64>> {
        (0..self.dim).map(|a| self.d1(f, a, mode)).collect()
    }

    /// All second derivatives, indexed `[a][b]`.
    pub fn hessian(&self, f: &[f64], mode: Reflect) -> Vec<Vec<Vec<f64>>> {
        let diag: Vec<Vec<f64>> = (0..self.dim).map(|a| self.d2(f, a, a, mode)).collect();
        let mut out = vec![vec![Vec::new(); self.dim]; self.dim];
        for a in 0..self.dim {
            out[a][a] = diag[a].clone();
            for b in a + 1..self.dim {
                let d = if mode == Reflect::OddLinear {
                    self.d2(f, a, b, mode)
                } else {
                    self.mixed_from(f, a, b, &diag[a], &diag[b])
                };
                out[b][a] = d.clone();
                out[a][b] = d;
            }
        }
        out
    }

    /// Sparse matrix of `f ↦ Σ_ab c_ab ∂_a∂_b f` at node `i`, with `coef(i)`
    /// returning the symmetric coefficients; smooth extension.
    pub fn second_order_matrix(&self, coef: &dyn Fn(usize) -> [[f64; 3]; 3]) -> Csr {
        let total = self.m.pow(self.dim as u32);
        let shape = self.shape();
        let s = strides(&shape);
        let axis_row = |a: usize, flat: usize| -> Vec<(usize, f64)> {
            let idx: Vec<usize> = (0..self.dim).map(|d| (flat / s[d]) % self.m).collect();
            let base = flat - idx[a] * s[a];
            self.d2_smooth[a]
                .row(line_key(&idx, a, self.m), idx[a])
                .iter()
                .map(|&(j, c)| (base + j * s[a], c))
                .collect()
        };
        let rows = (0..total)
            .map(|i| {
                let c = coef(i);
                let mut row: Vec<(usize, f64)> = Vec::new();
                let mut diag_w = vec![0.0; self.dim];
                for a in 0..self.dim {
                    diag_w[a] += c[a][a];
                }
                for (a, b, sign, op) in &self.diag {
                    // 2 c_ab ∂_a∂_b = c_ab σ (Δ_σ − ∂_a² − ∂_b²)
                    let w = c[*a][*b] * sign;
                    for &(j, v) in &op.rows[i] {
                        push(&mut row, j, w * v);
                    }
                    diag_w[*a] -= w;
                    diag_w[*b] -= w;
                }
                for a in 0..self.dim {
                    for (j, v) in axis_row(a, i) {
                        push(&mut row, j, diag_w[a] * v);
                    }
                }
                row
            })
            .collect();
        Csr { ncols: total, rows }
    }
}

/// Sparse matrix stored by rows.
#[derive(Clone, Debug)]
pub struct Csr {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Csr {
    /// Tensor product of per-axis operators; `None` is the identity. Output
    /// points are ordered with axis 0 fastest, like the grid. Edge rows are
    /// chosen by the output indices on the other axes.
    pub fn tensor(ops: &[Option<&AxisOp>], m: usize) -> Csr {
        let dim = ops.len();
        let in_shape = vec![m; dim];
        let out_shape: Vec<usize> = ops.iter().map(|o| o.map_or(m, |op| op.out_len())).collect();
        let s_in = strides(&in_shape);
        let total: usize = out_shape.iter().product();
        let mut rows = Vec::with_capacity(total);
        let mut k = vec![0usize; dim];
        for _ in 0..total {
            let mut row: Vec<(usize, f64)> = vec![(0, 1.0)];
            for a in 0..dim {
                let identity = [(k[a], 1.0)];
                let axis_row: &[(usize, f64)] = match ops[a] {
                    None => &identity,
                    Some(op) => op.row(line_key(&k, a, m), k[a]),
                };
                let mut next = Vec::with_capacity(row.len() * axis_row.len());
                for &(idx, c) in &row {
                    for &(j, w) in axis_row {
                        next.push((idx + j * s_in[a], c * w));
                    }
                }
                row = next;
            }
            rows.push(row);
            for a in 0..dim {
                k[a] += 1;
                if k[a] < out_shape[a] {
                    break;
                }
                k[a] = 0;
            }
        }
        Csr { ncols: m.pow(dim as u32), rows }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(j, c)| c * x[j]).sum()).collect()
    }

    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, &yi) in self.rows.iter().zip(y) {
            for &(j, c) in r {
                out[j] += c * yi;
            }
        }
        out
    }

    /// Largest `|i − j|` between column indices within one row.
    pub fn column_spread(&self) -> usize {
        self.rows
            .iter()
            .map(|r| {
                let lo = r.iter().map(|e| e.0).min().unwrap_or(0);
                let hi = r.iter().map(|e| e.0).max().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_are_fourth_order_in_the_interior() {
        let errs: Vec<f64> = [41usize, 81]
            .iter()
            .map(|&m| {
                let h = 2.0 / (m - 1) as f64;
                let xs: Vec<f64> = (0..m).map(|k| -1.0 + k as f64 * h).collect();
                let f: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
                let mut d = vec![0.0; m];
                LineOp::d2(m, h, Reflect::Even).apply_line(&f, &mut d);
                (5..m - 5).map(|k| (d[k] + xs[k].sin()).abs()).fold(0.0, f64::max)
            })
            .collect();
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 3.7, "observed order {order}");
    }

    #[test]
    fn even_reflection_is_exact_for_cosine_at_the_edge() {
        // cos is even about both ends of [0, π].
        let m = 101;
        let h = std::f64::consts::PI / (m - 1) as f64;
        let f: Vec<f64> = (0..m).map(|k| (k as f64 * h).cos()).collect();
        let mut d = vec![0.0; m];
        LineOp::d2(m, h, Reflect::Even).apply_line(&f, &mut d);
        for k in 0..m {
            assert!((d[k] + f[k]).abs() < 1e-6, "{k}");
        }
    }

    #[test]
    fn pole_extension_is_exact_near_the_edge() {
        // f = 1 + 3 tanh(x)² is smooth at the poles of the round sphere.
        let m = 129;
        let l = 6.0;
        let h = 2.0 * l / (m - 1) as f64;
        let xs: Vec<f64> = (0..m).map(|k| -l + k as f64 * h).collect();
        let f: Vec<f64> = xs.iter().map(|x| 1.0 + 3.0 * x.tanh().powi(2)).collect();
        let exact = |x: f64| {
            let s = 1.0 / x.cosh().powi(2);
            // d²/dx² tanh² = 2 sech⁴ − 4 tanh² sech²
            3.0 * (2.0 * s * s - 4.0 * x.tanh().powi(2) * s)
        };
        let mut d = vec![0.0; m];
        LineOp::d2(m, h, Reflect::Pole).apply_line(&f, &mut d);
        for k in [0usize, 1, m - 2, m - 1] {
            let e = exact(xs[k]);
            assert!((d[k] - e).abs() < 1e-3 * e.abs(), "{k}: {} vs {e}", d[k]);
        }
        let mut even = vec![0.0; m];
        LineOp::d2(m, h, Reflect::Even).apply_line(&f, &mut even);
        assert!((even[0] - exact(xs[0])).abs() > 10.0 * (d[0] - exact(xs[0])).abs());
    }

    #[test]
    fn odd_linear_reflection_preserves_affine_functions() {
        let m = 20;
        let f: Vec<f64> = (0..m).map(|k| 3.0 * k as f64 - 1.0).collect();
        let mut d = vec![0.0; m];
        LineOp::d2(m, 1.0, Reflect::OddLinear).apply_line(&f, &mut d);
        assert!(d.iter().all(|x| x.abs() < 1e-12));
        LineOp::d1(m, 1.0, Reflect::OddLinear).apply_line(&f, &mut d);
        assert!(d.iter().all(|x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn transpose_matches_inner_product() {
        let m = 17;
        let op = LineOp::staggered(m, 0.1, Reflect::Pole);
        let f: Vec<f64> = (0..m).map(|k| (k as f64).sqrt()).collect();
        let g: Vec<f64> = (0..m - 1).map(|k| (k as f64 * 0.7).cos()).collect();
        let mut sf = vec![0.0; m - 1];
        let mut tg = vec![0.0; m];
        op.apply_line(&f, &mut sf);
        op.apply_line_t(&g, &mut tg);
        let lhs: f64 = sf.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.iter().zip(&tg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn tensor_csr_matches_axis_application() {
        let m = 9;
        let st = Stencils::new(2, m, 0.2);
        let f: Vec<f64> = (0..m * m).map(|k| ((k * 7) % 11) as f64).collect();
        let csr = Csr::tensor(&[Some(&st.stag[0]), Some(&st.mid[1])], m);
        let (g, _) = apply_axis(&st.stag[0], &f, &[m, m], 0, false);
        let (g, _) = apply_axis(&st.mid[1], &g, &[m - 1, m], 1, false);
        let h = csr.matvec(&f);
        assert_eq!(g.len(), h.len());
        for (a, b) in g.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_derivative_of_product_on_a_plane() {
        let m = 41;
        let h = 2.0 / (m - 1) as f64;
        let st = Stencils::new(2, m, h);
        let mut f = vec![0.0; m * m];
        for j in 0..m {
            for i in 0..m {
                let (x, y) = (-1.0 + i as f64 * h, -1.0 + j as f64 * h);
                f[i + m * j] = x * x * x * y * y;
            }
        }
        let dxy = st.d2(&f, 0, 1, Reflect::OddLinear);
        let (i, j) = (20, 30);
        let (x, y) = (-1.0 + i as f64 * h, -1.0 + j as f64 * h);
        assert!((dxy[i + m * j] - 6.0 * x * x * y).abs() < 1e-10);
    }
}
