//! Reflexive moment polytopes of toric Fano manifolds.
//!
//! A polytope is `Δ = {y : ⟨y, ν⟩ ≥ −1 for every facet normal ν}` with
//! integral normals. Construction is exact: vertices are rational, the
//! V- and H-representations are cross-checked, and `Δ` is split into
//! simplices that share the origin as apex.

use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rational::{self, Rational};

#[derive(Clone, Debug)]
pub struct Polytope {
    pub name: String,
    pub dim: usize,
    /// Integral facet normals, sorted lexicographically.
    pub facets: Vec<Vec<i64>>,
    /// Exact vertices, sorted lexicographically.
    pub vertices: Vec<Vec<Rational>>,
    /// Each simplex is the origin plus `dim` vertex indices.
    pub simplices: Vec<Vec<usize>>,
    volume: Rational,
    vertices_f64: Vec<Vec<f64>>,
}

/// Structured-text form of a polytope.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PolytopeDocument {
    pub name: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facet_normals: Option<Vec<Vec<i64>>>,
    /// Rationals written as `"p/q"` or plain integers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<Vec<RationalText>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RationalText {
    Int(i64),
    Text(String),
}

impl RationalText {
    fn value(&self) -> Result<Rational> {
        match self {
            RationalText::Int(i) => Ok(Rational::from_integer(*i)),
            RationalText::Text(t) => rational::parse_rational(t),
        }
    }
}

pub const CATALOG: [&str; 4] = ["cp1", "cp2", "cp1xcp1", "bl1cp2"];

impl Polytope {
    /// Built-in examples: `cp1`, `cp2`, `cp1xcp1`, `bl1cp2`.
    pub fn catalog(name: &str) -> Result<Polytope> {
        let normals: Vec<Vec<i64>> = match name {
            "cp1" => vec![vec![1], vec![-1]],
            "cp2" => vec![vec![1, 0], vec![0, 1], vec![-1, -1]],
            "cp1xcp1" => vec![vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1]],
            "bl1cp2" => vec![vec![1, 0], vec![0, 1], vec![-1, -1], vec![1, 1]],
            other => {
                return Err(LabError::Invalid(format!(
                    "unknown catalog polytope `{other}` (known: {})",
                    CATALOG.join(", ")
                )))
            }
        };
        let dim = normals[0].len();
        Polytope::from_facets(name, dim, normals)
    }

    pub fn from_document(doc: &PolytopeDocument) -> Result<Polytope> {
        if doc.dim < 1 {
            return Err(LabError::Invalid("dimension must be at least 1".into()));
        }
        if doc.dim > 3 {
            return Err(LabError::Invalid("dimensions above 3 are not supported".into()));
        }
        match (&doc.facet_normals, &doc.vertices) {
            (Some(normals), None) => Polytope::from_facets(&doc.name, doc.dim, normals.clone()),
            (None, Some(verts)) => {
                let verts = verts
                    .iter()
                    .map(|v| v.iter().map(RationalText::value).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                Polytope::from_vertices(&doc.name, doc.dim, verts)
            }
            (Some(normals), Some(verts)) => {
                let from_h = Polytope::from_facets(&doc.name, doc.dim, normals.clone())?;
                let mut verts = verts
                    .iter()
                    .map(|v| v.iter().map(RationalText::value).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                verts.sort();
                verts.dedup();
                if verts != from_h.vertices {
                    return Err(LabError::RepresentationMismatch(
                        "supplied vertices differ from the facet intersection".into(),
                    ));
                }
                Ok(from_h)
            }
            (None, None) => Err(LabError::Invalid(
                "document needs facet_normals or vertices".into(),
            )),
        }
    }

    /// Parses a JSON or TOML polytope document, or a `catalog:<name>` reference.
    pub fn load(source: &str) -> Result<Polytope> {
        if let Some(name) = source.strip_prefix("catalog:") {
            return Polytope::catalog(name);
        }
        let text = std::fs::read_to_string(source)?;
        Polytope::from_document(&parse_document(&text)?)
    }

    pub fn from_facets(name: &str, dim: usize, normals: Vec<Vec<i64>>) -> Result<Polytope> {
        if dim < 1 {
            return Err(LabError::Invalid("dimension must be at least 1".into()));
        }
        if dim > 3 {
            return Err(LabError::Invalid("dimensions above 3 are not supported".into()));
        }
        if normals.iter().any(|v| v.len() != dim) {
            return Err(LabError::Invalid("facet normal has wrong length".into()));
        }
        if normals.iter().any(|v| v.iter().all(|&c| c == 0)) {
            return Err(LabError::Invalid("zero facet normal".into()));
        }
        let mut normals = normals;
        normals.sort();
        normals.dedup();
        let nu: Vec<Vec<Rational>> = normals
            .iter()
            .map(|v| v.iter().map(|&c| Rational::from_integer(c)).collect())
            .collect();
        check_bounded(&nu, dim)?;

        let vertices = enumerate_vertices(&nu, dim);
        if vertices.len() < dim + 1 {
            return Err(LabError::RepresentationMismatch(
                "facet inequalities do not cut out a full-dimensional polytope".into(),
            ));
        }
        // Every inequality must support a genuine facet.
        for (k, normal) in nu.iter().enumerate() {
            let on: Vec<Vec<Rational>> = vertices
                .iter()
                .filter(|v| rational::dot(v, normal) == Rational::from_integer(-1))
                .cloned()
                .collect();
            if on.is_empty() || affine_rank(&on) + 1 < dim {
                return Err(LabError::RepresentationMismatch(format!(
                    "inequality with normal {:?} is redundant",
                    normals[k]
                )));
            }
        }
        Polytope::assemble(name, dim, normals, vertices)
    }

    pub fn from_vertices(name: &str, dim: usize, vertices: Vec<Vec<Rational>>) -> Result<Polytope> {
        if dim < 1 {
            return Err(LabError::Invalid("dimension must be at least 1".into()));
        }
        if vertices.iter().any(|v| v.len() != dim) {
            return Err(LabError::Invalid("vertex has wrong length".into()));
        }
        let mut vertices = vertices;
        vertices.sort();
        vertices.dedup();
        if affine_rank(&vertices) < dim {
            return Err(LabError::RepresentationMismatch(
                "vertices do not span a full-dimensional polytope".into(),
            ));
        }
        let mut normals: Vec<Vec<i64>> = Vec::new();
        for subset in combinations(vertices.len(), dim) {
            let pts: Vec<&Vec<Rational>> = subset.iter().map(|&i| &vertices[i]).collect();
            // Hyperplane ⟨a, y⟩ = β through the chosen points.
            let Some((a, beta)) = hyperplane_through(&pts, dim) else {
                continue;
            };
            let sides: Vec<Rational> = vertices.iter().map(|v| rational::dot(&a, v) - beta).collect();
            let pos = sides.iter().any(|s| s.is_positive());
            let neg = sides.iter().any(|s| s.is_negative());
            if pos && neg {
                continue;
            }
            // Orient so that Δ lies in ⟨a, y⟩ ≥ β.
            let (a, beta) = if neg {
                (a.iter().map(|x| -x).collect::<Vec<_>>(), -beta)
            } else {
                (a, beta)
            };
            if !beta.is_negative() {
                return Err(LabError::NotFano(
                    "origin is not in the interior of the polytope".into(),
                ));
            }
            let scale = -beta;
            let mut normal = Vec::with_capacity(dim);
            for x in &a {
                let c = x / scale;
                if !c.is_integer() {
                    return Err(LabError::RepresentationMismatch(
                        "facet normal is not integral at offset −1 (polytope is not reflexive)"
                            .into(),
                    ));
                }
                normal.push(c.to_integer());
            }
            normals.push(normal);
        }
        normals.sort();
        normals.dedup();
        let from_h = Polytope::from_facets(name, dim, normals)?;
        if from_h.vertices != vertices {
            return Err(LabError::RepresentationMismatch(
                "supplied points include non-vertices or miss vertices".into(),
            ));
        }
        Ok(from_h)
    }

    fn assemble(
        name: &str,
        dim: usize,
        facets: Vec<Vec<i64>>,
        mut vertices: Vec<Vec<Rational>>,
    ) -> Result<Polytope> {
        vertices.sort();
        let vertices_f64: Vec<Vec<f64>> = vertices
            .iter()
            .map(|v| v.iter().map(rational::to_f64).collect())
            .collect();
        let mut simplices = Vec::new();
        for normal in &facets {
            let nu: Vec<Rational> = normal.iter().map(|&c| Rational::from_integer(c)).collect();
            let on: Vec<usize> = (0..vertices.len())
                .filter(|&i| rational::dot(&vertices[i], &nu) == Rational::from_integer(-1))
                .collect();
            match dim {
                1 | 2 => simplices.push(on),
                3 => {
                    let ordered = cyclic_order(&on, &vertices_f64, normal);
                    for k in 1..ordered.len() - 1 {
                        simplices.push(vec![ordered[0], ordered[k], ordered[k + 1]]);
                    }
                }
                _ => unreachable!(),
            }
        }
        let mut volume = Rational::zero();
        for s in &simplices {
            volume += simplex_volume(s.iter().map(|&i| &vertices[i]).collect());
        }
        Ok(Polytope {
            name: name.to_string(),
            dim,
            facets,
            vertices,
            simplices,
            volume,
            vertices_f64,
        })
    }

    /// Exact Euclidean volume of `Δ`.
    pub fn volume_exact(&self) -> Rational {
        self.volume
    }

    /// `(Vol(Δ), V)` with `V = n!(2π)^n Vol(Δ)`.
    pub fn volume(&self) -> (f64, f64) {
        let vol = rational::to_f64(&self.volume);
        (vol, crate::manifold_factor(self.dim) * vol)
    }

    pub fn vertices_f64(&self) -> &[Vec<f64>] {
        &self.vertices_f64
    }

    /// Vertex coordinates of simplex `k`, origin first.
    pub fn simplex_points(&self, k: usize) -> Vec<Vec<f64>> {
        let mut pts = vec![vec![0.0; self.dim]];
        pts.extend(self.simplices[k].iter().map(|&i| self.vertices_f64[i].clone()));
        pts
    }

    pub fn simplex_volume_f64(&self, k: usize) -> f64 {
        rational::to_f64(&simplex_volume(
            self.simplices[k].iter().map(|&i| &self.vertices[i]).collect(),
        ))
    }

    /// Membership test against the H-representation.
    pub fn contains(&self, y: &[f64], slack: f64) -> bool {
        self.facets.iter().all(|nu| {
            let s: f64 = nu.iter().zip(y).map(|(a, b)| *a as f64 * b).sum();
            s >= -1.0 - slack
        })
    }

    pub fn max_linear(&self, b: &[f64]) -> f64 {
        self.vertices_f64
            .iter()
            .map(|v| v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_document(&self) -> PolytopeDocument {
        PolytopeDocument {
            name: self.name.clone(),
            dim: self.dim,
            facet_normals: Some(self.facets.clone()),
            vertices: Some(
                self.vertices
                    .iter()
                    .map(|v| {
                        v.iter()
                            .map(|r| {
                                if *r.denom() == 1 {
                                    RationalText::Int(*r.numer())
                                } else {
                                    RationalText::Text(rational::format_rational(r))
                                }
                            })
                            .collect()
                    })
                    .collect(),
            ),
        }
    }

    /// Canonical single-line JSON form, used for provenance.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("polytope document serializes")
    }
}

pub fn parse_document(text: &str) -> Result<PolytopeDocument> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        serde_json::from_str(text).map_err(|e| LabError::Parse(e.to_string()))
    } else {
        toml::from_str(text).map_err(|e| LabError::Parse(e.to_string()))
    }
}

fn check_bounded(nu: &[Vec<Rational>], dim: usize) -> Result<()> {
    let unbounded = || {
        LabError::RepresentationMismatch("facet inequalities define an unbounded region".into())
    };
    if rational::rank(nu) < dim {
        return Err(unbounded());
    }
    // A nonzero recession direction would be an extreme ray, orthogonal to
    // dim − 1 independent normals and nonnegative on the rest.
    let candidates: Vec<Vec<Rational>> = if dim == 1 {
        vec![vec![Rational::from_integer(1)]]
    } else {
        combinations(nu.len(), dim - 1)
            .into_iter()
            .filter_map(|subset| {
                let rows: Vec<Vec<Rational>> = subset.iter().map(|&i| nu[i].clone()).collect();
                if rational::rank(&rows) == dim - 1 {
                    rational::null_vector(&rows, dim)
                } else {
                    None
                }
            })
            .collect()
    };
    for d in candidates {
        for sign in [1i64, -1] {
            let dir: Vec<Rational> = d.iter().map(|x| x * Rational::from_integer(sign)).collect();
            if nu.iter().all(|n| !rational::dot(n, &dir).is_negative()) {
                return Err(unbounded());
            }
        }
    }
    Ok(())
}

fn enumerate_vertices(nu: &[Vec<Rational>], dim: usize) -> Vec<Vec<Rational>> {
    let rhs = vec![Rational::from_integer(-1); dim];
    let mut out: Vec<Vec<Rational>> = Vec::new();
    for subset in combinations(nu.len(), dim) {
        let a: Vec<Vec<Rational>> = subset.iter().map(|&i| nu[i].clone()).collect();
        if let Some(y) = rational::solve(&a, &rhs) {
            if nu
                .iter()
                .all(|n| rational::dot(n, &y) >= Rational::from_integer(-1))
            {
                out.push(y);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn affine_rank(points: &[Vec<Rational>]) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let diffs: Vec<Vec<Rational>> = points[1..]
        .iter()
        .map(|p| p.iter().zip(&points[0]).map(|(a, b)| a - b).collect())
        .collect();
    rational::rank(&diffs)
}

fn hyperplane_through(pts: &[&Vec<Rational>], dim: usize) -> Option<(Vec<Rational>, Rational)> {
    if dim == 1 {
        return Some((vec![Rational::from_integer(1)], pts[0][0]));
    }
    let diffs: Vec<Vec<Rational>> = pts[1..]
        .iter()
        .map(|p| p.iter().zip(pts[0].iter()).map(|(a, b)| a - b).collect())
        .collect();
    if rational::rank(&diffs) < dim - 1 {
        return None;
    }
    let a = rational::null_vector(&diffs, dim)?;
    let beta = rational::dot(&a, pts[0]);
    Some((a, beta))
}

fn simplex_volume(pts: Vec<&Vec<Rational>>) -> Rational {
    let dim = pts.len();
    let m: Vec<Vec<Rational>> = pts.iter().map(|p| (*p).clone()).collect();
    let fact: i64 = (1..=dim as i64).product();
    rational::abs(&rational::determinant(&m)) / Rational::from_integer(fact)
}

fn cyclic_order(on: &[usize], verts: &[Vec<f64>], normal: &[i64]) -> Vec<usize> {
    let k = on.len() as f64;
    let centre: Vec<f64> = (0..3)
        .map(|d| on.iter().map(|&i| verts[i][d]).sum::<f64>() / k)
        .collect();
    let nrm: Vec<f64> = normal.iter().map(|&c| c as f64).collect();
    // Orthonormal frame (e1, e2) of the facet plane.
    let p0: Vec<f64> = (0..3).map(|d| verts[on[0]][d] - centre[d]).collect();
    let len = p0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e1: Vec<f64> = p0.iter().map(|x| x / len).collect();
    let mut e2 = vec![
        nrm[1] * e1[2] - nrm[2] * e1[1],
        nrm[2] * e1[0] - nrm[0] * e1[2],
        nrm[0] * e1[1] - nrm[1] * e1[0],
    ];
    let l2 = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
    e2.iter_mut().for_each(|x| *x /= l2);
    let mut keyed: Vec<(f64, usize)> = on
        .iter()
        .map(|&i| {
            let p: Vec<f64> = (0..3).map(|d| verts[i][d] - centre[d]).collect();
            let u: f64 = p.iter().zip(&e1).map(|(a, b)| a * b).sum();
            let v: f64 = p.iter().zip(&e2).map(|(a, b)| a * b).sum();
            (v.atan2(u), i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(p: i64) -> Rational {
        Rational::from_integer(p)
    }

    #[test]
    fn cp1_is_the_unit_interval() {
        let p = Polytope::catalog("cp1").unwrap();
        assert_eq!(p.vertices, vec![vec![r(-1)], vec![r(1)]]);
        let (vol, v) = p.volume();
        assert_eq!(vol, 2.0);
        assert!((v - 4.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn cp2_vertices_solve_pairwise_facets() {
        let p = Polytope::catalog("cp2").unwrap();
        let expected = vec![vec![r(-1), r(-1)], vec![r(-1), r(2)], vec![r(2), r(-1)]];
        assert_eq!(p.vertices, expected);
        assert_eq!(p.volume_exact(), Rational::new(9, 2));
    }

    #[test]
    fn square_and_blowup_volumes() {
        assert_eq!(Polytope::catalog("cp1xcp1").unwrap().volume_exact(), r(4));
        let bl = Polytope::catalog("bl1cp2").unwrap();
        assert_eq!(bl.vertices.len(), 4);
        assert_eq!(bl.volume_exact(), r(4));
    }

    #[test]
    fn unbounded_strip_is_rejected() {
        let err = Polytope::from_facets("strip", 2, vec![vec![1, 0], vec![-1, 0]]).unwrap_err();
        assert!(matches!(err, LabError::RepresentationMismatch(_)), "{err}");
    }

    #[test]
    fn redundant_facet_is_rejected() {
        let err = Polytope::from_facets("r", 1, vec![vec![1], vec![-1], vec![2]]).unwrap_err();
        assert!(matches!(err, LabError::RepresentationMismatch(_)), "{err}");
    }

    #[test]
    fn vertex_input_round_trips_and_detects_non_fano() {
        let p = Polytope::from_vertices(
            "cp2",
            2,
            vec![vec![r(2), r(-1)], vec![r(-1), r(2)], vec![r(-1), r(-1)]],
        )
        .unwrap();
        assert_eq!(p.facets, vec![vec![-1, -1], vec![0, 1], vec![1, 0]]);

        let shifted = Polytope::from_vertices("bad", 1, vec![vec![r(0)], vec![r(2)]]).unwrap_err();
        assert!(matches!(shifted, LabError::NotFano(_)), "{shifted}");
        let outside = Polytope::from_vertices("bad", 1, vec![vec![r(1)], vec![r(2)]]).unwrap_err();
        assert!(matches!(outside, LabError::NotFano(_)), "{outside}");
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let doc = PolytopeDocument {
            name: "x".into(),
            dim: 0,
            facet_normals: Some(vec![]),
            vertices: None,
        };
        assert!(matches!(Polytope::from_document(&doc), Err(LabError::Invalid(_))));
    }

    #[test]
    fn three_dimensional_cube_triangulates() {
        let normals = vec![
            vec![1, 0, 0],
            vec![-1, 0, 0],
            vec![0, 1, 0],
            vec![0, -1, 0],
            vec![0, 0, 1],
            vec![0, 0, -1],
        ];
        let p = Polytope::from_facets("cube", 3, normals).unwrap();
        assert_eq!(p.vertices.len(), 8);
        assert_eq!(p.simplices.len(), 12);
        assert_eq!(p.volume_exact(), r(8));
    }

    #[test]
    fn document_round_trip_is_canonical() {
        let p = Polytope::catalog("bl1cp2").unwrap();
        let doc = p.to_document();
        let text = serde_json::to_string(&doc).unwrap();
        let back = Polytope::from_document(&parse_document(&text).unwrap()).unwrap();
        assert_eq!(back.canonical_json(), p.canonical_json());
        let toml_text = "name = \"cp1\"\ndim = 1\nfacet_normals = [[1], [-1]]\n";
        let t = Polytope::from_document(&parse_document(toml_text).unwrap()).unwrap();
        assert_eq!(t.vertices.len(), 2);
        let frac = "{\"name\":\"p\",\"dim\":1,\"vertices\":[[\"-1\"],[1]]}";
        assert!(Polytope::from_document(&parse_document(frac).unwrap()).is_ok());
    }
}
