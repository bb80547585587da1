//! Exact rational arithmetic used while building polytopes.

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};

use crate::error::{LabError, Result};

pub type Rational = Ratio<i64>;

pub fn parse_rational(text: &str) -> Result<Rational> {
    let t = text.trim();
    let parse_int = |s: &str| {
        s.trim()
            .parse::<i64>()
            .map_err(|_| LabError::Parse(format!("bad rational `{text}`")))
    };
    match t.split_once('/') {
        Some((p, q)) => {
            let q = parse_int(q)?;
            if q == 0 {
                return Err(LabError::Parse(format!("zero denominator in `{text}`")));
            }
            Ok(Ratio::new(parse_int(p)?, q))
        }
        None => Ok(Ratio::from_integer(parse_int(t)?)),
    }
}

pub fn format_rational(r: &Rational) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Solves the square system `a x = rhs` exactly. Returns `None` when singular.
pub fn solve(a: &[Vec<Rational>], rhs: &[Rational]) -> Option<Vec<Rational>> {
    let n = a.len();
    let mut m: Vec<Vec<Rational>> = a
        .iter()
        .zip(rhs)
        .map(|(row, r)| {
            let mut row = row.clone();
            row.push(*r);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !m[r][col].is_zero())?;
        m.swap(col, pivot);
        for r in 0..n {
            if r != col && !m[r][col].is_zero() {
                let factor = m[r][col] / m[col][col];
                for c in col..=n {
                    let v = m[col][c];
                    m[r][c] -= factor * v;
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

pub fn determinant(a: &[Vec<Rational>]) -> Rational {
    let n = a.len();
    let mut m = a.to_vec();
    let mut det = Rational::from_integer(1);
    for col in 0..n {
        let Some(pivot) = (col..n).find(|&r| !m[r][col].is_zero()) else {
            return Rational::zero();
        };
        if pivot != col {
            m.swap(col, pivot);
            det = -det;
        }
        det *= m[col][col];
        for r in col + 1..n {
            let factor = m[r][col] / m[col][col];
            for c in col..n {
                let v = m[col][c];
                m[r][c] -= factor * v;
            }
        }
    }
    det
}

/// Rank of a list of rational row vectors.
pub fn rank(rows: &[Vec<Rational>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let cols = rows[0].len();
    let mut m = rows.to_vec();
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot) = (rank..m.len()).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(rank, pivot);
        for r in 0..m.len() {
            if r != rank && !m[r][col].is_zero() {
                let factor = m[r][col] / m[rank][col];
                for c in col..cols {
                    let v = m[rank][c];
                    m[r][c] -= factor * v;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// A nonzero vector orthogonal to `rows`, which must have rank `dim - 1`.
pub fn null_vector(rows: &[Vec<Rational>], dim: usize) -> Option<Vec<Rational>> {
    // Try unit completions until the augmented system is nonsingular.
    for e in 0..dim {
        let mut a: Vec<Vec<Rational>> = rows.to_vec();
        let mut unit = vec![Rational::zero(); dim];
        unit[e] = Rational::from_integer(1);
        a.push(unit);
        if a.len() != dim {
            return None;
        }
        let mut rhs = vec![Rational::zero(); dim];
        rhs[dim - 1] = Rational::from_integer(1);
        if let Some(x) = solve(&a, &rhs) {
            return Some(x);
        }
    }
    None
}

pub fn dot(a: &[Rational], b: &[Rational]) -> Rational {
    a.iter().zip(b).fold(Rational::zero(), |acc, (x, y)| acc + x * y)
}

pub fn abs(r: &Rational) -> Rational {
    r.abs()
}
