//! Banded matrices with an LU factorization using partial pivoting.
//!
//! Storage follows the usual column-major band layout: entry `(i, j)` lives in
//! row `kl + ku + i − j` of column `j`, leaving `kl` extra rows for fill-in.

use crate::error::{LabError, Result};

#[derive(Clone, Debug)]
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BandedLu {
    a: Banded,
    piv: Vec<usize>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Banded {
        let ld = 2 * kl + ku + 1;
        Banded { n, kl, ku, ld, data: vec![0.0; ld * n] }
    }

    /// Square matrix from sparse rows; the band is the smallest that fits.
    pub fn from_rows(rows: &[Vec<(usize, f64)>]) -> Banded {
        let mut kl = 0;
        let mut ku = 0;
        for (i, r) in rows.iter().enumerate() {
            for &(j, _) in r {
                kl = kl.max(i.saturating_sub(j));
                ku = ku.max(j.saturating_sub(i));
            }
        }
        let mut m = Banded::zeros(rows.len(), kl, ku);
        for (i, r) in rows.iter().enumerate() {
            for &(j, v) in r {
                m.add(i, j, v);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        j * self.ld + self.kl + self.ku + i - j
    }

    /// Adds `v` to entry `(i, j)`; the entry must lie inside the declared band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i <= j + self.kl && j <= i + self.ku, "({i},{j}) outside band");
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i > j + self.kl || j > i + self.ku {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                y[i] += self.data[self.slot(i, j)] * x[j];
            }
        }
        y
    }

    pub fn factor(mut self) -> Result<BandedLu> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let mut piv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0usize;
            let mut best = self.data[self.slot(j, j)].abs();
            for r in 1..=km {
                let v = self.data[self.slot(j + r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(LabError::Singular(format!("zero pivot in column {j}")));
            }
            piv[j] = j + p;
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                for c in j..=ju {
                    let a = self.slot(j, c);
                    let b = self.slot(j + p, c);
                    self.data.swap(a, b);
                }
            }
            if km > 0 {
                let inv = 1.0 / self.data[self.slot(j, j)];
                for r in 1..=km {
                    let s = self.slot(j + r, j);
                    self.data[s] *= inv;
                }
                for c in j + 1..=ju {
                    let ujc = self.data[self.slot(j, c)];
                    if ujc == 0.0 {
                        continue;
                    }
                    for r in 1..=km {
                        let l = self.data[self.slot(j + r, j)];
                        let s = self.slot(j + r, c);
                        self.data[s] -= l * ujc;
                    }
                }
            }
        }
        Ok(BandedLu { a: self, piv })
    }
}

impl BandedLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let a = &self.a;
        let n = a.n;
        let mut b = rhs.to_vec();
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = a.kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for r in 1..=km {
                    b[j + r] -= a.data[a.slot(j + r, j)] * bj;
                }
            }
        }
        let w = a.kl + a.ku;
        for i in (0..n).rev() {
            let mut s = b[i];
            for c in i + 1..=(i + w).min(n - 1) {
                s -= a.data[a.slot(i, c)] * b[c];
            }
            b[i] = s / a.data[a.slot(i, i)];
        }
        b
    }
}
