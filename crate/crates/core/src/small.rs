//! Dense helpers for the tiny (n ≤ 3) matrices attached to grid nodes and
//! for the Newton systems of the extremal-field solver.

/// Symmetric n×n matrix stored row-major in a fixed 3×3 buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mat3 {
    pub n: usize,
    pub a: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn zeros(n: usize) -> Self {
        Self { n, a: [[0.0; 3]; 3] }
    }

    pub fn det(&self) -> f64 {
        let a = &self.a;
        match self.n {
            1 => a[0][0],
            2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
            3 => {
                a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                    - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                    + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
            }
            _ => unreachable!("dimension above 3"),
        }
    }

    /// Inverse through the adjugate; caller guarantees `det != 0`.
    pub fn inverse(&self) -> Mat3 {
        let a = &self.a;
        let d = self.det();
        let mut out = Mat3::zeros(self.n);
        match self.n {
            1 => out.a[0][0] = 1.0 / d,
            2 => {
                out.a[0][0] = a[1][1] / d;
                out.a[1][1] = a[0][0] / d;
                out.a[0][1] = -a[0][1] / d;
                out.a[1][0] = -a[1][0] / d;
            }
            3 => {
                for i in 0..3 {
                    for j in 0..3 {
                        let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                        let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                        out.a[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
                    }
                }
            }
            _ => unreachable!("dimension above 3"),
        }
        out
    }

    /// Positive definiteness by leading principal minors.
    pub fn is_positive_definite(&self) -> bool {
        let a = &self.a;
        match self.n {
            1 => a[0][0] > 0.0,
            2 => a[0][0] > 0.0 && self.det() > 0.0,
            3 => a[0][0] > 0.0 && a[0][0] * a[1][1] - a[0][1] * a[1][0] > 0.0 && self.det() > 0.0,
            _ => false,
        }
    }

    pub fn quad(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += v[i] * self.a[i][j] * v[j];
            }
        }
        s
    }

    /// `tr(self · other)`.
    pub fn trace_product(&self, other: &Mat3) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j] * other.a[j][i];
            }
        }
        s
    }

    pub fn mul(&self, other: &Mat3) -> Mat3 {
        let mut out = Mat3::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] = (0..self.n).map(|k| self.a[i][k] * other.a[k][j]).sum();
            }
        }
        out
    }
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col] == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_times_matrix_is_identity() {
        let mut m = Mat3::zeros(3);
        m.a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let p = m.mul(&m.inverse());
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p.a[i][j] - e).abs() < 1e-14);
            }
        }
        assert!(m.is_positive_definite());
    }

    #[test]
    fn dense_solve() {
        let x = solve_dense(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }
}
