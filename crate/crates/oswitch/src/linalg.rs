//! Banded linear algebra for the discretized operators.
//!
//! Every system solved here is of the form (rI - L_h + D) with L_h a
//! monotone stencil operator and D a non-negative diagonal, so the matrix
//! is strictly diagonally dominant with positive diagonal. That licenses
//! LU factorization without pivoting, which keeps the band structure
//! intact and the solve deterministic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is numerically singular at row {row} (pivot {pivot:.3e})")]
    Singular { row: usize, pivot: f64 },
    #[error("entry ({row}, {col}) outside bandwidth {hbw}")]
    OutOfBand { row: usize, col: usize, hbw: usize },
}

/// Square band matrix with half-bandwidth `hbw`, stored row-major with
/// `2*hbw + 1` slots per row.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    hbw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, hbw: usize) -> Self {
        BandMatrix {
            n,
            hbw,
            data: vec![0.0; n * (2 * hbw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let offset = col as isize - row as isize;
        if offset.unsigned_abs() > self.hbw {
            return None;
        }
        Some(row * (2 * self.hbw + 1) + (offset + self.hbw as isize) as usize)
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<(), LinalgError> {
        match self.slot(row, col) {
            Some(s) => {
                self.data[s] = value;
                Ok(())
            }
            None => Err(LinalgError::OutOfBand {
                row,
                col,
                hbw: self.hbw,
            }),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) -> Result<(), LinalgError> {
        match self.slot(row, col) {
            Some(s) => {
                self.data[s] += value;
                Ok(())
            }
            None => Err(LinalgError::OutOfBand {
                row,
                col,
                hbw: self.hbw,
            }),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.slot(row, col).map(|s| self.data[s]).unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let w = 2 * self.hbw + 1;
        for row in 0..self.n {
            let lo = row.saturating_sub(self.hbw);
            let hi = (row + self.hbw).min(self.n - 1);
            let mut acc = 0.0;
            for col in lo..=hi {
                acc += self.data[row * w + col + self.hbw - row] * x[col];
            }
            out[row] = acc;
        }
    }

    /// Unpivoted band LU. Valid for the diagonally dominant systems this
    /// crate assembles; fails loudly on a vanishing pivot otherwise.
    pub fn factorize(&self) -> Result<BandLu, LinalgError> {
        let n = self.n;
        let hbw = self.hbw;
        let w = 2 * hbw + 1;
        let mut a = self.data.clone();
        for k in 0..n {
            let pivot = a[k * w + hbw];
            if !pivot.is_finite() || pivot.abs() < 1e-300 {
                return Err(LinalgError::Singular { row: k, pivot });
            }
            let i_hi = (k + hbw).min(n - 1);
            for i in (k + 1)..=i_hi {
                // column k in row i sits at slot k - i + hbw
                let s_ik = i * w + (k + hbw - i);
                let l = a[s_ik] / pivot;
                a[s_ik] = l;
                if l != 0.0 {
                    let j_hi = (k + hbw).min(n - 1);
                    for j in (k + 1)..=j_hi {
                        let ukj = a[k * w + (j + hbw - k)];
                        if ukj != 0.0 {
                            a[i * w + (j + hbw - i)] -= l * ukj;
                        }
                    }
                }
            }
        }
        Ok(BandLu { n, hbw, data: a })
    }
}

/// Factored form produced by [`BandMatrix::factorize`].
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    hbw: usize,
    data: Vec<f64>,
}

impl BandLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let hbw = self.hbw;
        let w = 2 * hbw + 1;
        let mut x = rhs.to_vec();
        // forward: L has unit diagonal
        for i in 0..n {
            let lo = i.saturating_sub(hbw);
            let mut acc = x[i];
            for k in lo..i {
                acc -= self.data[i * w + (k + hbw - i)] * x[k];
            }
            x[i] = acc;
        }
        // backward with U
        for i in (0..n).rev() {
            let hi = (i + hbw).min(n - 1);
            let mut acc = x[i];
            for k in (i + 1)..=hi {
                acc -= self.data[i * w + (k + hbw - i)] * x[k];
            }
            x[i] = acc / self.data[i * w + hbw];
        }
        x
    }
}

/// Solves Ax = b with one step of iterative refinement when the residual
/// exceeds `tol` relative to the right-hand side.
pub fn solve_refined(matrix: &BandMatrix, rhs: &[f64], tol: f64) -> Result<Vec<f64>, LinalgError> {
    let lu = matrix.factorize()?;
    let mut x = lu.solve(rhs);
    let mut ax = vec![0.0; rhs.len()];
    matrix.matvec(&x, &mut ax);
    let scale = rhs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let res_norm = rhs
        .iter()
        .zip(&ax)
        .fold(0.0f64, |a, (b, c)| a.max((b - c).abs()));
    if res_norm > tol * scale {
        let residual: Vec<f64> = rhs.iter().zip(&ax).map(|(b, c)| b - c).collect();
        let correction = lu.solve(&residual);
        for (xi, ci) in x.iter_mut().zip(&correction) {
            *xi += ci;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_poisson_solve() {
        // -u'' = 1 on (0,1), u(0) = u(1) = 0, h = 1/4: u(x) = x(1-x)/2
        let n = 5;
        let h = 0.25;
        let mut a = BandMatrix::new(n, 1);
        a.set(0, 0, 1.0).unwrap();
        a.set(n - 1, n - 1, 1.0).unwrap();
        for i in 1..n - 1 {
            a.set(i, i - 1, -1.0 / (h * h)).unwrap();
            a.set(i, i, 2.0 / (h * h)).unwrap();
            a.set(i, i + 1, -1.0 / (h * h)).unwrap();
        }
        let rhs = vec![0.0, 1.0, 1.0, 1.0, 0.0];
        let x = solve_refined(&a, &rhs, 1e-12).unwrap();
        for i in 0..n {
            let xi = i as f64 * h;
            assert!((x[i] - xi * (1.0 - xi) / 2.0).abs() < 1e-12, "node {i}: {}", x[i]);
        }
    }

    #[test]
    fn wider_band_matches_dense_elimination() {
        // diagonally dominant 6x6 with half-bandwidth 2
        let n = 6;
        let mut a = BandMatrix::new(n, 2);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i.saturating_sub(2)..=(i + 2).min(n - 1) {
                let v = if i == j {
                    10.0 + i as f64
                } else {
                    1.0 / (1.0 + (i as f64 - j as f64).abs())
                };
                a.set(i, j, v).unwrap();
                dense[i][j] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.0).collect();
        let x = solve_refined(&a, &rhs, 1e-13).unwrap();
        // residual check against the dense definition
        for i in 0..n {
            let ax: f64 = (0..n).map(|j| dense[i][j] * x[j]).sum();
            assert!((ax - rhs[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn out_of_band_write_rejected() {
        let mut a = BandMatrix::new(4, 1);
        assert!(matches!(
            a.set(0, 3, 1.0),
            Err(LinalgError::OutOfBand { .. })
        ));
    }

    #[test]
    fn singular_matrix_rejected() {
        let mut a = BandMatrix::new(2, 1);
        a.set(0, 0, 0.0).unwrap();
        a.set(1, 1, 1.0).unwrap();
        assert!(matches!(a.factorize(), Err(LinalgError::Singular { row: 0, .. })));
    }
}
