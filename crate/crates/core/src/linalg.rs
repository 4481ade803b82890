//! Banded symmetric positive definite factorization.

use crate::error::{Error, Result};

/// Lower factor `L` of `A = L L^T`, stored by rows: `band[i * (bw + 1) + d]`
/// holds `L[i][i - d]`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

/// Symmetric banded matrix under assembly; only the lower band is stored.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` to `A[i][j]` (and implicitly `A[j][i]`). Call once per
    /// unordered pair, or only with `i >= j`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let d = r - c;
        assert!(d <= self.bw, "entry ({r}, {c}) outside bandwidth {}", self.bw);
        self.band[r * (self.bw + 1) + d] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let d = r - c;
        if d > self.bw {
            0.0
        } else {
            self.band[r * (self.bw + 1) + d]
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            y[i] += self.band[i * w] * x[i];
            for d in 1..=self.bw.min(i) {
                let a = self.band[i * w + d];
                y[i] += a * x[i - d];
                y[i - d] += a * x[i];
            }
        }
    }

    /// `y = |A| |x|`, the scale against which a computed residual is judged.
    pub fn abs_matvec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            y[i] += self.band[i * w].abs() * x[i].abs();
            for d in 1..=self.bw.min(i) {
                let a = self.band[i * w + d].abs();
                y[i] += a * x[i - d].abs();
                y[i - d] += a * x[i].abs();
            }
        }
    }

    pub fn factor(&self) -> Result<BandCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = self.band.clone();
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                // L[i][j] = (A[i][j] - sum_k L[i][k] L[j][k]) / L[j][j]
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = l[i * w + (i - j)];
                for k in k0..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::SingularSystem(format!(
                            "matrix not positive definite at row {i} (pivot {s:e})"
                        )));
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Ok(BandCholesky { n, bw, band: l })
    }
}

impl BandCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for d in 1..=self.bw.min(i) {
                s -= self.band[i * w + d] * b[i - d];
            }
            b[i] = s / self.band[i * w];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for d in 1..=self.bw.min(n - 1 - i) {
                s -= self.band[(i + d) * w + d] * b[i + d];
            }
            b[i] = s / self.band[i * w];
        }
    }
}
