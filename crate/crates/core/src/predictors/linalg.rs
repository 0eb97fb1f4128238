//! Dense symmetric positive-definite solves on row-major storage.

use crate::error::{Error, Result};

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor `a + shift·I`; `None` if a pivot is not strictly positive.
    pub fn factor(a: &[f64], n: usize, shift: f64) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let (ri, rj) = (i * n, j * n);
                let s = a[ri + j] - dot(&l[ri..ri + j], &l[rj..rj + j]);
                if i == j {
                    let d = s + shift;
                    if !(d > 0.0) || !d.is_finite() {
                        return None;
                    }
                    l[ri + i] = d.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Some(Self { n, l })
    }

    /// Factor with a diagonal jitter that starts at `start` and grows ×10
    /// up to `max`. Returns the factor and the jitter that succeeded.
    pub fn factor_with_jitter(a: &[f64], n: usize, start: f64, max: f64) -> Result<(Self, f64)> {
        let mut jitter = start;
        loop {
            if let Some(c) = Self::factor(a, n, jitter) {
                return Ok((c, jitter));
            }
            jitter *= 10.0;
            if jitter > max * (1.0 + 1e-9) {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `L z = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = b.to_vec();
        for i in 0..n {
            let r = i * n;
            z[i] = (z[i] - dot(&self.l[r..r + i], &z[..i])) / self.l[r + i];
        }
        z
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = self.solve_lower(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let c = Cholesky::factor(&a, 3, 0.0).unwrap();
        let x = c.solve(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
        let det = 4.0 * (5.0 * 3.0 - 1.0) - 2.0 * (2.0 * 3.0 - 0.6) + 0.6 * (2.0 - 5.0 * 0.6);
        assert!((c.log_det() - f64::ln(det)).abs() < 1e-12);
    }

    #[test]
    fn jitter_escalates_then_gives_up() {
        // singular: rank one
        let a = [1.0, 1.0, 1.0, 1.0];
        let (_, j) = Cholesky::factor_with_jitter(&a, 2, 1e-9, 1e-3).unwrap();
        assert!(j >= 1e-9);
        let neg = [-1.0, 0.0, 0.0, -1.0];
        assert!(matches!(
            Cholesky::factor_with_jitter(&neg, 2, 1e-9, 1e-3),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
