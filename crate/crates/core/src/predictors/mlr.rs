use log::warn;
use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::linalg::Cholesky;
use crate::error::{Error, Result};

/// Ridge jitter added to the Gram diagonal so rank-deficient designs solve.
pub const GRAM_JITTER: f64 = 1e-10;

const REFINE_STEPS: usize = 2;

/// `y = intercept + coefficients · x`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    pub intercept: f64,
    pub coefficients: Array1<f64>,
}

impl MlrModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.dot(&self.coefficients).iter().map(|v| v + self.intercept).collect()
    }
}

/// Least squares through the normal equations `(AᵀA + εI) b = Aᵀy` with
/// `A = [1 | X]`, plus iterative refinement.
pub fn fit_mlr(x: ArrayView2<f64>, y: &[f64]) -> Result<MlrModel> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::invalid("linear regression needs at least one row"));
    }
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: y.len(),
        });
    }
    let p = d + 1;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut row = vec![0.0; p];
    for (i, xi) in x.rows().into_iter().enumerate() {
        row[0] = 1.0;
        for (r, v) in row[1..].iter_mut().zip(xi) {
            *r = *v;
        }
        for a in 0..p {
            let ra = row[a];
            rhs[a] += ra * y[i];
            let g = &mut gram[a * p..a * p + a + 1];
            for (gb, rb) in g.iter_mut().zip(&row[..=a]) {
                *gb += ra * rb;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[b * p + a] = gram[a * p + b];
        }
    }
    let (chol, jitter) = Cholesky::factor_with_jitter(&gram, p, GRAM_JITTER, 1e6)?;
    if jitter > GRAM_JITTER {
        warn!("linear regression needed Gram jitter {jitter:e}");
    }
    let mut beta = chol.solve(&rhs);
    // Refine against the residual; squaring the condition number in the
    // Gram matrix otherwise costs several digits.
    for _ in 0..REFINE_STEPS {
        let mut grad = vec![0.0; p];
        for (i, xi) in x.rows().into_iter().enumerate() {
            let r = y[i] - beta[0] - xi.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            grad[0] += r;
            for (g, v) in grad[1..].iter_mut().zip(xi) {
                *g += v * r;
            }
        }
        for (b, d) in beta.iter_mut().zip(chol.solve(&grad)) {
            *b += d;
        }
    }
    Ok(MlrModel {
        intercept: beta[0],
        coefficients: Array1::from(beta[1..].to_vec()),
    })
}
