//! Gaussian-process regression with a `C · RBF(ℓ) + White(σ²)` kernel and
//! zero prior mean.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::linalg::{dot, Cholesky};
use super::scale::Standardizer;
use crate::error::{Error, Result};

pub const JITTER_START: f64 = 1e-9;
pub const JITTER_MAX: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Signal variance `C`.
    pub constant: f64,
    /// RBF length scale `ℓ`.
    pub length_scale: f64,
    /// White-noise level `σ_n²`.
    pub noise: f64,
}

impl GpHyper {
    pub fn new(constant: f64, length_scale: f64, noise: f64) -> Self {
        Self {
            constant,
            length_scale,
            noise,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.constant > 0.0) || !(self.length_scale > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid(format!(
                "GP hyperparameters need C > 0, l > 0, noise >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub hyper: GpHyper,
    #[serde(default)]
    pub standardize: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            hyper: GpHyper::new(1.0, 1.0, 1e-2),
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub train_x: Array2<f64>,
    /// `(K + σ²I + jitter·I)⁻¹ y`
    pub alpha: Array1<f64>,
    pub jitter: f64,
    pub scaler: Option<Standardizer>,
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

fn rbf(h: &GpHyper, d2: f64) -> f64 {
    h.constant * (-d2 / (2.0 * h.length_scale * h.length_scale)).exp()
}

/// Fitted model plus the Cholesky factor, for callers that need predictive
/// variance or the marginal likelihood.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    pub model: GpModel,
    chol: Cholesky,
    y: Vec<f64>,
}

impl GpPosterior {
    pub fn fit(x: ArrayView2<f64>, y: &[f64], config: &GpConfig) -> Result<Self> {
        config.hyper.check()?;
        let n = x.nrows();
        if n == 0 || y.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: y.len(),
            });
        }
        let scaler = config.standardize.then(|| Standardizer::fit(x));
        let xs = match &scaler {
            Some(s) => s.transform(x),
            None => x.to_owned(),
        };
        let h = config.hyper;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v = rbf(&h, sq_dist(xs.row(i), xs.row(j)));
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
            k[i * n + i] = h.constant + h.noise;
        }
        let (chol, jitter) = Cholesky::factor_with_jitter(&k, n, JITTER_START, JITTER_MAX)?;
        let alpha = chol.solve(y);
        Ok(Self {
            model: GpModel {
                hyper: h,
                train_x: xs,
                alpha: Array1::from(alpha),
                jitter,
                scaler,
            },
            chol,
            y: y.to_vec(),
        })
    }

    /// Posterior mean and variance of the latent function.
    pub fn predict_with_variance(&self, x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
        let xs = self.model.prepare(x);
        let h = &self.model.hyper;
        let mut mean = Vec::with_capacity(xs.nrows());
        let mut var = Vec::with_capacity(xs.nrows());
        let alpha = self.model.alpha.as_slice().expect("contiguous");
        for q in xs.rows() {
            let kstar: Vec<f64> = self
                .model
                .train_x
                .rows()
                .into_iter()
                .map(|t| rbf(h, sq_dist(q, t)))
                .collect();
            mean.push(dot(&kstar, alpha));
            let v = self.chol.solve_lower(&kstar);
            var.push((h.constant - dot(&v, &v)).max(0.0));
        }
        (mean, var)
    }

    /// `log p(y | X, θ)`
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let fit = dot(&self.y, self.model.alpha.as_slice().expect("contiguous"));
        -0.5 * fit - 0.5 * self.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

impl GpModel {
    fn prepare(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.scaler {
            Some(s) => s.transform(x),
            None => x.to_owned(),
        }
    }

    /// Posterior mean `k*ᵀ α`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let xs = self.prepare(x);
        let alpha = self.alpha.as_slice().expect("contiguous");
        let mut kstar = vec![0.0; self.train_x.nrows()];
        xs.rows()
            .into_iter()
            .map(|q| {
                for (k, t) in kstar.iter_mut().zip(self.train_x.rows()) {
                    *k = rbf(&self.hyper, sq_dist(q, t));
                }
                dot(&kstar, alpha)
            })
            .collect()
    }
}

pub fn fit_gp(x: ArrayView2<f64>, y: &[f64], config: &GpConfig) -> Result<GpModel> {
    GpPosterior::fit(x, y, config).map(|p| p.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(c: f64, l: f64, n: f64) -> GpConfig {
        GpConfig {
            hyper: GpHyper::new(c, l, n),
            standardize: false,
        }
    }

    #[test]
    fn noise_free_single_point_interpolates() {
        let x = array![[0.3, -1.0]];
        let m = fit_gp(x.view(), &[2.5], &cfg(1.0, 1.0, 0.0)).unwrap();
        assert!((m.predict(x.view())[0] - 2.5).abs() < 1e-8);
    }

    #[test]
    fn far_queries_revert_to_prior_mean() {
        let x = array![[0.0], [1.0]];
        let m = fit_gp(x.view(), &[3.0, -2.0], &cfg(1.0, 0.5, 0.0)).unwrap();
        assert!(m.predict(array![[100.0]].view())[0].abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let x = array![[0.0]];
        assert!(fit_gp(x.view(), &[1.0], &cfg(0.0, 1.0, 0.0)).is_err());
        assert!(fit_gp(x.view(), &[1.0], &cfg(1.0, -1.0, 0.0)).is_err());
        assert!(fit_gp(x.view(), &[1.0], &cfg(1.0, 1.0, -0.1)).is_err());
    }

    #[test]
    fn duplicate_inputs_need_jitter() {
        let x = array![[1.0], [1.0], [1.0]];
        let m = fit_gp(x.view(), &[1.0, 1.0, 1.0], &cfg(1.0, 1.0, 0.0)).unwrap();
        assert!(m.jitter >= JITTER_START);
        assert!((m.predict(array![[1.0]].view())[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn indefinite_kernel_is_reported() {
        // Non-finite inputs poison every pivot.
        let x = array![[f64::NAN], [0.0]];
        assert!(matches!(
            fit_gp(x.view(), &[1.0, 2.0], &cfg(1.0, 1.0, 0.0)),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn variance_vanishes_at_noise_free_training_points() {
        let x = array![[0.0], [2.0]];
        let p = GpPosterior::fit(x.view(), &[1.0, -1.0], &cfg(2.0, 1.0, 0.0)).unwrap();
        let (_, var) = p.predict_with_variance(x.view());
        assert!(var.iter().all(|v| *v < 1e-6));
        let (_, far) = p.predict_with_variance(array![[50.0]].view());
        assert!((far[0] - 2.0).abs() < 1e-9);
    }
}
