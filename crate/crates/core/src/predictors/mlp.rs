//! Fully connected regression network: tanh hidden layers, linear output,
//! mean-absolute-error loss, Adam updates.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scale::Standardizer;
use crate::error::{Error, Result};

pub const HIDDEN_WIDTHS: [usize; 5] = [128, 128, 64, 32, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub standardize: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: HIDDEN_WIDTHS.to_vec(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 200,
            patience: 20,
            validation_fraction: 0.1,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `inputs × outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub scaler: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl MlpModel {
    /// All parameters zero; predicts 0 everywhere.
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let layers = widths(input_dim, hidden)
            .windows(2)
            .map(|w| DenseLayer {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers, scaler: None }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths(input_dim, hidden)
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                DenseLayer {
                    weights: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers, scaler: None }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.weights.nrows()).collect();
        if let Some(last) = self.layers.last() {
            w.push(last.weights.ncols());
        }
        w
    }

    /// Activations of every layer for inputs already in model space.
    fn forward(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    fn prepare(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.scaler {
            Some(s) => s.transform(x),
            None => x.to_owned(),
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let xs = self.prepare(x);
        let acts = self.forward(xs.view());
        acts.last().expect("output layer").column(0).to_vec()
    }

    /// Mean absolute error over `(x, y)` and its gradient with respect to
    /// every weight and bias. `x` is taken as-is (no standardization).
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> (f64, Vec<LayerGradient>) {
        let acts = self.forward(x);
        let n = x.nrows() as f64;
        let out = acts.last().expect("output layer").column(0).to_owned();
        let resid = &out - &y;
        let loss = resid.iter().map(|r| r.abs()).sum::<f64>() / n;
        let mut delta = resid.mapv(|r| r.signum() / n).insert_axis(Axis(1));
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = acts[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights.t());
                Zip::from(&mut back).and(&acts[i]).for_each(|d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
            grads.push(LayerGradient { weights: gw, bias: gb });
        }
        grads.reverse();
        (loss, grads)
    }
}

fn widths(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input_dim);
    w.extend_from_slice(hidden);
    w.push(1);
    w
}

struct Adam {
    m: Vec<LayerGradient>,
    v: Vec<LayerGradient>,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &[LayerGradient], cfg: &MlpConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate;
        let eps = cfg.epsilon;
        for (((layer, g), m), v) in model.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

fn mae(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
    let acts = model.forward(x);
    let out = acts.last().expect("output layer").column(0);
    out.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len().max(1) as f64
}

/// Train with mini-batch Adam on MAE, keeping the weights with the best
/// validation error (early stopping).
pub fn fit_mlp(x: ArrayView2<f64>, y: &[f64], config: &MlpConfig, seed: u64) -> Result<MlpModel> {
    let (n, d) = x.dim();
    if n == 0 || y.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: y.len(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scaler = config.standardize.then(|| Standardizer::fit(x));
    let xs = match &scaler {
        Some(s) => s.transform(x),
        None => x.to_owned(),
    };
    let y = Array1::from(y.to_vec());

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = if n >= 10 {
        ((n as f64 * config.validation_fraction).round() as usize).min(n - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let x_val = xs.select(Axis(0), val_idx);
    let y_val = y.select(Axis(0), val_idx);

    let mut model = MlpModel::glorot(d, &config.hidden, &mut rng);
    let mut adam = Adam::new(&model);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    let mut xb = Array2::zeros((config.batch_size, d));
    let mut yb = Array1::zeros(config.batch_size);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let b = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&xs.row(i));
                yb[r] = y[i];
            }
            let (loss, grads) = model.loss_and_gradient(xb.slice(s![..b, ..]), yb.slice(s![..b]));
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss * b as f64;
            adam.step(&mut model, &grads, config);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if n_val == 0 {
            best = model.clone();
            continue;
        }
        let val = mae(&model, x_val.view(), y_val.view());
        if !val.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if val < best_val {
            best_val = val;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    best.scaler = scaler;
    Ok(best)
}
