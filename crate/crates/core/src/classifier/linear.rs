//! Multinomial logistic regression trained by plain stochastic gradient
//! descent.
//!
//! Inputs are median-imputed and standardized inside the model (raw id
//! columns span thousands of units; unscaled SGD diverges). Training runs
//! `epochs` passes with a seeded per-epoch shuffle, step size
//! `η₀ / t^decay` over the global step counter, and L2 weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{column_medians, FeatureMatrix};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    /// Initial step size η₀.
    pub step_size: f64,
    /// Step-size decay exponent: η_t = η₀ / t^decay.
    pub decay: f64,
    pub epochs: usize,
    /// L2 regularization strength on weights (not biases).
    pub l2: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        SgdParams {
            step_size: 0.1,
            decay: 0.5,
            epochs: 20,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    n_classes: usize,
    n_features: usize,
    /// [class][feature]
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    medians: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
    params: SgdParams,
}

impl LinearModel {
    pub fn fit(
        matrix: &FeatureMatrix,
        labels: &[usize],
        n_classes: usize,
        params: &SgdParams,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let n = matrix.n_rows();
        let d = matrix.n_cols();
        if n == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        if params.epochs == 0 || params.step_size <= 0.0 || params.l2 < 0.0 {
            return Err(ModelError::InvalidParams(
                "sgd needs epochs ≥ 1, step_size > 0, l2 ≥ 0".into(),
            ));
        }

        let medians = column_medians(matrix);
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for c in 0..d {
            let col = matrix.column(c);
            let mut sum = 0.0;
            for &v in col {
                sum += if v.is_nan() { medians[c] } else { v };
            }
            let mean = sum / n as f64;
            let mut var = 0.0;
            for &v in col {
                let x = if v.is_nan() { medians[c] } else { v };
                var += (x - mean) * (x - mean);
            }
            means[c] = mean;
            stds[c] = (var / n as f64).sqrt().max(1e-12);
        }

        // standardized copy, row-major for the inner loop
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                (0..d)
                    .map(|c| {
                        let v = matrix.value(r, c);
                        let x = if v.is_nan() { medians[c] } else { v };
                        (x - means[c]) / stds[c]
                    })
                    .collect()
            })
            .collect();

        let mut weights = vec![vec![0.0f64; d]; n_classes];
        let mut bias = vec![0.0f64; n_classes];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = vec![0.0f64; n_classes];

        let mut t = 0usize;
        for _epoch in 0..params.epochs {
            order.shuffle(&mut rng);
            for &r in &order {
                t += 1;
                let eta = params.step_size / (t as f64).powf(params.decay);
                let x = &rows[r];
                let y = labels[r];

                for (c, logit) in logits.iter_mut().enumerate() {
                    let w = &weights[c];
                    let mut acc = bias[c];
                    for (wi, xi) in w.iter().zip(x) {
                        acc += wi * xi;
                    }
                    *logit = acc;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }

                for c in 0..n_classes {
                    let p = logits[c] / z;
                    let grad = p - if c == y { 1.0 } else { 0.0 };
                    let w = &mut weights[c];
                    let shrink = 1.0 - eta * params.l2;
                    for (wi, xi) in w.iter_mut().zip(x) {
                        *wi = *wi * shrink - eta * grad * xi;
                    }
                    bias[c] -= eta * grad;
                }
            }
        }

        let finite = weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(bias.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::InvalidParams(
                "sgd diverged to non-finite weights; lower the step size".into(),
            ));
        }

        Ok(LinearModel {
            n_classes,
            n_features: d,
            weights,
            bias,
            medians,
            means,
            stds,
            params: params.clone(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Softmax class probabilities for one dense row.
    pub fn class_scores(&self, row: &[f64]) -> Result<Vec<f64>, ModelError> {
        if row.len() != self.n_features {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_features,
                got: row.len(),
                context: "predict row".into(),
            });
        }
        let x: Vec<f64> = (0..self.n_features)
            .map(|c| {
                let v = row[c];
                let v = if v.is_nan() { self.medians[c] } else { v };
                (v - self.means[c]) / self.stds[c]
            })
            .collect();

        let mut logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for l in logits.iter_mut() {
            *l /= z;
        }
        Ok(logits)
    }
}
