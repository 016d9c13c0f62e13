//! Bernoulli naive Bayes over binarized features.
//!
//! Inputs are binarized internally: categorical columns become one-hot
//! indicator bits per observed value; numeric columns become a single
//! "above the training median" bit (missing values are imputed with the
//! median first, so they land on the zero side). The posterior combines the
//! Bernoulli likelihood `P(i|y)·x_i + (1−P(i|y))·(1−x_i)` per bit in log
//! space and normalizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::{column_medians, FeatureMatrix};
use super::ModelError;
use crate::preprocess::ColumnKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbParams {
    /// Laplace smoothing strength.
    pub alpha: f64,
}

impl Default for NbParams {
    fn default() -> Self {
        NbParams { alpha: 1.0 }
    }
}

/// How one input column maps onto Bernoulli bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Binarizer {
    /// One bit per observed categorical value; unseen values set no bit.
    Categorical { values: BTreeMap<i64, usize> },
    /// One bit: value (median-imputed) strictly above the training median.
    Threshold { median: f64, bit: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    n_classes: usize,
    n_features: usize,
    alpha: f64,
    binarizers: Vec<Binarizer>,
    n_bits: usize,
    /// log P(y), Laplace-smoothed so every class has positive prior.
    log_prior: Vec<f64>,
    /// [class][bit] log P(bit=1 | y)
    log_p: Vec<Vec<f64>>,
    /// [class][bit] log P(bit=0 | y)
    log_q: Vec<Vec<f64>>,
}

impl NaiveBayesModel {
    pub fn fit(
        matrix: &FeatureMatrix,
        labels: &[usize],
        n_classes: usize,
        kinds: &[ColumnKind],
        params: &NbParams,
    ) -> Result<Self, ModelError> {
        if matrix.n_rows() == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        if kinds.len() != matrix.n_cols() {
            return Err(ModelError::DimensionMismatch {
                expected: matrix.n_cols(),
                got: kinds.len(),
                context: "column kinds".into(),
            });
        }
        if params.alpha <= 0.0 {
            return Err(ModelError::InvalidParams(
                "naive Bayes alpha must be positive".into(),
            ));
        }
        let alpha = params.alpha;
        let medians = column_medians(matrix);

        // assign bits
        let mut binarizers = Vec::with_capacity(matrix.n_cols());
        let mut n_bits = 0usize;
        for (c, kind) in kinds.iter().enumerate() {
            match kind {
                ColumnKind::Categorical => {
                    let mut values = BTreeMap::new();
                    for &v in matrix.column(c) {
                        if v.is_nan() {
                            continue;
                        }
                        values.entry(v as i64).or_insert(0usize);
                    }
                    for (_, bit) in values.iter_mut() {
                        *bit = n_bits;
                        n_bits += 1;
                    }
                    binarizers.push(Binarizer::Categorical { values });
                }
                ColumnKind::Numeric => {
                    binarizers.push(Binarizer::Threshold {
                        median: medians[c],
                        bit: n_bits,
                    });
                    n_bits += 1;
                }
            }
        }

        // count bit activations per class
        let mut class_count = vec![0.0f64; n_classes];
        for &y in labels {
            class_count[y] += 1.0;
        }
        let mut bit_count = vec![vec![0.0f64; n_bits]; n_classes];
        let mut bits = Vec::with_capacity(n_bits);
        for row in 0..matrix.n_rows() {
            bits.clear();
            set_bits(&binarizers, matrix, row, &mut bits);
            let y = labels[row];
            for &b in &bits {
                bit_count[y][b] += 1.0;
            }
        }

        let total = labels.len() as f64;
        let log_prior: Vec<f64> = class_count
            .iter()
            .map(|&n| ((n + alpha) / (total + alpha * n_classes as f64)).ln())
            .collect();

        let mut log_p = vec![vec![0.0f64; n_bits]; n_classes];
        let mut log_q = vec![vec![0.0f64; n_bits]; n_classes];
        for y in 0..n_classes {
            let denom = class_count[y] + 2.0 * alpha;
            for b in 0..n_bits {
                let p = (bit_count[y][b] + alpha) / denom;
                log_p[y][b] = p.ln();
                log_q[y][b] = (1.0 - p).ln();
            }
        }

        Ok(NaiveBayesModel {
            n_classes,
            n_features: matrix.n_cols(),
            alpha,
            binarizers,
            n_bits,
            log_prior,
            log_p,
            log_q,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Smoothed probability that a given bit is on for a class; exposed for
    /// contract tests.
    pub fn bit_probability(&self, class: usize, bit: usize) -> f64 {
        self.log_p[class][bit].exp()
    }

    /// Normalized posterior over classes for one dense row.
    pub fn class_scores(&self, row: &[f64]) -> Result<Vec<f64>, ModelError> {
        if row.len() != self.n_features {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_features,
                got: row.len(),
                context: "predict row".into(),
            });
        }
        let mut on = Vec::new();
        set_bits_row(&self.binarizers, row, &mut on);

        // start from the all-zero likelihood, then swap in the active bits
        let mut log_post = vec![0.0f64; self.n_classes];
        for (y, lp) in log_post.iter_mut().enumerate() {
            let zero_sum: f64 = self.log_q[y].iter().sum();
            *lp = self.log_prior[y] + zero_sum;
            for &b in &on {
                *lp += self.log_p[y][b] - self.log_q[y][b];
            }
        }

        let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = log_post.iter().map(|&lp| (lp - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        Ok(out)
    }
}

fn set_bits(binarizers: &[Binarizer], matrix: &FeatureMatrix, row: usize, out: &mut Vec<usize>) {
    for (c, b) in binarizers.iter().enumerate() {
        push_bit(b, matrix.value(row, c), out);
    }
}

fn set_bits_row(binarizers: &[Binarizer], row: &[f64], out: &mut Vec<usize>) {
    out.clear();
    for (c, b) in binarizers.iter().enumerate() {
        push_bit(b, row[c], out);
    }
}

fn push_bit(binarizer: &Binarizer, v: f64, out: &mut Vec<usize>) {
    match binarizer {
        Binarizer::Categorical { values } => {
            if !v.is_nan() {
                if let Some(&bit) = values.get(&(v as i64)) {
                    out.push(bit);
                }
            }
        }
        Binarizer::Threshold { median, bit } => {
            let value = if v.is_nan() { *median } else { v };
            if value > *median {
                out.push(*bit);
            }
        }
    }
}
