//! Dense training-set representation shared by the classifiers.

use crate::preprocess::{EngineeredFeatures, FeatureLayout};
use crate::schema::ClusterId;

use super::ModelError;

/// Column-major feature matrix. Missing values are NaN.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let n_cols = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(ModelError::DimensionMismatch {
                    expected: n_cols,
                    got: r.len(),
                    context: format!("row {i}"),
                });
            }
        }
        let mut columns = vec![Vec::with_capacity(rows.len()); n_cols];
        for r in rows {
            for (c, v) in columns.iter_mut().zip(r) {
                c.push(*v);
            }
        }
        Ok(FeatureMatrix {
            columns,
            n_rows: rows.len(),
        })
    }

    pub fn from_examples(
        examples: &[EngineeredFeatures],
        layout: &FeatureLayout,
    ) -> Result<Self, ModelError> {
        let rows: Vec<Vec<f64>> = examples.iter().map(|f| layout.to_dense(f)).collect();
        Self::from_rows(&rows)
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
            n_rows: self.n_rows,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.columns[c]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }
}

/// Validates labels and widens them to usize. Labels must be < `n_classes`.
pub fn check_labels(
    examples: &[EngineeredFeatures],
    n_classes: usize,
) -> Result<Vec<usize>, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut labels = Vec::with_capacity(examples.len());
    for (row, f) in examples.iter().enumerate() {
        let label = f.label.ok_or(ModelError::MissingLabel { row })? as usize;
        if label >= n_classes {
            return Err(ModelError::LabelRange {
                row,
                label: label as ClusterId,
                n_classes,
            });
        }
        labels.push(label);
    }
    Ok(labels)
}

/// Per-column median ignoring NaN; 0 for all-NaN columns.
pub fn column_medians(matrix: &FeatureMatrix) -> Vec<f64> {
    (0..matrix.n_cols())
        .map(|c| {
            let mut vals: Vec<f64> = matrix
                .column(c)
                .iter()
                .copied()
                .filter(|v| !v.is_nan())
                .collect();
            if vals.is_empty() {
                return 0.0;
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = vals.len() / 2;
            if vals.len() % 2 == 1 {
                vals[mid]
            } else {
                0.5 * (vals[mid - 1] + vals[mid])
            }
        })
        .collect()
}
