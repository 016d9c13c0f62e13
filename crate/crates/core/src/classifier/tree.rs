//! Shared decision-tree machinery: the split-gain score for boosted trees
//! and the node representation used by both tree ensembles.
//!
//! Every split carries a default direction for missing values, learned
//! during training by scoring both directions and keeping the better one.
//! Categorical ids are split on ordered integer thresholds; trees need no
//! encoding.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Gradient/hessian sums on both sides of a candidate split, plus the
/// regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitStats {
    pub g_left: f64,
    pub h_left: f64,
    pub g_right: f64,
    pub h_right: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Fixed penalty for adding a leaf.
    pub gamma: f64,
}

/// Regularized score gained by splitting one leaf into two:
/// `½·[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)] − γ`.
pub fn split_gain(stats: &SplitStats) -> Result<f64, ModelError> {
    let dl = stats.h_left + stats.lambda;
    let dr = stats.h_right + stats.lambda;
    let dp = stats.h_left + stats.h_right + stats.lambda;
    if dl <= 0.0 || dr <= 0.0 || dp <= 0.0 {
        return Err(ModelError::InvalidParams(format!(
            "split gain denominators must be positive (H_L+λ={dl}, H_R+λ={dr}, H_L+H_R+λ={dp})"
        )));
    }
    let g = stats.g_left + stats.g_right;
    Ok(0.5 * (stats.g_left * stats.g_left / dl + stats.g_right * stats.g_right / dr - g * g / dp)
        - stats.gamma)
}

/// One tree node. Leaves carry a payload: a scalar score for boosted trees,
/// a class-frequency vector for forest trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<L> {
    Split {
        feature: usize,
        threshold: f64,
        /// Where rows with a missing feature value go.
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf(L),
}

/// A decision tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<L> {
    pub nodes: Vec<Node<L>>,
}

impl<L> Tree<L> {
    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }

    /// Routes a dense row to its leaf payload.
    pub fn leaf_for(&self, row: &[f64]) -> &L {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(payload) => return payload,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = row[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v < *threshold };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }
}
