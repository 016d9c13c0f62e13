//! Gradient-boosted trees with the regularized split gain.
//!
//! Multiclass training runs one-vs-rest: each class keeps its own boosted
//! ensemble of depth-limited regression trees over binary logistic
//! gradients, and prediction applies a softmax over the per-class boosted
//! scores. Splits maximize
//! `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)] − γ`
//! and are accepted only when the gain is positive. Every split learns a
//! default direction for missing values by scoring both sides.
//!
//! Trees grow level-wise over per-feature presorted row indices, one pass
//! per (level, feature), so the sort cost is paid once per training set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::FeatureMatrix;
use super::tree::{split_gain, Node, SplitStats, Tree};
use super::ModelError;
use crate::stream_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    /// L2 penalty λ on leaf weights.
    pub lambda: f64,
    /// Per-leaf penalty γ in the gain.
    pub gamma: f64,
    pub max_depth: usize,
    /// Fraction of features sampled per tree; 1.0 uses all features.
    pub colsample: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            rounds: 50,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            max_depth: 6,
            colsample: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    n_classes: usize,
    n_features: usize,
    /// Per-class prior log-odds the ensembles start from.
    base: Vec<f64>,
    /// [round][class]; leaf values already carry the learning rate.
    trees: Vec<Vec<Tree<f64>>>,
    gain_totals: Vec<f64>,
    params: GbtParams,
}

impl BoostedModel {
    pub fn fit(
        matrix: &FeatureMatrix,
        labels: &[usize],
        n_classes: usize,
        params: &GbtParams,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let n = matrix.n_rows();
        let d = matrix.n_cols();
        if n == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        if params.rounds == 0
            || params.learning_rate <= 0.0
            || params.lambda < 0.0
            || params.gamma < 0.0
            || params.max_depth == 0
            || !(params.colsample > 0.0 && params.colsample <= 1.0)
        {
            return Err(ModelError::InvalidParams(
                "gbt needs rounds ≥ 1, learning_rate > 0, λ ≥ 0, γ ≥ 0, max_depth ≥ 1, colsample in (0,1]".into(),
            ));
        }

        let presorted = Presorted::build(matrix);

        let base: Vec<f64> = (0..n_classes)
            .map(|c| {
                let pos = labels.iter().filter(|&&y| y == c).count() as f64;
                let p = (pos / n as f64).clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            })
            .collect();

        let mut scores: Vec<Vec<f64>> = base.iter().map(|&b| vec![b; n]).collect();
        let mut trees: Vec<Vec<Tree<f64>>> = Vec::with_capacity(params.rounds);
        let mut gain_totals = vec![0.0; d];

        for round in 0..params.rounds {
            let round_result: Vec<(Tree<f64>, Vec<f64>, Vec<f64>)> = scores
                .par_iter_mut()
                .enumerate()
                .map(|(c, class_scores)| {
                    let mut grad = vec![0.0f64; n];
                    let mut hess = vec![0.0f64; n];
                    for r in 0..n {
                        let p = sigmoid(class_scores[r]);
                        let y = if labels[r] == c { 1.0 } else { 0.0 };
                        grad[r] = p - y;
                        hess[r] = p * (1.0 - p);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        seed,
                        (round * n_classes + c) as u64,
                    ));
                    let (tree, deltas, gains) =
                        grow_tree(matrix, &presorted, &grad, &hess, params, &mut rng);
                    for (s, dv) in class_scores.iter_mut().zip(&deltas) {
                        *s += dv;
                    }
                    (tree, deltas, gains)
                })
                .collect();

            let mut round_trees = Vec::with_capacity(n_classes);
            for (tree, _, gains) in round_result {
                round_trees.push(tree);
                for (g, add) in gain_totals.iter_mut().zip(&gains) {
                    *g += add;
                }
            }
            trees.push(round_trees);
        }

        Ok(BoostedModel {
            n_classes,
            n_features: d,
            base,
            trees,
            gain_totals,
            params: params.clone(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn rounds(&self) -> usize {
        self.trees.len()
    }

    pub fn gain_totals(&self) -> &[f64] {
        &self.gain_totals
    }

    /// Softmax over per-class boosted scores.
    pub fn class_scores(&self, row: &[f64]) -> Result<Vec<f64>, ModelError> {
        if row.len() != self.n_features {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_features,
                got: row.len(),
                context: "predict row".into(),
            });
        }
        let mut logits = self.base.clone();
        for round in &self.trees {
            for (c, tree) in round.iter().enumerate() {
                logits[c] += tree.leaf_for(row);
            }
        }
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

    /// Multinomial log-loss of the softmaxed scores on a labeled set.
    pub fn log_loss(&self, matrix: &FeatureMatrix, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for r in 0..matrix.n_rows() {
            let p = self
                .class_scores(&matrix.row(r))
                .expect("matrix matches model");
            total -= p[labels[r]].max(1e-300).ln();
        }
        total / matrix.n_rows() as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-feature row indices sorted by value; missing rows are excluded and
/// their gradient mass recovered as node totals minus non-missing sums.
struct Presorted {
    sorted: Vec<Vec<u32>>,
}

impl Presorted {
    fn build(matrix: &FeatureMatrix) -> Self {
        let n = matrix.n_rows();
        let sorted: Vec<Vec<u32>> = (0..matrix.n_cols())
            .into_par_iter()
            .map(|f| {
                let col = matrix.column(f);
                let mut ids: Vec<u32> = Vec::with_capacity(n);
                for (r, v) in col.iter().enumerate() {
                    if !v.is_nan() {
                        ids.push(r as u32);
                    }
                }
                ids.sort_by(|&a, &b| col[a as usize].partial_cmp(&col[b as usize]).unwrap());
                ids
            })
            .collect();
        Presorted { sorted }
    }
}

const DONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

/// Grows one depth-limited tree level-wise. Returns the tree, the per-row
/// score deltas (learning rate applied), and per-feature gain totals.
fn grow_tree(
    matrix: &FeatureMatrix,
    presorted: &Presorted,
    grad: &[f64],
    hess: &[f64],
    params: &GbtParams,
    rng: &mut ChaCha8Rng,
) -> (Tree<f64>, Vec<f64>, Vec<f64>) {
    let n = matrix.n_rows();
    let d = matrix.n_cols();
    let lambda = params.lambda;
    let gamma = params.gamma;

    let features: Vec<usize> = if params.colsample < 1.0 {
        let take = ((params.colsample * d as f64).round() as usize).clamp(1, d);
        let mut pool: Vec<usize> = (0..d).collect();
        pool.shuffle(rng);
        let mut chosen = pool[..take].to_vec();
        chosen.sort_unstable();
        chosen
    } else {
        (0..d).collect()
    };

    let mut nodes: Vec<Node<f64>> = vec![Node::Leaf(0.0)];
    let mut gains = vec![0.0; d];

    // node_of[row]: level-local index of the row's active node, DONE once
    // the row has reached a finalized leaf
    let mut node_of: Vec<u32> = vec![0; n];
    // arena slot per level-local node
    let mut slots: Vec<usize> = vec![0];
    let mut tot_g: Vec<f64> = vec![grad.iter().sum()];
    let mut tot_h: Vec<f64> = vec![hess.iter().sum()];
    let mut tot_n: Vec<usize> = vec![n];

    let finalize = |nodes: &mut Vec<Node<f64>>, slot: usize, g: f64, h: f64| {
        let weight = -g / (h + lambda);
        nodes[slot] = Node::Leaf(params.learning_rate * weight);
    };

    for _depth in 0..params.max_depth {
        let n_active = slots.len();
        if n_active == 0 {
            break;
        }
        let mut best: Vec<Option<BestSplit>> = vec![None; n_active];

        let mut nm_g = vec![0.0f64; n_active];
        let mut nm_h = vec![0.0f64; n_active];
        let mut nm_n = vec![0usize; n_active];
        let mut acc_g = vec![0.0f64; n_active];
        let mut acc_h = vec![0.0f64; n_active];
        let mut acc_n = vec![0usize; n_active];
        let mut last_val = vec![0.0f64; n_active];

        for &f in &features {
            let col = matrix.column(f);
            let order = &presorted.sorted[f];

            // pass 1: non-missing totals per node
            nm_g.iter_mut().for_each(|v| *v = 0.0);
            nm_h.iter_mut().for_each(|v| *v = 0.0);
            nm_n.iter_mut().for_each(|v| *v = 0);
            for &r in order {
                let nd = node_of[r as usize];
                if nd == DONE {
                    continue;
                }
                let nd = nd as usize;
                nm_g[nd] += grad[r as usize];
                nm_h[nd] += hess[r as usize];
                nm_n[nd] += 1;
            }

            // pass 2: scan boundaries, evaluating both missing directions
            acc_g.iter_mut().for_each(|v| *v = 0.0);
            acc_h.iter_mut().for_each(|v| *v = 0.0);
            acc_n.iter_mut().for_each(|v| *v = 0);
            last_val.iter_mut().for_each(|v| *v = f64::NAN);

            for &r in order {
                let r = r as usize;
                let nd = node_of[r];
                if nd == DONE {
                    continue;
                }
                let nd = nd as usize;
                let v = col[r];

                if acc_n[nd] > 0 && v > last_val[nd] && acc_n[nd] < tot_n[nd] {
                    let threshold = 0.5 * (last_val[nd] + v);
                    let miss_g = tot_g[nd] - nm_g[nd];
                    let miss_h = tot_h[nd] - nm_h[nd];
                    let miss_n = tot_n[nd] - nm_n[nd];

                    // missing right: left is the scanned prefix
                    if tot_n[nd] - acc_n[nd] >= 1 {
                        let stats = SplitStats {
                            g_left: acc_g[nd],
                            h_left: acc_h[nd],
                            g_right: tot_g[nd] - acc_g[nd],
                            h_right: tot_h[nd] - acc_h[nd],
                            lambda,
                            gamma,
                        };
                        consider(&mut best[nd], &stats, f, threshold, false);
                    }
                    // missing left: prefix plus all missing rows
                    if miss_n > 0 && nm_n[nd] - acc_n[nd] >= 1 {
                        let stats = SplitStats {
                            g_left: acc_g[nd] + miss_g,
                            h_left: acc_h[nd] + miss_h,
                            g_right: nm_g[nd] - acc_g[nd],
                            h_right: nm_h[nd] - acc_h[nd],
                            lambda,
                            gamma,
                        };
                        consider(&mut best[nd], &stats, f, threshold, true);
                    }
                }

                acc_g[nd] += grad[r];
                acc_h[nd] += hess[r];
                acc_n[nd] += 1;
                last_val[nd] = v;
            }
        }

        // apply the accepted splits, finalize the rest
        let mut next_slots = Vec::new();
        let mut next_g = Vec::new();
        let mut next_h = Vec::new();
        let mut next_n = Vec::new();
        // per active node: None → finalized, Some((left_local, right_local))
        let mut routing: Vec<Option<(u32, u32, usize, f64, bool)>> = vec![None; n_active];

        for nd in 0..n_active {
            match best[nd] {
                Some(split) if split.gain > 0.0 => {
                    gains[split.feature] += split.gain;
                    let left_slot = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    let right_slot = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes[slots[nd]] = Node::Split {
                        feature: split.feature,
                        threshold: split.threshold,
                        missing_left: split.missing_left,
                        left: left_slot,
                        right: right_slot,
                    };
                    let left_local = next_slots.len() as u32;
                    next_slots.push(left_slot);
                    next_g.push(0.0);
                    next_h.push(0.0);
                    next_n.push(0usize);
                    let right_local = next_slots.len() as u32;
                    next_slots.push(right_slot);
                    next_g.push(0.0);
                    next_h.push(0.0);
                    next_n.push(0usize);
                    routing[nd] = Some((
                        left_local,
                        right_local,
                        split.feature,
                        split.threshold,
                        split.missing_left,
                    ));
                }
                _ => {
                    finalize(&mut nodes, slots[nd], tot_g[nd], tot_h[nd]);
                }
            }
        }

        if next_slots.is_empty() {
            for x in node_of.iter_mut() {
                *x = DONE;
            }
            break;
        }

        for r in 0..n {
            let nd = node_of[r];
            if nd == DONE {
                continue;
            }
            match routing[nd as usize] {
                None => node_of[r] = DONE,
                Some((left, right, feature, threshold, missing_left)) => {
                    let v = matrix.value(r, feature);
                    let go_left = if v.is_nan() { missing_left } else { v < threshold };
                    let child = if go_left { left } else { right };
                    node_of[r] = child;
                    let c = child as usize;
                    next_g[c] += grad[r];
                    next_h[c] += hess[r];
                    next_n[c] += 1;
                }
            }
        }

        slots = next_slots;
        tot_g = next_g;
        tot_h = next_h;
        tot_n = next_n;
    }

    // depth budget exhausted: finalize surviving nodes
    for nd in 0..slots.len() {
        if matches!(nodes[slots[nd]], Node::Leaf(_)) {
            finalize(&mut nodes, slots[nd], tot_g[nd], tot_h[nd]);
        }
    }

    let tree = Tree { nodes };
    let deltas: Vec<f64> = (0..n)
        .map(|r| *tree.leaf_for_view(&RowView { matrix, row: r }))
        .collect();
    (tree, deltas, gains)
}

fn consider(
    best: &mut Option<BestSplit>,
    stats: &SplitStats,
    feature: usize,
    threshold: f64,
    missing_left: bool,
) {
    let Ok(gain) = split_gain(stats) else {
        return;
    };
    if gain > 0.0 && best.map(|b| gain > b.gain).unwrap_or(true) {
        *best = Some(BestSplit {
            gain,
            feature,
            threshold,
            missing_left,
        });
    }
}

/// Lets `Tree::leaf_for` route a row without materializing it.
struct RowView<'a> {
    matrix: &'a FeatureMatrix,
    row: usize,
}

impl std::ops::Index<usize> for RowView<'_> {
    type Output = f64;
    fn index(&self, col: usize) -> &f64 {
        &self.matrix.column(col)[self.row]
    }
}

impl<L> Tree<L> {
    fn leaf_for_view(&self, view: &RowView<'_>) -> &L {
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
                    let v = view[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v < *threshold };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }
}
