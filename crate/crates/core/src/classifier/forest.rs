//! Random forest of classification trees.
//!
//! Each tree grows on a bootstrap sample, considering a random subset of
//! `p` features at every split (p = ⌈√n_features⌉ by default; p = n turns
//! the forest into plain bagging). Trees grow best-first on weighted gini
//! decrease up to `max_leaves` leaves. Leaves hold class frequencies;
//! prediction averages them across trees.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::FeatureMatrix;
use super::tree::{Node, Tree};
use super::ModelError;
use crate::stream_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_leaves: usize,
    /// Features considered per split; ⌈√n_features⌉ when unset.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 100,
            max_leaves: 64,
            features_per_split: None,
            bootstrap: true,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    n_classes: usize,
    n_features: usize,
    trees: Vec<Tree<Vec<f64>>>,
    /// Total gini decrease per feature across all accepted splits.
    gain_totals: Vec<f64>,
}

impl ForestModel {
    pub fn fit(
        matrix: &FeatureMatrix,
        labels: &[usize],
        n_classes: usize,
        params: &ForestParams,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let n = matrix.n_rows();
        let d = matrix.n_cols();
        if n == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        if params.trees == 0 || params.max_leaves < 2 || params.min_leaf == 0 {
            return Err(ModelError::InvalidParams(
                "forest needs trees ≥ 1, max_leaves ≥ 2, min_leaf ≥ 1".into(),
            ));
        }
        let p = params
            .features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d);

        let results: Vec<(Tree<Vec<f64>>, Vec<f64>)> = (0..params.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, t as u64));
                let rows: Vec<u32> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n) as u32).collect()
                } else {
                    (0..n as u32).collect()
                };
                grow_tree(matrix, labels, n_classes, params, p, rows, &mut rng)
            })
            .collect();

        let mut trees = Vec::with_capacity(params.trees);
        let mut gain_totals = vec![0.0; d];
        for (tree, gains) in results {
            trees.push(tree);
            for (g, add) in gain_totals.iter_mut().zip(&gains) {
                *g += add;
            }
        }

        Ok(ForestModel {
            n_classes,
            n_features: d,
            trees,
            gain_totals,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[Tree<Vec<f64>>] {
        &self.trees
    }

    pub fn gain_totals(&self) -> &[f64] {
        &self.gain_totals
    }

    /// Mean of per-tree leaf class frequencies.
    pub fn class_scores(&self, row: &[f64]) -> Result<Vec<f64>, ModelError> {
        if row.len() != self.n_features {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_features,
                got: row.len(),
                context: "predict row".into(),
            });
        }
        let mut out = vec![0.0; self.n_classes];
        for tree in &self.trees {
            let leaf = tree.leaf_for(row);
            for (o, v) in out.iter_mut().zip(leaf) {
                *o += v;
            }
        }
        let scale = 1.0 / self.trees.len() as f64;
        for o in &mut out {
            *o *= scale;
        }
        Ok(out)
    }
}

struct Pending {
    slot: usize,
    rows: Vec<u32>,
    counts: Vec<f64>,
    /// Σ counts², maintained for the gini score.
    sum_sq: f64,
    best: Option<GiniSplit>,
}

#[derive(Clone, Copy)]
struct GiniSplit {
    /// Weighted gini decrease: score_L + score_R − score_parent where
    /// score = Σ_c counts_c² / n.
    improvement: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

fn grow_tree(
    matrix: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    params: &ForestParams,
    p: usize,
    rows: Vec<u32>,
    rng: &mut ChaCha8Rng,
) -> (Tree<Vec<f64>>, Vec<f64>) {
    let d = matrix.n_cols();
    let mut nodes: Vec<Node<Vec<f64>>> = vec![Node::Leaf(Vec::new())];
    let mut gains = vec![0.0; d];

    let counts_of = |rows: &[u32]| -> (Vec<f64>, f64) {
        let mut counts = vec![0.0; n_classes];
        for &r in rows {
            counts[labels[r as usize]] += 1.0;
        }
        let sum_sq = counts.iter().map(|c| c * c).sum();
        (counts, sum_sq)
    };

    let (counts, sum_sq) = counts_of(&rows);
    let mut root = Pending {
        slot: 0,
        rows,
        counts,
        sum_sq,
        best: None,
    };
    root.best = best_gini_split(matrix, labels, n_classes, params, p, &root, rng);
    let mut pending = vec![root];
    let mut leaves = 1usize;

    while leaves < params.max_leaves {
        // take the pending node with the largest positive improvement
        let mut pick: Option<(usize, f64)> = None;
        for (i, pend) in pending.iter().enumerate() {
            if let Some(split) = &pend.best {
                if split.improvement > 0.0
                    && pick.map(|(_, imp)| split.improvement > imp).unwrap_or(true)
                {
                    pick = Some((i, split.improvement));
                }
            }
        }
        let Some((idx, _)) = pick else { break };
        let node = pending.swap_remove(idx);
        let split = node.best.expect("picked node has a split");
        gains[split.feature] += split.improvement;

        let col = matrix.column(split.feature);
        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in &node.rows {
            let v = col[r as usize];
            let go_left = if v.is_nan() {
                split.missing_left
            } else {
                v < split.threshold
            };
            if go_left {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }

        let left_slot = nodes.len();
        nodes.push(Node::Leaf(Vec::new()));
        let right_slot = nodes.len();
        nodes.push(Node::Leaf(Vec::new()));
        nodes[node.slot] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            missing_left: split.missing_left,
            left: left_slot,
            right: right_slot,
        };
        leaves += 1;

        for (slot, rows) in [(left_slot, left_rows), (right_slot, right_rows)] {
            let (counts, sum_sq) = counts_of(&rows);
            let mut child = Pending {
                slot,
                rows,
                counts,
                sum_sq,
                best: None,
            };
            child.best = best_gini_split(matrix, labels, n_classes, params, p, &child, rng);
            pending.push(child);
        }
    }

    for pend in pending {
        let n = pend.rows.len() as f64;
        let freq: Vec<f64> = pend.counts.iter().map(|c| c / n).collect();
        nodes[pend.slot] = Node::Leaf(freq);
    }

    (Tree { nodes }, gains)
}

/// Best split over a fresh random subset of features, or None when no split
/// improves the gini score under the min_leaf constraint.
fn best_gini_split(
    matrix: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    params: &ForestParams,
    p: usize,
    node: &Pending,
    rng: &mut ChaCha8Rng,
) -> Option<GiniSplit> {
    let n_node = node.rows.len();
    if n_node < 2 * params.min_leaf {
        return None;
    }
    // pure node
    if node.counts.iter().any(|&c| c as usize == n_node) {
        return None;
    }

    let d = matrix.n_cols();
    let mut feature_pool: Vec<usize> = (0..d).collect();
    feature_pool.shuffle(rng);
    let features = &feature_pool[..p];

    let parent_score = node.sum_sq / n_node as f64;
    let min_leaf = params.min_leaf;
    let mut best: Option<GiniSplit> = None;

    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n_node);
    for &f in features {
        let col = matrix.column(f);
        pairs.clear();
        let mut miss_counts = vec![0.0f64; n_classes];
        let mut miss_n = 0usize;
        for &r in &node.rows {
            let v = col[r as usize];
            if v.is_nan() {
                miss_counts[labels[r as usize]] += 1.0;
                miss_n += 1;
            } else {
                pairs.push((v, labels[r as usize]));
            }
        }
        if pairs.len() < 2 {
            continue;
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let miss_sum_sq: f64 = miss_counts.iter().map(|c| c * c).sum();

        // scan 1: missing goes right. left = prefix of non-missing.
        // scan 2: missing goes left. left = missing + prefix.
        for missing_left in [false, true] {
            if missing_left && miss_n == 0 {
                break; // identical to scan 1
            }
            let mut left_counts = if missing_left {
                miss_counts.clone()
            } else {
                vec![0.0; n_classes]
            };
            let mut left_sum_sq = if missing_left { miss_sum_sq } else { 0.0 };
            let mut left_n = if missing_left { miss_n } else { 0 };

            let mut right_counts = node.counts.clone();
            let mut right_sum_sq = node.sum_sq;
            let mut right_n = n_node;
            if missing_left {
                for (rc, mc) in right_counts.iter_mut().zip(&miss_counts) {
                    let old = *rc;
                    *rc -= mc;
                    right_sum_sq += *rc * *rc - old * old;
                }
                right_n -= miss_n;
            }

            let mut prev_val = f64::NAN;
            for &(v, y) in pairs.iter() {
                if !prev_val.is_nan() && v > prev_val && left_n >= min_leaf && right_n >= min_leaf
                {
                    let score = left_sum_sq / left_n as f64 + right_sum_sq / right_n as f64;
                    let improvement = score - parent_score;
                    if improvement > 0.0
                        && best
                            .as_ref()
                            .map(|b| improvement > b.improvement)
                            .unwrap_or(true)
                    {
                        best = Some(GiniSplit {
                            improvement,
                            feature: f,
                            threshold: 0.5 * (prev_val + v),
                            missing_left,
                        });
                    }
                }
                // move (v, y) from right to left
                let lc = left_counts[y];
                left_sum_sq += 2.0 * lc + 1.0;
                left_counts[y] = lc + 1.0;
                left_n += 1;
                let rc = right_counts[y];
                right_sum_sq += -2.0 * rc + 1.0;
                right_counts[y] = rc - 1.0;
                right_n -= 1;
                prev_val = v;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three widely separated value bands mapping to three classes.
    fn banded(n_per_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for y in 0..3usize {
            for i in 0..n_per_class {
                let base = y as f64 * 100.0;
                rows.push(vec![base + (i % 5) as f64, (i % 3) as f64]);
                labels.push(y);
            }
        }
        (rows, labels)
    }

    #[test]
    fn single_tree_bagging_matches_unrestricted_tree_on_separable_data() {
        let (rows, labels) = banded(30);
        let matrix = FeatureMatrix::from_rows(&rows).unwrap();
        let params = ForestParams {
            trees: 1,
            features_per_split: Some(2), // p = n
            ..Default::default()
        };
        let forest = ForestModel::fit(&matrix, &labels, 3, &params, 11).unwrap();

        let unrestricted = ForestModel::fit(
            &matrix,
            &labels,
            3,
            &ForestParams {
                trees: 1,
                bootstrap: false,
                features_per_split: Some(2),
                ..Default::default()
            },
            23,
        )
        .unwrap();

        for (r, _) in rows.iter().enumerate() {
            let a = forest.class_scores(&rows[r]).unwrap();
            let b = unrestricted.class_scores(&rows[r]).unwrap();
            let am = a
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            let bm = b
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(am, bm, "row {r}");
            assert_eq!(am, labels[r], "row {r}");
        }
    }

    #[test]
    fn scores_form_distribution() {
        let (rows, labels) = banded(10);
        let matrix = FeatureMatrix::from_rows(&rows).unwrap();
        let forest = ForestModel::fit(
            &matrix,
            &labels,
            3,
            &ForestParams {
                trees: 10,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let scores = forest.class_scores(&[150.0, 1.0]).unwrap();
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(scores.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn identical_seed_reproduces_identical_trees() {
        let (rows, labels) = banded(15);
        let matrix = FeatureMatrix::from_rows(&rows).unwrap();
        let params = ForestParams {
            trees: 7,
            ..Default::default()
        };
        let a = ForestModel::fit(&matrix, &labels, 3, &params, 99).unwrap();
        let b = ForestModel::fit(&matrix, &labels, 3, &params, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_values_get_a_learned_direction() {
        // class 0 rows have the feature missing, class 1 rows have it large;
        // a single split must route NaN correctly
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            if i % 2 == 0 {
                rows.push(vec![f64::NAN, 0.0]);
                labels.push(0);
            } else {
                rows.push(vec![50.0 + (i % 5) as f64, 0.0]);
                labels.push(1);
            }
        }
        // anchor values so non-missing side spans a range
        rows.push(vec![1.0, 0.0]);
        labels.push(0);
        rows.push(vec![2.0, 0.0]);
        labels.push(0);

        let matrix = FeatureMatrix::from_rows(&rows).unwrap();
        let forest = ForestModel::fit(
            &matrix,
            &labels,
            2,
            &ForestParams {
                trees: 5,
                bootstrap: false,
                features_per_split: Some(2),
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let missing_pred = forest.class_scores(&[f64::NAN, 0.0]).unwrap();
        assert!(missing_pred[0] > 0.9, "{missing_pred:?}");
        let big_pred = forest.class_scores(&[52.0, 0.0]).unwrap();
        assert!(big_pred[1] > 0.9, "{big_pred:?}");
    }

    #[test]
    fn max_leaves_bounds_tree_size() {
        let (rows, labels) = banded(40);
        let matrix = FeatureMatrix::from_rows(&rows).unwrap();
        let forest = ForestModel::fit(
            &matrix,
            &labels,
            3,
            &ForestParams {
                trees: 3,
                max_leaves: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        for tree in forest.trees() {
            assert!(tree.leaf_count() <= 4);
        }
    }

    #[test]
    fn gain_totals_concentrate_on_the_signal_feature() {
        let (rows, labels) = banded(30);
        let matrix = FeatureMatrix::from_rows(&rows).unwrap();
        let forest = ForestModel::fit(
            &matrix,
            &labels,
            3,
            &ForestParams {
                trees: 20,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        assert!(forest.gain_totals()[0] > forest.gain_totals()[1] * 10.0);
    }
}
