//! Probability averaging across models and top-5 extraction.

use thiserror::Error;

use crate::classifier::ClusterDistribution;
use crate::schema::ClusterId;
use crate::CLUSTER_COUNT;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("cannot average an empty list of distributions")]
    Empty,
    #[error("weights must match distributions ({got} weights for {n} distributions)")]
    WeightCount { got: usize, n: usize },
    #[error("weights must be non-negative with a positive sum")]
    BadWeights,
}

/// An ordered list of exactly five distinct cluster ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RankedPrediction([ClusterId; 5]);

impl RankedPrediction {
    /// Wraps five ids, checking distinctness and range.
    pub fn new(clusters: [ClusterId; 5]) -> Option<Self> {
        for (i, &c) in clusters.iter().enumerate() {
            if c as usize >= CLUSTER_COUNT {
                return None;
            }
            if clusters[..i].contains(&c) {
                return None;
            }
        }
        Some(RankedPrediction(clusters))
    }

    pub fn clusters(&self) -> &[ClusterId; 5] {
        &self.0
    }

    /// 1-based rank of a cluster in the list, if present.
    pub fn rank_of(&self, cluster: ClusterId) -> Option<usize> {
        self.0.iter().position(|&c| c == cluster).map(|i| i + 1)
    }

    /// Space-separated ids, the submission-file cell format.
    pub fn to_space_separated(&self) -> String {
        self.0
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl std::fmt::Display for RankedPrediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_space_separated())
    }
}

/// Unweighted elementwise mean of valid distributions.
pub fn average_proba(
    distributions: &[ClusterDistribution],
) -> Result<ClusterDistribution, EnsembleError> {
    if distributions.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if distributions.len() == 1 {
        return Ok(distributions[0].clone());
    }
    let weights = vec![1.0; distributions.len()];
    average_proba_weighted(distributions, &weights)
}

/// Weighted mean; exposed as an optional configuration, the pipeline
/// default is the unweighted [`average_proba`].
pub fn average_proba_weighted(
    distributions: &[ClusterDistribution],
    weights: &[f64],
) -> Result<ClusterDistribution, EnsembleError> {
    if distributions.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if weights.len() != distributions.len() {
        return Err(EnsembleError::WeightCount {
            got: weights.len(),
            n: distributions.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || total <= 0.0 {
        return Err(EnsembleError::BadWeights);
    }
    let mut acc = vec![0.0; CLUSTER_COUNT];
    for (dist, &w) in distributions.iter().zip(weights) {
        for (a, p) in acc.iter_mut().zip(dist.probabilities()) {
            *a += w * p;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(ClusterDistribution::from_scores(acc).expect("mean of distributions is a distribution"))
}

/// The `k` highest-probability cluster ids, descending, ties broken by
/// ascending cluster id.
pub fn top_k(distribution: &ClusterDistribution, k: usize) -> Vec<ClusterId> {
    let p = distribution.probabilities();
    let mut ids: Vec<ClusterId> = (0..CLUSTER_COUNT as u8).collect();
    ids.sort_by(|&a, &b| {
        p[b as usize]
            .partial_cmp(&p[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    ids.truncate(k.min(CLUSTER_COUNT));
    ids
}

/// Top-5 extraction with the deterministic tie-break.
pub fn top_five(distribution: &ClusterDistribution) -> RankedPrediction {
    let ids = top_k(distribution, 5);
    RankedPrediction([ids[0], ids[1], ids[2], ids[3], ids[4]])
}

/// Builds a ranked prediction from any iterator of candidate ids, taking
/// the first five distinct ones. Returns None when fewer than five distinct
/// ids arrive.
pub fn first_five_distinct(candidates: impl IntoIterator<Item = ClusterId>) -> Option<RankedPrediction> {
    let mut picked: Vec<ClusterId> = Vec::with_capacity(5);
    for c in candidates {
        if (c as usize) < CLUSTER_COUNT && !picked.contains(&c) {
            picked.push(c);
            if picked.len() == 5 {
                return RankedPrediction::new([picked[0], picked[1], picked[2], picked[3], picked[4]]);
            }
        }
    }
    None
}
