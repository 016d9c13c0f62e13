//! Four probabilistic classifiers over engineered features, each producing
//! a 100-way cluster distribution: Bernoulli naive Bayes, SGD multinomial
//! logistic regression, a random forest, and gradient-boosted trees.
//!
//! The model internals are class-count generic (the contract tests exercise
//! them on small fixtures); the public [`fit`]/[`predict_proba`] surface
//! works at the full 100 clusters.

pub mod boosted;
pub mod data;
pub mod forest;
pub mod linear;
pub mod naive_bayes;
pub mod tree;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use boosted::{BoostedModel, GbtParams};
pub use data::{check_labels, column_medians, FeatureMatrix};
pub use forest::{ForestModel, ForestParams};
pub use linear::{LinearModel, SgdParams};
pub use naive_bayes::{NaiveBayesModel, NbParams};
pub use tree::{split_gain, SplitStats};

use crate::preprocess::{EngineeredFeatures, FeatureLayout};
use crate::schema::ClusterId;
use crate::CLUSTER_COUNT;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("example {row} has no label")]
    MissingLabel { row: usize },
    #[error("example {row} label {label} outside [0,{}]", n_classes - 1)]
    LabelRange {
        row: usize,
        label: ClusterId,
        n_classes: usize,
    },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("feature importance requires a tree model, got {0}")]
    NotTreeModel(ModelKind),
    #[error("model file: {0}")]
    BadFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Non-negative scores over the 100 clusters summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution(Vec<f64>);

impl ClusterDistribution {
    /// Wraps raw non-negative scores, normalizing them to sum to 1.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self, ModelError> {
        if scores.len() != CLUSTER_COUNT {
            return Err(ModelError::DimensionMismatch {
                expected: CLUSTER_COUNT,
                got: scores.len(),
                context: "cluster distribution".into(),
            });
        }
        let mut total = 0.0;
        for &s in &scores {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(ModelError::InvalidParams(format!(
                    "cluster scores must be finite and non-negative, got {s}"
                )));
            }
            total += s;
        }
        if total <= 0.0 {
            return Err(ModelError::InvalidParams(
                "cluster scores sum to zero".into(),
            ));
        }
        let p = scores.into_iter().map(|s| s / total).collect();
        Ok(ClusterDistribution(p))
    }

    pub fn uniform() -> Self {
        ClusterDistribution(vec![1.0 / CLUSTER_COUNT as f64; CLUSTER_COUNT])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> ClusterId {
        let mut best = 0usize;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as ClusterId
    }
}

/// Which classifier to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    NaiveBayes,
    Sgd,
    Forest,
    Boosted,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::NaiveBayes,
        ModelKind::Sgd,
        ModelKind::Forest,
        ModelKind::Boosted,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::NaiveBayes => "nb",
            ModelKind::Sgd => "sgd",
            ModelKind::Forest => "forest",
            ModelKind::Boosted => "gbt",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nb" => Ok(ModelKind::NaiveBayes),
            "sgd" => Ok(ModelKind::Sgd),
            "forest" => Ok(ModelKind::Forest),
            "gbt" => Ok(ModelKind::Boosted),
            other => Err(format!(
                "unknown model kind `{other}` (expected nb|sgd|forest|gbt)"
            )),
        }
    }
}

/// Hyperparameters for all four kinds; [`fit`] picks the relevant block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub nb: NbParams,
    pub sgd: SgdParams,
    pub forest: ForestParams,
    pub gbt: GbtParams,
}

/// A fitted classifier of any kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    NaiveBayes(NaiveBayesModel),
    Sgd(LinearModel),
    Forest(ForestModel),
    Boosted(BoostedModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::NaiveBayes(_) => ModelKind::NaiveBayes,
            Model::Sgd(_) => ModelKind::Sgd,
            Model::Forest(_) => ModelKind::Forest,
            Model::Boosted(_) => ModelKind::Boosted,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::NaiveBayes(m) => m.n_features(),
            Model::Sgd(m) => m.n_features(),
            Model::Forest(m) => m.n_features(),
            Model::Boosted(m) => m.n_features(),
        }
    }

    /// Raw class scores for a dense row; always a valid distribution.
    pub fn class_scores(&self, row: &[f64]) -> Result<Vec<f64>, ModelError> {
        match self {
            Model::NaiveBayes(m) => m.class_scores(row),
            Model::Sgd(m) => m.class_scores(row),
            Model::Forest(m) => m.class_scores(row),
            Model::Boosted(m) => m.class_scores(row),
        }
    }
}

/// Trains a classifier of the given kind on labeled feature rows.
///
/// Deterministic for a fixed seed. Labels must be cluster ids; every kind
/// trains over all 100 clusters.
pub fn fit(
    kind: ModelKind,
    examples: &[EngineeredFeatures],
    params: &ModelParams,
    seed: u64,
) -> Result<Model, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let layout = FeatureLayout::new(examples[0].latent.len());
    let matrix = FeatureMatrix::from_examples(examples, &layout)?;
    let labels = check_labels(examples, CLUSTER_COUNT)?;

    let model = match kind {
        ModelKind::NaiveBayes => Model::NaiveBayes(NaiveBayesModel::fit(
            &matrix,
            &labels,
            CLUSTER_COUNT,
            &layout.kinds(),
            &params.nb,
        )?),
        ModelKind::Sgd => Model::Sgd(LinearModel::fit(
            &matrix,
            &labels,
            CLUSTER_COUNT,
            &params.sgd,
            seed,
        )?),
        ModelKind::Forest => Model::Forest(ForestModel::fit(
            &matrix,
            &labels,
            CLUSTER_COUNT,
            &params.forest,
            seed,
        )?),
        ModelKind::Boosted => Model::Boosted(BoostedModel::fit(
            &matrix,
            &labels,
            CLUSTER_COUNT,
            &params.gbt,
            seed,
        )?),
    };
    Ok(model)
}

/// Cluster-probability prediction for one feature row.
pub fn predict_proba(
    model: &Model,
    features: &EngineeredFeatures,
) -> Result<ClusterDistribution, ModelError> {
    let layout = FeatureLayout::new(features.latent.len());
    let row = layout.to_dense(features);
    ClusterDistribution::from_scores(model.class_scores(&row)?)
}

/// Total split gain attributed to each feature, normalized to sum to 1,
/// sorted descending. Zero-gain features are included at the tail.
pub fn feature_importance(model: &Model) -> Result<Vec<(usize, f64)>, ModelError> {
    let totals = match model {
        Model::Forest(m) => m.gain_totals().to_vec(),
        Model::Boosted(m) => m.gain_totals().to_vec(),
        other => return Err(ModelError::NotTreeModel(other.kind())),
    };
    let sum: f64 = totals.iter().sum();
    let mut shares: Vec<(usize, f64)> = totals
        .into_iter()
        .enumerate()
        .map(|(i, g)| (i, if sum > 0.0 { g / sum } else { 0.0 }))
        .collect();
    shares.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(shares)
}

const MODEL_FORMAT: &str = "cluster-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelEnvelope {
    format: String,
    version: u32,
    model: Model,
}

/// Saves a model as a versioned JSON file.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let file = File::create(path)?;
    write_model(model, BufWriter::new(file))
}

pub fn write_model<W: Write>(model: &Model, writer: W) -> Result<(), ModelError> {
    let envelope = ModelEnvelope {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer(writer, &envelope)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    let file = File::open(path)?;
    read_model(BufReader::new(file))
}

pub fn read_model<R: Read>(reader: R) -> Result<Model, ModelError> {
    let envelope: ModelEnvelope = serde_json::from_reader(reader)?;
    if envelope.format != MODEL_FORMAT {
        return Err(ModelError::BadFile(format!(
            "unrecognized format `{}`",
            envelope.format
        )));
    }
    if envelope.version != MODEL_VERSION {
        return Err(ModelError::BadFile(format!(
            "unsupported version {}",
            envelope.version
        )));
    }
    Ok(envelope.model)
}
