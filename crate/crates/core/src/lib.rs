//! End-to-end hotel-cluster ranking pipeline.
//!
//! The library covers the full path from raw search logs to ranked top-5
//! cluster predictions:
//!
//! - [`schema`] — typed ingestion and validation of the train/test logs and
//!   the destination latent-feature table
//! - [`preprocess`] — booker pruning, session splitting, preference vectors,
//!   stay duration, seasonal month encoding, feature assembly
//! - [`pca`] — principal-component reduction of the 149 destination latents
//! - [`completion`] — low-rank completion of the sparse city × market
//!   distance matrix by alternating least squares
//! - [`classifier`] — four probabilistic classifiers (Bernoulli naive Bayes,
//!   SGD multinomial logistic, random forest, gradient-boosted trees)
//! - [`ensemble`] — probability averaging and top-5 extraction
//! - [`leak`] — train/test key matching with partial-match fallback
//! - [`eval`] — MAP@5 scoring, splits, model comparison, ablation,
//!   correlation analysis
//! - [`synth`] — seeded synthetic data generator with planted structure

pub mod classifier;
pub mod completion;
pub mod ensemble;
pub mod eval;
pub mod leak;
pub mod pca;
pub mod preprocess;
pub mod schema;
pub mod synth;

/// Number of hotel clusters; cluster ids live in `0..CLUSTER_COUNT`.
pub const CLUSTER_COUNT: usize = 100;

/// Dimensionality of the raw destination latent vectors.
pub const LATENT_DIM: usize = 149;

/// Derives an independent stream seed from a master seed and a stream index.
///
/// Used wherever one run-level seed has to drive several independent RNGs
/// (per tree, per class, per stage) without correlation between streams.
pub(crate) fn stream_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
