//! Open-set coreset selection over precomputed embeddings.
//!
//! Given a small fine-grained target set and a large unlabeled open-set, both
//! as unit-norm feature matrices, the engine selects the open-set rows most
//! similar to the target. The target is first reduced to `k` cluster
//! centroids; each round then takes, for every centroid, its nearest
//! not-yet-selected open-set row. Rounds repeat until a budget is reached or
//! the round's facility-location value falls below `tau` times the first
//! round's value.
//!
//! Module map:
//!
//! - [`embedding`]: matrices, labels, the `EMB1` binary format and CSV.
//! - [`clustering`]: seeded spherical (or Euclidean) k-means.
//! - [`scoring`]: similarities, the facility-location objective and the
//!   per-centroid candidate index.
//! - [`sampler`]: the round loop with its stopping rule, plus random and
//!   label-oracle baselines.
//! - [`synth`]: synthetic worlds with ground truth, metrics, an exhaustive
//!   round oracle and parameter sweeps.
//! - [`cli`]: the `simcore` command-line frontend.

pub mod cli;
pub mod clustering;
pub mod embedding;
pub mod error;
pub mod sampler;
pub mod scoring;
pub mod synth;

pub use clustering::{assign, init_centroids, kmeans_fit, Assignment, CentroidSet, Geometry, KMeansParams};
pub use embedding::{
    l2_normalize, load_embeddings, save_embeddings, validate, EmbeddingMatrix, Format, LabelVector,
    ValidationReport,
};
pub use error::{Error, Result};
pub use sampler::{
    label_oracle_select, random_select, simcore_select, stopping_check, BaselineSpec, RoundResult,
    SamplerConfig, SelectionReport, StopDecision, StopReason,
};
pub use scoring::{facility_value, similarity, similarity_block, CandidateIndex, RoundPick, SimilarityBlock};
