//! Longitudinal cohort phenotyping.
//!
//! The pipeline runs in three steps: preprocessing with tree-based feature
//! ranking, a random-intercept logistic model of the repeated binary outcome,
//! and t-SNE + Gaussian-mixture phenotype clustering with per-feature KL
//! divergence, trajectory distances and cluster comparison tests.

pub mod cluster;
pub mod cohort;
pub mod eval;
pub mod lgmm;
pub mod pipeline;
pub mod preprocess;
pub mod rank;
pub mod rng;
pub mod stats;
pub mod svg;
pub mod synth;
pub mod table;
pub mod tsne;
