//! Desk-scale collaborative-filtering testbed for blending strategies.
//!
//! A latent-factor rating generator with heavy-tailed user activity, three
//! base recommenders trained on the train split (global effects, biased
//! matrix factorization, item-item neighbours), support and dispersion
//! meta-features computed from the train split, and an end-to-end
//! comparison of single models, averaging, linear stacking, the merged-input
//! baseline and feature-weighted stacking.
//!
//! Models and meta-features only ever see a [`TrainSet`], which can only be
//! built from train-labelled ratings; blend and test targets are out of
//! their reach by construction.

mod bench;
mod data;
mod features;
mod models;

pub use bench::{
    evaluate, prepare, run_benchmark, BenchmarkConfig, BenchmarkData, BenchmarkReport, StrategyResult, BEST_SINGLE, FWLS,
    MERGED_BASELINE, STANDARD_STACKING, UNIFORM_AVERAGE,
};
pub use data::{generate, read_ratings_csv, GeneratorConfig, Rating, RatingDataset, Split, TrainSet};
pub use features::{compute_meta_features, MetaFeatureSpec};
pub use models::{
    train_global_effects, train_item_knn, train_mf, GlobalEffects, ItemKnn, KnnConfig, MatrixFactorization, MfConfig,
    Predictor,
};
