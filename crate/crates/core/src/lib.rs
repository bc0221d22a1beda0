//! Feature-weighted linear stacking (FWLS).
//!
//! A blend of `L` model predictions whose weights are linear functions of
//! `M` meta-features: `b(x) = Σ_ij v_ij f_j(x) g_i(x)`. Fitting is a single
//! ridge regression over the `M·L` product columns.
//!
//! - [`design`]: datasets, the product-column layout, fitted coefficients
//! - [`gram`]: streaming and parallel accumulation of `AᵀA`, `Aᵀy`, `yᵀy`
//! - [`solver`]: ridge solves, training RMSE, Sherman-Morrison updates
//! - [`store`]: the `.fwls` state file and state extension
//! - [`cv`]: K-fold evaluation, forward meta-feature selection, baselines
//! - [`cf`]: synthetic collaborative-filtering benchmark
//! - [`csv_io`]: CSV interchange for stacked data and coefficients

pub mod cf;
pub mod csv_io;
pub mod cv;
pub mod design;
pub mod error;
pub mod gram;
mod linalg;
mod par;
pub mod solver;
pub mod store;

pub use design::{blend_predict, BlendCoefficients, DesignMapping, StackedDataset, Standardizer};
pub use error::{FwlsError, Result};
pub use gram::{parallel_accumulate, ColumnBlock, ColumnBlockBuilder, ExtensionKind, GramState, GramSums, Row};
pub use linalg::Cholesky;
pub use solver::{solve, training_rmse, InverseState, SolvedBlend};
