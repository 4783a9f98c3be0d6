//! Discovery of treated subpopulations whose outcome distributions diverge
//! from their control-group references, via nonparametric scan statistics
//! maximized over rectangular subsets of a covariate tensor.
//!
//! The pipeline: group records by covariate profile ([`data::CellTable`]),
//! convert each treated outcome to an empirical p-value range against the
//! control outcomes sharing its profile ([`reference`]), then search for the
//! rectangular subpopulation with an unexpectedly large mass of significant
//! p-values ([`scan`]), scored by a goodness-of-fit statistic ([`score`]).
//! Statistical calibration (permutation testing, holdout effect estimates,
//! exact-recovery diagnostics) lives in [`inference`]; a brute-force
//! validation oracle in [`oracle`]; and a semi-synthetic simulation harness
//! with power/accuracy metrics in [`simgen`].

pub mod data;
pub mod inference;
pub mod oracle;
pub mod reference;
pub mod scan;
pub mod score;
pub mod simgen;

mod error;
mod rng;

pub use data::{
    build_cell_table, subset_counts, CellTable, CovariateSchema, Record, Subpopulation,
    SubsetCounts, TableConfig,
};
pub use error::{Error, Result};
pub use oracle::{exhaustive_mode, exhaustive_scan, OracleResult};
pub use reference::{
    candidate_alphas, significance_mass, PValueRange, ReferenceDistribution, Sidedness,
};
pub use scan::{tess_scan, ScanConfig, ScanResult};
pub use score::{max_over_alpha, score_bj, score_na, score_transform, ScoreKind, ScoredAlpha};
pub use simgen::{Alternative, PowerReport, SimBase, SimSpec};

pub(crate) use rng::mix_seed;
