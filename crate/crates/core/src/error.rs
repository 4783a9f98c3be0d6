use thiserror::Error;

/// Errors surfaced by table construction, scanning, and calibration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input records are empty")]
    EmptyInput,

    #[error("record {record}: profile does not match schema ({reason})")]
    ProfileMismatch { record: usize, reason: String },

    #[error("invalid covariate schema: {0}")]
    InvalidSchema(String),

    #[error("invalid subpopulation: {0}")]
    InvalidSubpopulation(String),

    #[error("invalid alpha window: require 0 < alpha_min < alpha_max < 1, got [{alpha_min}, {alpha_max}]")]
    InvalidAlphaWindow { alpha_min: f64, alpha_max: f64 },

    #[error("no treatment units with a reference distribution (M = 0); nothing to scan")]
    NoTreatmentCells,

    #[error("subset enumeration too large: {count} rectangular subsets exceeds cap {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
