use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid curve model: {0}")]
    InvalidCurve(String),
    #[error("invalid qubit config: {0}")]
    InvalidQubit(String),
    #[error("invalid scan schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid scan {0}: {1}")]
    InvalidScan(u64, String),
}

/// A scan excluded from template construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedScan {
    pub scan_id: u64,
    pub reason: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("need at least 2 admissible scans, got {0}")]
    TooFewScans(usize),
    #[error("bias grid mismatch: {0}")]
    GridMismatch(String),
    #[error("scans belong to different qubits ({0} and {1})")]
    MixedQubits(u8, u8),
    #[error("{} scan(s) failed the jump-free screen: {}", .0.len(), describe_rejected(.0))]
    ScreenFailed(Vec<RejectedScan>),
    #[error("invalid template: {0}")]
    Invalid(String),
}

fn describe_rejected(r: &[RejectedScan]) -> String {
    r.iter()
        .map(|s| format!("scan {} ({})", s.scan_id, s.reason))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("empty segment")]
    EmptySegment,
    #[error("bias grid mismatch: {0}")]
    GridMismatch(String),
    #[error("no template for qubit {0}")]
    TemplateMissing(u8),
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatesError {
    #[error("efficiency must lie in (0, 1], got {0}")]
    BadEfficiency(f64),
    #[error("livetime must be positive, got {0}")]
    BadLivetime(f64),
    #[error("coverage must lie in (0, 1), got {0}")]
    BadCoverage(f64),
    #[error("spectra have different binning")]
    BinningMismatch,
    #[error("no counts above {0} keV")]
    EmptyAboveThreshold(f64),
    #[error("flux ratio {0} makes the excess-rate system singular")]
    DegenerateRatio(f64),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported schema_version {found} (expected {expected})")]
    Schema {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Rates(#[from] RatesError),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Rates(#[from] RatesError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
