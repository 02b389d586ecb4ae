//! Detection and statistics of discontinuous offset-charge jumps in
//! charge-sensitive transmon qubits.
//!
//! The crate covers the whole analysis chain for Ramsey charge tomography:
//!
//! - [`model`]: offset-charge phase, the analytic `P1` curve, scan timing.
//! - [`template`]: data-driven one-period reference curves.
//! - [`jumpfind`]: rolling reduced-χ² jump finder.
//! - [`synth`]: synthetic scans, jump injection and the Monte-Carlo
//!   efficiency harness.
//! - [`rates`]: Poisson intervals, efficiency-corrected rates, coincidences,
//!   gamma-flux ratio and the excess-rate decomposition.
//! - [`io`]: file formats.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod jumpfind;
pub mod model;
pub mod rates;
pub mod synth;
pub mod template;

pub use error::{Error, Result};
pub use jumpfind::{
    best_fit_phase, find_jumps, jump_magnitude, rolling_chi2_scan, DetectionConfig, JumpEvent,
    JumpFlag, ScanDetector, SegmentFit,
};
pub use model::{
    p1_of_offset_charge, phase_of_offset_charge, wrap_charge, ChargeScan, CurveModel, QubitConfig,
    ScanPoint, ScanSchedule,
};
pub use template::{build_template, stitch_template, template_predict, Template, TemplateOptions};
