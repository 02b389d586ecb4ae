//! Counting statistics: efficiency-corrected rates, cross-qubit
//! coincidences, the gamma flux ratio and the excess-rate decomposition.
//!
//! Rates are in mHz and livetimes in hours throughout.

mod coincidence;
mod excess;
mod poisson;
mod spectrum;
mod table;

pub use coincidence::{
    pair_coincidences, pair_rate, stochastic_coincidence_rate, CoincidencePair, MagWindow,
    PairEfficiency, DEFAULT_WINDOW_S,
};
pub use excess::{solve_excess_rate, ExcessSolution, Propagated};
pub use poisson::{
    corrected_rate, poisson_interval, pooled_rate, Exposure, RateEstimate, ONE_SIGMA,
};
pub use spectrum::{lmo_flux_ratio, FluxRatio, SpectrumHistogram};
pub use table::{format_cell, render_table, TableRow};

pub(crate) const SECONDS_PER_HOUR: f64 = 3600.0;
