use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use super::SECONDS_PER_HOUR;
use crate::error::RatesError;

/// Central coverage of a ±1σ Gaussian interval.
pub const ONE_SIGMA: f64 = 0.6827;

/// Garwood central interval for a Poisson mean given `n` observed counts.
pub fn poisson_interval(n: u64, coverage: f64) -> Result<(f64, f64), RatesError> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(RatesError::BadCoverage(coverage));
    }
    let tail = 0.5 * (1.0 - coverage);
    let q = |shape: f64, p: f64| {
        Gamma::new(shape, 1.0)
            .expect("positive shape")
            .inverse_cdf(p)
    };
    let lo = if n == 0 { 0.0 } else { q(n as f64, tail) };
    let hi = q(n as f64 + 1.0, 1.0 - tail);
    Ok((lo, hi))
}

/// An efficiency-corrected rate with its Poisson interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub label: String,
    /// mHz.
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_events: u64,
    /// Hours of exposure. For pooled rates this is the summed qubit-hours.
    pub livetime: f64,
    /// Efficiency applied. For pooled rates this is the exposure-weighted mean,
    /// so `rate = n_events / (efficiency × livetime)` still holds.
    pub efficiency: f64,
}

impl RateEstimate {
    pub fn err_high(&self) -> f64 {
        self.ci_high - self.rate
    }

    pub fn err_low(&self) -> f64 {
        self.rate - self.ci_low
    }

    /// Half-width of the interval.
    pub fn sigma(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    /// Zero-count cells are quoted as an upper limit.
    pub fn is_upper_limit(&self) -> bool {
        self.n_events == 0
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

fn check(livetime: f64, efficiency: f64) -> Result<(), RatesError> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(RatesError::BadEfficiency(efficiency));
    }
    if !(livetime > 0.0) || !livetime.is_finite() {
        return Err(RatesError::BadLivetime(livetime));
    }
    Ok(())
}

/// `n_events / (efficiency × livetime)` in mHz, with the Garwood interval
/// scaled the same way.
pub fn corrected_rate(
    n_events: u64,
    livetime: f64,
    efficiency: f64,
    coverage: f64,
) -> Result<RateEstimate, RatesError> {
    check(livetime, efficiency)?;
    let (lo, hi) = poisson_interval(n_events, coverage)?;
    let scale = 1e3 / (efficiency * livetime * SECONDS_PER_HOUR);
    Ok(RateEstimate {
        label: String::new(),
        rate: n_events as f64 * scale,
        ci_low: lo * scale,
        ci_high: hi * scale,
        n_events,
        livetime,
        efficiency,
    })
}

/// Counts, livetime (h) and efficiency of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub n_events: u64,
    pub livetime: f64,
    pub efficiency: f64,
}

/// Pooled counts over pooled exposure, `Σ n_i / Σ ε_i T_i`.
pub fn pooled_rate(channels: &[Exposure], coverage: f64) -> Result<RateEstimate, RatesError> {
    if channels.is_empty() {
        return Err(RatesError::BadLivetime(0.0));
    }
    let mut n = 0;
    let mut t = 0.0;
    let mut et = 0.0;
    for c in channels {
        check(c.livetime, c.efficiency)?;
        n += c.n_events;
        t += c.livetime;
        et += c.efficiency * c.livetime;
    }
    corrected_rate(n, t, et / t, coverage)
}
