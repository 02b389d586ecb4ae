use serde::{Deserialize, Serialize};

use crate::error::RatesError;

/// Binned energy spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumHistogram {
    /// keV, one more entry than `counts`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Hours.
    pub livetime: f64,
    pub tag: String,
}

impl SpectrumHistogram {
    pub fn new(
        bin_edges: Vec<f64>,
        counts: Vec<u64>,
        livetime: f64,
        tag: impl Into<String>,
    ) -> Result<Self, RatesError> {
        let h = Self {
            bin_edges,
            counts,
            livetime,
            tag: tag.into(),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), RatesError> {
        if self.bin_edges.len() != self.counts.len() + 1 || self.counts.is_empty() {
            return Err(RatesError::InvalidSpectrum(
                "need one more edge than bins".into(),
            ));
        }
        if self.bin_edges.iter().any(|e| !e.is_finite())
            || self.bin_edges.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(RatesError::InvalidSpectrum(
                "bin edges must be finite and strictly increasing".into(),
            ));
        }
        if !(self.livetime > 0.0) {
            return Err(RatesError::BadLivetime(self.livetime));
        }
        Ok(())
    }

    /// Counts in bins whose lower edge is at or above `threshold`.
    pub fn counts_above(&self, threshold: f64) -> u64 {
        self.bin_edges
            .iter()
            .zip(&self.counts)
            .filter(|(lo, _)| **lo >= threshold)
            .map(|(_, c)| c)
            .sum()
    }

    /// Merges every `k` adjacent bins starting from the first; a short tail
    /// becomes one bin.
    pub fn merged(&self, k: usize) -> Self {
        let k = k.max(1);
        let mut edges = vec![self.bin_edges[0]];
        let mut counts = Vec::new();
        for (i, chunk) in self.counts.chunks(k).enumerate() {
            counts.push(chunk.iter().sum());
            edges.push(self.bin_edges[(i * k + chunk.len()).min(self.counts.len())]);
        }
        Self {
            bin_edges: edges,
            counts,
            livetime: self.livetime,
            tag: self.tag.clone(),
        }
    }
}

/// Ratio of livetime-normalized integrals with its propagated error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxRatio {
    pub ratio: f64,
    pub sigma: f64,
    pub n_so: u64,
    pub n_sc: u64,
    pub threshold: f64,
}

/// Livetime-normalized counts above `threshold` keV, SO over SC.
///
/// The error is `ratio × √(1/N_so + 1/N_sc)`.
pub fn lmo_flux_ratio(
    so: &SpectrumHistogram,
    sc: &SpectrumHistogram,
    threshold: f64,
) -> Result<FluxRatio, RatesError> {
    so.validate()?;
    sc.validate()?;
    if so.bin_edges != sc.bin_edges {
        return Err(RatesError::BinningMismatch);
    }
    let n_so = so.counts_above(threshold);
    let n_sc = sc.counts_above(threshold);
    if n_so == 0 || n_sc == 0 {
        return Err(RatesError::EmptyAboveThreshold(threshold));
    }
    let ratio = (n_so as f64 / so.livetime) / (n_sc as f64 / sc.livetime);
    let sigma = ratio * (1.0 / n_so as f64 + 1.0 / n_sc as f64).sqrt();
    Ok(FluxRatio {
        ratio,
        sigma,
        n_so,
        n_sc,
        threshold,
    })
}
