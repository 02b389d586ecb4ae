use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::poisson::{corrected_rate, RateEstimate};
use crate::error::RatesError;
use crate::jumpfind::JumpEvent;

pub const DEFAULT_WINDOW_S: f64 = 44.0;

/// Inclusive range of jump magnitudes, e.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for MagWindow {
    fn default() -> Self {
        Self { min: 0.1, max: 0.5 }
    }
}

impl MagWindow {
    pub fn contains(&self, dq: f64) -> bool {
        let m = dq.abs();
        m >= self.min && m <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidencePair {
    pub qubit_a: u8,
    pub qubit_b: u8,
    pub t_a: f64,
    pub t_b: f64,
    pub dq_a: f64,
    pub dq_b: f64,
    /// Distance between the two qubits, µm, when positions are known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    /// Positions of the two events in the input list.
    pub index_a: usize,
    pub index_b: usize,
}

impl CoincidencePair {
    pub fn dt(&self) -> f64 {
        self.t_b - self.t_a
    }
}

fn separation(pos: &BTreeMap<u8, [f64; 2]>, a: u8, b: u8) -> Option<f64> {
    let (pa, pb) = (pos.get(&a)?, pos.get(&b)?);
    Some((pa[0] - pb[0]).hypot(pa[1] - pb[1]))
}

/// Cross-qubit pairs within `window` seconds (inclusive) whose magnitudes both
/// fall in `mag`.
///
/// An event pairs with at most one event of each other qubit. Among competing
/// candidates the closest in time wins; ties go to the earlier `t_a`, then the
/// earlier `t_b`, then input order.
pub fn pair_coincidences(
    events: &[JumpEvent],
    window: f64,
    mag: MagWindow,
    positions: &BTreeMap<u8, [f64; 2]>,
) -> Vec<CoincidencePair> {
    let mut by_qubit: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if mag.contains(e.delta_q) && e.time.is_finite() {
            by_qubit.entry(e.qubit_id).or_default().push(i);
        }
    }
    for v in by_qubit.values_mut() {
        v.sort_by(|&x, &y| events[x].time.total_cmp(&events[y].time).then(x.cmp(&y)));
    }
    let qubits: Vec<u8> = by_qubit.keys().copied().collect();
    let mut out = Vec::new();
    for (k, &qa) in qubits.iter().enumerate() {
        for &qb in &qubits[k + 1..] {
            let (la, lb) = (&by_qubit[&qa], &by_qubit[&qb]);
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for &ia in la {
                let ta = events[ia].time;
                // Widen the search by one ulp-scale margin, then apply the exact test.
                let slack = window * 1e-9 + 1e-9;
                let lo = lb.partition_point(|&ib| events[ib].time < ta - window - slack);
                for &ib in &lb[lo..] {
                    let tb = events[ib].time;
                    if tb > ta + window + slack {
                        break;
                    }
                    let dt = (tb - ta).abs();
                    if dt <= window {
                        cand.push((dt, ia, ib));
                    }
                }
            }
            out.extend(greedy(events, cand).into_iter().map(|(ia, ib)| {
                let (a, b) = (&events[ia], &events[ib]);
                CoincidencePair {
                    qubit_a: qa,
                    qubit_b: qb,
                    t_a: a.time,
                    t_b: b.time,
                    dq_a: a.delta_q,
                    dq_b: b.delta_q,
                    separation: separation(positions, qa, qb),
                    index_a: ia,
                    index_b: ib,
                }
            }));
        }
    }
    out.sort_by(|x, y| {
        (x.qubit_a, x.qubit_b)
            .cmp(&(y.qubit_a, y.qubit_b))
            .then(x.t_a.total_cmp(&y.t_a))
            .then(x.t_b.total_cmp(&y.t_b))
    });
    out
}

fn greedy(events: &[JumpEvent], mut cand: Vec<(f64, usize, usize)>) -> Vec<(usize, usize)> {
    cand.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then(events[x.1].time.total_cmp(&events[y.1].time))
            .then(events[x.2].time.total_cmp(&events[y.2].time))
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_a = std::collections::HashSet::new();
    let mut used_b = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (_, ia, ib) in cand {
        if !used_a.contains(&ia) && !used_b.contains(&ib) {
            used_a.insert(ia);
            used_b.insert(ib);
            out.push((ia, ib));
        }
    }
    out
}

/// First-order accidental coincidence rate `2 r_a r_b W`, mHz in and out.
pub fn stochastic_coincidence_rate(r_a: f64, r_b: f64, window: f64) -> f64 {
    2.0 * (r_a * 1e-3) * (r_b * 1e-3) * window * 1e3
}

/// How a pair rate is corrected for detection efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PairEfficiency {
    /// Product of the two single-qubit efficiencies.
    #[default]
    Product,
    /// A dedicated pair efficiency.
    Fixed {
        value: f64,
    },
    Uncorrected,
}

impl PairEfficiency {
    pub fn combine(&self, eff_a: f64, eff_b: f64) -> f64 {
        match *self {
            PairEfficiency::Product => eff_a * eff_b,
            PairEfficiency::Fixed { value } => value,
            PairEfficiency::Uncorrected => 1.0,
        }
    }
}

pub fn pair_rate(
    n_pairs: u64,
    livetime: f64,
    eff_a: f64,
    eff_b: f64,
    mode: PairEfficiency,
    coverage: f64,
) -> Result<RateEstimate, RatesError> {
    for e in [eff_a, eff_b] {
        if !(e > 0.0 && e <= 1.0) {
            return Err(RatesError::BadEfficiency(e));
        }
    }
    corrected_rate(n_pairs, livetime, mode.combine(eff_a, eff_b), coverage)
}
