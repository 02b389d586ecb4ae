//! Physical model of Ramsey charge tomography.
//!
//! During the idle window of an `X/2 - idle - X/2` sequence the qubit
//! accumulates a phase `φ = Δf01 · t_idle · cos(2π n_g)` (in cycles) that
//! depends on the offset charge `n_g`. Sweeping the bias charge maps that
//! phase onto the excited-state probability `P1`, which is what a tomography
//! scan records.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Wraps a charge (in units of e) onto `(-0.5, 0.5]`.
pub fn wrap_charge(q: f64) -> f64 {
    let mut r = q - (q - 0.5).ceil();
    if r <= -0.5 {
        r += 1.0;
    }
    r
}

/// Wraps onto `[0, 1)`.
pub(crate) fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Ramsey phase (cycles) accumulated at offset charge `n_g` for depth `d = Δf01·t_idle`.
pub fn phase_of_offset_charge(n_g: f64, depth: f64) -> f64 {
    depth * (TAU * wrap_charge(n_g)).cos()
}

/// Analytic excitation probability curve.
///
/// `P1 = offset + contrast · cos(2π (φ + detuning))` with `φ` from
/// [`phase_of_offset_charge`]. With `detuning = 0` the curve is even in `φ`
/// and therefore repeats every 0.5e; a quarter-cycle detuning makes the
/// response odd in `φ` and restores the full 1e period with one maximum and
/// one minimum per period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveModel {
    pub contrast: f64,
    pub offset: f64,
    pub depth: f64,
    #[serde(default)]
    pub detuning: f64,
}

impl CurveModel {
    /// Pure cosine response (`detuning = 0`).
    pub fn new(contrast: f64, offset: f64, depth: f64) -> Result<Self, ModelError> {
        Self::with_detuning(contrast, offset, depth, 0.0)
    }

    pub fn with_detuning(
        contrast: f64,
        offset: f64,
        depth: f64,
        detuning: f64,
    ) -> Result<Self, ModelError> {
        let m = Self {
            contrast,
            offset,
            depth,
            detuning,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.contrast.is_finite()
            && self.offset.is_finite()
            && self.depth.is_finite()
            && self.detuning.is_finite()
            && self.contrast >= 0.0
            && self.offset - self.contrast >= -1e-12
            && self.offset + self.contrast <= 1.0 + 1e-12
            && self.depth > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidCurve(format!("{self:?}")))
        }
    }

    pub fn p1(&self, n_g: f64) -> f64 {
        p1_of_offset_charge(n_g, self)
    }
}

impl Default for CurveModel {
    /// Idle time of `1/(4Δf01)` (depth 0.25) with a quarter-cycle detuning.
    fn default() -> Self {
        Self {
            contrast: 0.4,
            offset: 0.5,
            depth: 0.25,
            detuning: -0.25,
        }
    }
}

pub fn p1_of_offset_charge(n_g: f64, model: &CurveModel) -> f64 {
    let phi = phase_of_offset_charge(n_g, model.depth);
    let p = model.offset + model.contrast * (TAU * (phi + model.detuning)).cos();
    p.clamp(0.0, 1.0)
}

/// Static description of one qubit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitConfig {
    pub id: u8,
    /// Transition frequency, GHz.
    pub f01_ghz: f64,
    /// Charge dispersion Δf01, MHz.
    pub dispersion_mhz: f64,
    /// Idle time in seconds; `None` means `1/(4Δf01)`.
    #[serde(default)]
    pub t_idle_s: Option<f64>,
    pub averages_per_point: u32,
    /// Chip coordinate, µm.
    #[serde(default)]
    pub position_um: [f64; 2],
}

impl QubitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.dispersion_mhz > 0.0) {
            return Err(ModelError::InvalidQubit(format!(
                "qubit {}: dispersion must be positive",
                self.id
            )));
        }
        if let Some(t) = self.t_idle_s {
            if !(t > 0.0) {
                return Err(ModelError::InvalidQubit(format!(
                    "qubit {}: idle time must be positive",
                    self.id
                )));
            }
        }
        if self.averages_per_point == 0 {
            return Err(ModelError::InvalidQubit(format!(
                "qubit {}: averages_per_point must be at least 1",
                self.id
            )));
        }
        Ok(())
    }

    pub fn t_idle(&self) -> f64 {
        self.t_idle_s
            .unwrap_or_else(|| 1.0 / (4.0 * self.dispersion_mhz * 1e6))
    }

    /// Phase depth `Δf01 · t_idle` in cycles.
    pub fn depth(&self) -> f64 {
        self.dispersion_mhz * 1e6 * self.t_idle()
    }

    /// The four-qubit chip: frequencies from device characterization,
    /// positions fitted to the measured pair separations.
    pub fn four_qubit_chip() -> Vec<QubitConfig> {
        let f01 = [4.83, 4.71, 4.53, 4.69];
        let disp = [2.6, 3.1, 3.9, 3.4];
        let avg = [200, 238, 239, 302];
        let pos = [[0.0, 0.0], [637.0, 0.0], [738.0, 3143.0], [430.0, 3269.0]];
        (0..4)
            .map(|i| QubitConfig {
                id: i as u8 + 1,
                f01_ghz: f01[i],
                dispersion_mhz: disp[i],
                t_idle_s: None,
                averages_per_point: avg[i],
                position_um: pos[i],
            })
            .collect()
    }
}

/// Timing of one tomographic sweep. Qubits are measured one after the other
/// at every bias value before the bias is stepped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSchedule {
    pub n_bias_points: usize,
    pub points_per_period: usize,
    pub seconds_per_ramsey: f64,
    pub qubit_order: Vec<u8>,
    /// Averages per bias point, parallel to `qubit_order`.
    pub averages_per_point: Vec<u32>,
}

impl Default for ScanSchedule {
    fn default() -> Self {
        Self {
            n_bias_points: 74,
            points_per_period: 37,
            seconds_per_ramsey: 0.0049,
            qubit_order: vec![1, 2, 3, 4],
            averages_per_point: vec![200, 238, 239, 302],
        }
    }
}

impl ScanSchedule {
    pub fn single_qubit(qubit_id: u8, averages: u32) -> Self {
        Self {
            qubit_order: vec![qubit_id],
            averages_per_point: vec![averages],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::InvalidSchedule(m.to_string()));
        if self.n_bias_points == 0 {
            return fail("n_bias_points must be positive");
        }
        if self.points_per_period < 8 {
            return fail("points_per_period must be at least 8");
        }
        if !(self.seconds_per_ramsey > 0.0) {
            return fail("seconds_per_ramsey must be positive");
        }
        if self.qubit_order.is_empty() || self.qubit_order.len() != self.averages_per_point.len() {
            return fail("qubit_order and averages_per_point must be non-empty and equal length");
        }
        if self.averages_per_point.contains(&0) {
            return fail("averages_per_point must be at least 1");
        }
        let mut ids = self.qubit_order.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.qubit_order.len() {
            return fail("qubit_order contains duplicates");
        }
        Ok(())
    }

    fn slot(&self, qubit_id: u8) -> Option<usize> {
        self.qubit_order.iter().position(|&q| q == qubit_id)
    }

    pub fn seconds_per_point(&self, qubit_id: u8) -> Option<f64> {
        self.slot(qubit_id)
            .map(|s| self.averages_per_point[s] as f64 * self.seconds_per_ramsey)
    }

    /// Wall time to visit every qubit once at a single bias value.
    pub fn cycle_seconds(&self) -> f64 {
        self.averages_per_point
            .iter()
            .map(|&a| a as f64 * self.seconds_per_ramsey)
            .sum()
    }

    pub fn scan_duration(&self) -> f64 {
        self.n_bias_points as f64 * self.cycle_seconds()
    }

    pub fn bias_step(&self) -> f64 {
        1.0 / self.points_per_period as f64
    }

    pub fn bias_grid(&self) -> Vec<f64> {
        let ppp = self.points_per_period as f64;
        (0..self.n_bias_points).map(|i| i as f64 / ppp).collect()
    }

    /// End-of-window timestamps for one qubit's points in a scan starting at `start`.
    pub fn timestamps(&self, qubit_id: u8, start: f64) -> Option<Vec<f64>> {
        let slot = self.slot(qubit_id)?;
        let before: f64 = self.averages_per_point[..=slot]
            .iter()
            .map(|&a| a as f64 * self.seconds_per_ramsey)
            .sum();
        let cycle = self.cycle_seconds();
        Some(
            (0..self.n_bias_points)
                .map(|i| start + i as f64 * cycle + before)
                .collect(),
        )
    }
}

/// One averaged measurement: bias charge (e), excitation probability, end time (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64)", into = "(f64, f64, f64)")]
pub struct ScanPoint {
    pub bias: f64,
    pub p1: f64,
    pub time: f64,
}

impl From<(f64, f64, f64)> for ScanPoint {
    fn from((bias, p1, time): (f64, f64, f64)) -> Self {
        Self { bias, p1, time }
    }
}

impl From<ScanPoint> for (f64, f64, f64) {
    fn from(p: ScanPoint) -> Self {
        (p.bias, p.p1, p.time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeScan {
    #[serde(default)]
    pub scan_id: u64,
    pub qubit_id: u8,
    pub start_time: f64,
    pub points: Vec<ScanPoint>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ChargeScan {
    pub fn new(
        scan_id: u64,
        qubit_id: u8,
        start_time: f64,
        points: Vec<ScanPoint>,
    ) -> Result<Self, ModelError> {
        let s = Self {
            scan_id,
            qubit_id,
            start_time,
            points,
            meta: BTreeMap::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidScan(self.scan_id, m));
        if self.points.is_empty() {
            return bad("scan has no points".into());
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.p1) {
                return bad(format!("p1 out of [0,1] at point {i}"));
            }
            if !p.bias.is_finite() || !p.time.is_finite() {
                return bad(format!("non-finite value at point {i}"));
            }
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if w[1].time <= w[0].time {
                return bad(format!("timestamps not increasing at point {}", i + 1));
            }
            if w[1].bias <= w[0].bias {
                return bad(format!("bias grid not monotone at point {}", i + 1));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn biases(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bias).collect()
    }

    pub fn p1(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.p1).collect()
    }

    pub fn end_time(&self) -> f64 {
        self.points.last().map_or(self.start_time, |p| p.time)
    }

    /// Number of bias points per 1e period if the grid is uniform and commensurate.
    pub fn points_per_period(&self) -> Option<usize> {
        uniform_points_per_period(&self.biases())
    }
}

pub(crate) fn uniform_points_per_period(grid: &[f64]) -> Option<usize> {
    if grid.len() < 2 {
        return None;
    }
    let step = grid[1] - grid[0];
    if !(step > 0.0) {
        return None;
    }
    for (i, &b) in grid.iter().enumerate() {
        if (b - (grid[0] + i as f64 * step)).abs() > 1e-6 * step.max(1e-3) {
            return None;
        }
    }
    let ppp = (1.0 / step).round();
    if ppp < 1.0 || (ppp * step - 1.0).abs() > 1e-6 {
        return None;
    }
    Some(ppp as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn phase_examples() {
        assert!(close(phase_of_offset_charge(0.0, 0.25), 0.25));
        assert!(close(phase_of_offset_charge(0.25, 0.25), 0.0));
        assert!(close(phase_of_offset_charge(0.5, 0.25), -0.25));
    }

    #[test]
    fn p1_examples_pure_cosine() {
        let m = CurveModel::new(0.5, 0.5, 0.25).unwrap();
        assert!(close(m.p1(0.25), 1.0));
        assert!(close(m.p1(0.0), 0.5));
    }

    #[test]
    fn wrap_examples() {
        assert!(close(wrap_charge(0.7), -0.3));
        assert_eq!(wrap_charge(-0.5), 0.5);
        assert_eq!(wrap_charge(0.5), 0.5);
        assert!(close(wrap_charge(1.13), 0.13));
        assert_eq!(wrap_charge(0.0), 0.0);
    }

    fn count_extrema(model: &CurveModel, ppp: usize) -> usize {
        let v: Vec<f64> = (0..ppp).map(|i| model.p1(i as f64 / ppp as f64)).collect();
        (0..ppp)
            .filter(|&i| {
                let a = v[(i + ppp - 1) % ppp];
                let b = v[i];
                let c = v[(i + 1) % ppp];
                (b > a && b >= c) || (b < a && b <= c)
            })
            .count()
    }

    #[test]
    fn default_curve_has_two_extrema_per_period() {
        let m = CurveModel::default();
        for ppp in [16, 37, 64, 101] {
            assert_eq!(count_extrema(&m, ppp), 2, "ppp={ppp}");
        }
    }

    #[test]
    fn undetuned_curve_repeats_every_half_period() {
        let m = CurveModel::new(0.4, 0.5, 0.25).unwrap();
        for i in 0..50 {
            let x = i as f64 / 50.0;
            assert!((m.p1(x) - m.p1(x + 0.5)).abs() < 1e-12);
        }
        assert_eq!(count_extrema(&m, 37), 4);
    }

    #[test]
    fn default_curve_distinguishes_half_period_shift() {
        let m = CurveModel::default();
        let diff: f64 = (0..37)
            .map(|i| {
                let x = i as f64 / 37.0;
                (m.p1(x) - m.p1(x + 0.5)).abs()
            })
            .fold(0.0, f64::max);
        assert!(diff > 0.5);
    }

    #[test]
    fn curve_validation() {
        assert!(CurveModel::new(0.6, 0.5, 0.25).is_err());
        assert!(CurveModel::new(0.4, 0.5, 0.0).is_err());
        assert!(CurveModel::new(0.5, 0.5, 0.25).is_ok());
    }

    #[test]
    fn default_idle_time_gives_quarter_cycle_depth() {
        for q in QubitConfig::four_qubit_chip() {
            q.validate().unwrap();
            assert!(close(q.depth(), 0.25));
        }
        let q1 = &QubitConfig::four_qubit_chip()[0];
        assert!((q1.t_idle() - 1.0 / (4.0 * 2.6e6)).abs() < 1e-18);
    }

    #[test]
    fn default_schedule_takes_355_seconds() {
        let s = ScanSchedule::default();
        s.validate().unwrap();
        assert!((s.scan_duration() - 355.0).abs() / 355.0 < 0.01);
        let dwell: f64 = s
            .qubit_order
            .iter()
            .map(|&q| s.seconds_per_point(q).unwrap())
            .sum();
        assert!((s.scan_duration() - s.n_bias_points as f64 * dwell).abs() < 1e-9);
        // Per-qubit dwell spans roughly 0.98 s to 1.48 s.
        assert!((s.seconds_per_point(1).unwrap() - 0.98).abs() < 1e-9);
        assert!((s.seconds_per_point(4).unwrap() - 1.4798).abs() < 1e-9);
    }

    #[test]
    fn timestamps_are_sequential_by_qubit() {
        let s = ScanSchedule::default();
        let t1 = s.timestamps(1, 0.0).unwrap();
        let t4 = s.timestamps(4, 0.0).unwrap();
        assert!(close(t1[0], 0.98));
        assert!(t4[0] > t1[0] && t4[0] < t1[1]);
        assert!((t4[73] - s.scan_duration()).abs() < 1e-9);
        assert!(s.timestamps(9, 0.0).is_none());
    }

    #[test]
    fn schedule_validation() {
        let s = ScanSchedule {
            points_per_period: 7,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let mut s = ScanSchedule::default();
        s.averages_per_point.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn scan_invariants() {
        let pts = vec![
            ScanPoint {
                bias: 0.0,
                p1: 0.2,
                time: 1.0,
            },
            ScanPoint {
                bias: 0.1,
                p1: 0.3,
                time: 2.0,
            },
        ];
        assert!(ChargeScan::new(0, 1, 0.0, pts.clone()).is_ok());
        let mut bad = pts.clone();
        bad[1].time = 1.0;
        assert!(ChargeScan::new(0, 1, 0.0, bad).is_err());
        let mut bad = pts.clone();
        bad[1].p1 = 1.2;
        assert!(ChargeScan::new(0, 1, 0.0, bad).is_err());
        let mut bad = pts;
        bad[1].bias = -0.1;
        assert!(ChargeScan::new(0, 1, 0.0, bad).is_err());
    }

    #[test]
    fn grid_period_detection() {
        let s = ScanSchedule::default();
        assert_eq!(uniform_points_per_period(&s.bias_grid()), Some(37));
        assert_eq!(uniform_points_per_period(&[0.0, 0.3, 0.6]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn phase_is_periodic(n in -5.0f64..5.0, k in -100i32..100, d in 0.01f64..1.0) {
            let a = phase_of_offset_charge(n, d);
            let b = phase_of_offset_charge(n + k as f64, d);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - phase_of_offset_charge(-n, d)).abs() < 1e-12);
        }

        #[test]
        fn wrap_is_idempotent_and_congruent(q in -1e3f64..1e3) {
            let w = wrap_charge(q);
            prop_assert!(w > -0.5 && w <= 0.5);
            prop_assert_eq!(wrap_charge(w), w);
            let k = q - w;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }

        #[test]
        fn p1_stays_in_unit_interval(
            a in 0.0f64..0.5, b in 0.0f64..1.0, d in 0.01f64..2.0,
            det in -1.0f64..1.0, n in -3.0f64..3.0,
        ) {
            let b = b.clamp(a, 1.0 - a);
            let m = CurveModel::with_detuning(a, b, d, det).unwrap();
            let p = m.p1(n);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p >= b - a - 1e-12 && p <= b + a + 1e-12);
        }
    }
}
