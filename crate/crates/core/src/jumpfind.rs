//! Rolling reduced-χ² charge-jump finder.
//!
//! For a segment of `n` points the statistic
//!
//! ```text
//! χ²_n(θ) = (1/n) Σ_i (x_i − x̂_i(θ))² / σ̂_i²(θ)
//! ```
//!
//! is minimized over the template phase `θ` for every prefix length `n`.
//! Once the minimum crosses the per-qubit threshold the current point starts
//! a new segment, and the jump is the wrapped difference between the best-fit
//! phases of the two segments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DetectError;
use crate::model::{uniform_points_per_period, wrap_charge, ChargeScan, ScanPoint};
use crate::template::Template;

/// Phase search resolution: one tenth of a 37-point bias step.
pub const DEFAULT_THETA_STEP: f64 = 1.0 / 370.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub chi2_threshold: f64,
    /// Phase search step, e.
    pub theta_step: f64,
    /// Events before this point index are flagged as low confidence.
    pub warmup_points: usize,
    pub min_jump: f64,
    pub max_jump: f64,
    /// Shortest prefix (including the trigger point) at which a trigger is honored.
    pub min_segment_points: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            chi2_threshold: 4.0,
            theta_step: DEFAULT_THETA_STEP,
            warmup_points: 20,
            min_jump: 0.1,
            max_jump: 0.5,
            min_segment_points: 3,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::InvalidConfig(m.into()));
        if !(self.chi2_threshold > 1.0) {
            return bad("chi2_threshold must exceed 1");
        }
        if !(self.theta_step > 0.0 && self.theta_step <= 0.03) {
            return bad("theta_step must lie in (0, 0.03]");
        }
        if !(self.min_jump > 0.0 && self.min_jump < self.max_jump && self.max_jump <= 0.5) {
            return bad("need 0 < min_jump < max_jump <= 0.5");
        }
        if self.min_segment_points < 2 {
            return bad("min_segment_points must be at least 2");
        }
        Ok(())
    }
}

/// Best fit of one segment (or prefix).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFit {
    pub start_index: usize,
    pub end_index: usize,
    pub theta_min: f64,
    pub chi2_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpFlag {
    /// Triggered inside the warm-up region at the start of a scan.
    Warmup,
    BelowMin,
    AboveMax,
    /// The segment after the trigger is cut short by another trigger
    /// (fewer than `min_segment_points`), or is a single trailing point.
    ShortSegment,
}

impl JumpFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            JumpFlag::Warmup => "warmup",
            JumpFlag::BelowMin => "below_min",
            JumpFlag::AboveMax => "above_max",
            JumpFlag::ShortSegment => "short_segment",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "warmup" => Some(JumpFlag::Warmup),
            "below_min" => Some(JumpFlag::BelowMin),
            "above_max" => Some(JumpFlag::AboveMax),
            "short_segment" => Some(JumpFlag::ShortSegment),
            _ => None,
        }
    }
}

impl fmt::Display for JumpFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub scan_id: u64,
    pub qubit_id: u8,
    /// Timestamp of the first over-threshold point, s.
    pub time: f64,
    /// Signed wrapped jump, e.
    pub delta_q: f64,
    pub theta_before: f64,
    pub theta_after: f64,
    pub point_index: usize,
    pub chi2_at_trigger: f64,
    #[serde(default)]
    pub flags: Vec<JumpFlag>,
}

impl JumpEvent {
    pub fn magnitude(&self) -> f64 {
        self.delta_q.abs()
    }

    pub fn has(&self, flag: JumpFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// Counts toward rates: magnitude inside the reporting window and a
    /// well-determined phase on both sides.
    pub fn is_reportable(&self) -> bool {
        !self.has(JumpFlag::BelowMin)
            && !self.has(JumpFlag::AboveMax)
            && !self.has(JumpFlag::ShortSegment)
    }
}

pub fn jump_magnitude(theta_before: f64, theta_after: f64) -> f64 {
    wrap_charge(theta_after - theta_before)
}

/// Phases `k/M` on `(-0.5, 0.5]`.
fn theta_grid(step: f64) -> Vec<f64> {
    let m = (1.0 / step).round().max(2.0) as i64;
    let lo = -(m / 2) + if m % 2 == 0 { 1 } else { 0 };
    let hi = m / 2;
    (lo..=hi).map(|k| k as f64 / m as f64).collect()
}

/// Template predictions for every search phase on a fixed bias grid,
/// stored point-major so one point updates all phases contiguously.
#[derive(Debug, Clone)]
struct PhaseTable {
    thetas: Vec<f64>,
    pred: Vec<f64>,
    inv_var: Vec<f64>,
}

impl PhaseTable {
    fn new(template: &Template, grid: &[f64], step: f64) -> Self {
        let thetas = theta_grid(step);
        let m = thetas.len();
        let mut pred = vec![0.0; m * grid.len()];
        let mut inv_var = vec![0.0; m * grid.len()];
        for (j, &th) in thetas.iter().enumerate() {
            for (i, &g) in grid.iter().enumerate() {
                let (x, s) = template.eval(g + th);
                pred[i * m + j] = x;
                inv_var[i * m + j] = 1.0 / (s * s);
            }
        }
        Self {
            thetas,
            pred,
            inv_var,
        }
    }

    fn accumulate(&self, index: usize, x: f64, from: &[f64], into: &mut [f64]) {
        let m = self.thetas.len();
        let pred = &self.pred[index * m..(index + 1) * m];
        let w = &self.inv_var[index * m..(index + 1) * m];
        for j in 0..m {
            let r = x - pred[j];
            into[j] = from[j] + r * r * w[j];
        }
    }

    /// Index of the smallest sum, ties toward the smallest |θ|.
    fn argmin(&self, sums: &[f64]) -> usize {
        let mut best = 0;
        for j in 1..sums.len() {
            if sums[j] < sums[best]
                || (sums[j] == sums[best] && self.thetas[j].abs() < self.thetas[best].abs())
            {
                best = j;
            }
        }
        best
    }
}

fn chi2_at(template: &Template, points: &[ScanPoint], theta: f64) -> f64 {
    let s: f64 = points
        .iter()
        .map(|p| {
            let (x, sig) = template.eval(p.bias + theta);
            let r = p.p1 - x;
            r * r / (sig * sig)
        })
        .sum();
    s / points.len() as f64
}

/// Parabolic refinement around the best grid phase; kept only if it lowers χ².
fn refine(
    table: &PhaseTable,
    sums: &[f64],
    best: usize,
    template: &Template,
    points: &[ScanPoint],
) -> (f64, f64) {
    let m = sums.len();
    let n = points.len() as f64;
    let grid_theta = table.thetas[best];
    let grid_chi2 = sums[best] / n;
    let a = sums[(best + m - 1) % m];
    let b = sums[best];
    let c = sums[(best + 1) % m];
    let curv = a - 2.0 * b + c;
    if !(curv > 0.0) {
        return (grid_theta, grid_chi2);
    }
    let step = 1.0 / m as f64;
    let shift = (0.5 * (a - c) / curv).clamp(-0.5, 0.5) * step;
    if shift == 0.0 {
        return (grid_theta, grid_chi2);
    }
    let theta = wrap_charge(grid_theta + shift);
    let chi2 = chi2_at(template, points, theta);
    if chi2 < grid_chi2 {
        (theta, chi2)
    } else {
        (grid_theta, grid_chi2)
    }
}

pub(crate) fn best_fit_phase_with_step(
    points: &[ScanPoint],
    template: &Template,
    step: f64,
) -> Result<SegmentFit, DetectError> {
    if points.is_empty() {
        return Err(DetectError::EmptySegment);
    }
    let grid: Vec<f64> = points.iter().map(|p| p.bias).collect();
    let table = PhaseTable::new(template, &grid, step);
    let mut sums = vec![0.0; table.thetas.len()];
    let mut next = sums.clone();
    for (i, p) in points.iter().enumerate() {
        table.accumulate(i, p.p1, &sums, &mut next);
        std::mem::swap(&mut sums, &mut next);
    }
    let best = table.argmin(&sums);
    let (theta_min, chi2_min) = refine(&table, &sums, best, template, points);
    Ok(SegmentFit {
        start_index: 0,
        end_index: points.len() - 1,
        theta_min,
        chi2_min,
    })
}

/// Phase minimizing the reduced χ² of `points` against `template`.
pub fn best_fit_phase(
    points: &[ScanPoint],
    template: &Template,
) -> Result<SegmentFit, DetectError> {
    best_fit_phase_with_step(points, template, DEFAULT_THETA_STEP)
}

/// Events plus the per-prefix fit trajectory of every segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub events: Vec<JumpEvent>,
    pub trajectories: Vec<Vec<SegmentFit>>,
    /// Final fit of each segment.
    pub segments: Vec<SegmentFit>,
}

/// A jump finder bound to one template and one bias grid.
#[derive(Debug, Clone)]
pub struct ScanDetector<'a> {
    template: &'a Template,
    cfg: DetectionConfig,
    grid: Vec<f64>,
    table: PhaseTable,
}

impl<'a> ScanDetector<'a> {
    pub fn new(
        template: &'a Template,
        grid: &[f64],
        cfg: &DetectionConfig,
    ) -> Result<Self, DetectError> {
        cfg.validate()?;
        check_grid(template, grid)?;
        Ok(Self {
            template,
            cfg: cfg.clone(),
            grid: grid.to_vec(),
            table: PhaseTable::new(template, grid, cfg.theta_step),
        })
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.cfg
    }

    pub fn template(&self) -> &Template {
        self.template
    }

    pub fn detect(&self, scan: &ChargeScan) -> Result<Detection, DetectError> {
        if scan.qubit_id != self.template.qubit_id {
            return Err(DetectError::TemplateMissing(scan.qubit_id));
        }
        let same_grid = scan.len() == self.grid.len()
            && scan
                .points
                .iter()
                .zip(&self.grid)
                .all(|(p, g)| (p.bias - g).abs() < 1e-9);
        if same_grid {
            Ok(self.run(scan, &self.table))
        } else {
            check_grid(self.template, &scan.biases())?;
            let table = PhaseTable::new(self.template, &scan.biases(), self.cfg.theta_step);
            Ok(self.run(scan, &table))
        }
    }

    fn close_segment(
        &self,
        table: &PhaseTable,
        sums: &[f64],
        scan: &ChargeScan,
        start: usize,
        end: usize,
    ) -> SegmentFit {
        let best = table.argmin(sums);
        let (theta_min, chi2_min) =
            refine(table, sums, best, self.template, &scan.points[start..=end]);
        SegmentFit {
            start_index: start,
            end_index: end,
            theta_min,
            chi2_min,
        }
    }

    fn run(&self, scan: &ChargeScan, table: &PhaseTable) -> Detection {
        let cfg = &self.cfg;
        let m = table.thetas.len();
        let mut sums = vec![0.0; m];
        let mut next = vec![0.0; m];
        let zeros = vec![0.0; m];
        let mut start = 0usize;
        let mut trajectory = Vec::new();
        let mut trajectories = Vec::new();
        let mut segments: Vec<SegmentFit> = Vec::new();
        // (trigger index, χ² at trigger)
        let mut triggers: Vec<(usize, f64)> = Vec::new();

        for (i, p) in scan.points.iter().enumerate() {
            table.accumulate(i, p.p1, &sums, &mut next);
            let n = i - start + 1;
            let best = table.argmin(&next);
            let chi2 = next[best] / n as f64;
            if n >= cfg.min_segment_points && chi2 > cfg.chi2_threshold {
                segments.push(self.close_segment(table, &sums, scan, start, i - 1));
                trajectories.push(std::mem::take(&mut trajectory));
                triggers.push((i, chi2));
                start = i;
                table.accumulate(i, p.p1, &zeros, &mut sums);
                let best = table.argmin(&sums);
                trajectory.push(SegmentFit {
                    start_index: i,
                    end_index: i,
                    theta_min: table.thetas[best],
                    chi2_min: sums[best],
                });
            } else {
                std::mem::swap(&mut sums, &mut next);
                trajectory.push(SegmentFit {
                    start_index: start,
                    end_index: i,
                    theta_min: table.thetas[best],
                    chi2_min: chi2,
                });
            }
        }
        if !scan.points.is_empty() {
            segments.push(self.close_segment(table, &sums, scan, start, scan.len() - 1));
            trajectories.push(trajectory);
        }

        let events = triggers
            .iter()
            .enumerate()
            .map(|(k, &(index, chi2))| {
                let before = &segments[k];
                let after = &segments[k + 1];
                let delta_q = jump_magnitude(before.theta_min, after.theta_min);
                let mut flags = Vec::new();
                if index < cfg.warmup_points {
                    flags.push(JumpFlag::Warmup);
                }
                if delta_q.abs() < cfg.min_jump {
                    flags.push(JumpFlag::BelowMin);
                }
                if delta_q.abs() > cfg.max_jump {
                    flags.push(JumpFlag::AboveMax);
                }
                // A trailing segment is cut by the end of the scan, not by
                // another trigger; two points still pin its phase.
                let len = after.end_index + 1 - after.start_index;
                let interrupted = k + 1 < triggers.len();
                if len < 2 || (interrupted && len < cfg.min_segment_points) {
                    flags.push(JumpFlag::ShortSegment);
                }
                JumpEvent {
                    scan_id: scan.scan_id,
                    qubit_id: scan.qubit_id,
                    time: scan.points[index].time,
                    delta_q,
                    theta_before: before.theta_min,
                    theta_after: after.theta_min,
                    point_index: index,
                    chi2_at_trigger: chi2,
                    flags,
                }
            })
            .collect();

        Detection {
            events,
            trajectories,
            segments,
        }
    }
}

fn check_grid(template: &Template, grid: &[f64]) -> Result<(), DetectError> {
    let ppp = template.points_per_period();
    if grid.len() == 1 {
        return Ok(());
    }
    match uniform_points_per_period(grid) {
        Some(p) if p == ppp => Ok(()),
        Some(p) => Err(DetectError::GridMismatch(format!(
            "scan has {p} points per period, template has {ppp}"
        ))),
        None => Err(DetectError::GridMismatch(
            "scan bias grid is not uniform over whole periods".into(),
        )),
    }
}

/// Per-prefix best fits of every segment of `scan`.
pub fn rolling_chi2_scan(
    scan: &ChargeScan,
    template: &Template,
    cfg: &DetectionConfig,
) -> Result<Vec<Vec<SegmentFit>>, DetectError> {
    let det = ScanDetector::new(template, &scan.biases(), cfg)?;
    Ok(det.detect(scan)?.trajectories)
}

pub fn find_jumps(
    scan: &ChargeScan,
    template: &Template,
    cfg: &DetectionConfig,
) -> Result<Vec<JumpEvent>, DetectError> {
    let det = ScanDetector::new(template, &scan.biases(), cfg)?;
    Ok(det.detect(scan)?.events)
}
