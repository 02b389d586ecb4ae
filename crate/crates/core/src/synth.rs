//! Synthetic scans, jump injection and the detection-efficiency Monte Carlo.
//!
//! Every stochastic draw comes from a ChaCha8 stream keyed by `(seed, scan
//! index)`, so scans can be produced in any order or in parallel and still
//! come out bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, SynthError};
use crate::jumpfind::{DetectionConfig, JumpEvent, ScanDetector};
use crate::model::{wrap_charge, ChargeScan, CurveModel, ScanPoint, ScanSchedule};
use crate::template::Template;

/// Additive readout noise on `P1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-point standard deviation, probability units.
    pub sigma_p1: f64,
    pub seed: u64,
    /// Lag-one correlation of successive points. 0 gives white noise.
    pub ar1: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_p1: 0.0,
            seed: 0,
            ar1: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn white(sigma_p1: f64, seed: u64) -> Self {
        Self {
            sigma_p1,
            seed,
            ar1: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma_p1 >= 0.0) || !self.sigma_p1.is_finite() {
            return Err(SynthError::ConfigInvalid("sigma_p1 must be >= 0".into()));
        }
        if !(self.ar1 > -1.0 && self.ar1 < 1.0) {
            return Err(SynthError::ConfigInvalid("ar1 must lie in (-1, 1)".into()));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        if self.sigma_p1 == 0.0 {
            return vec![0.0; n];
        }
        let z = Normal::new(0.0, 1.0).expect("unit normal");
        let innov = (1.0 - self.ar1 * self.ar1).sqrt();
        let mut prev = 0.0;
        (0..n)
            .map(|i| {
                let e = z.sample(rng);
                prev = if i == 0 {
                    e
                } else {
                    self.ar1 * prev + innov * e
                };
                self.sigma_p1 * prev
            })
            .collect()
    }
}

/// Distribution of injected jump magnitudes. Signs are always ± with equal odds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SizeLaw {
    Uniform { min: f64, max: f64 },
    Fixed { size: f64 },
}

impl Default for SizeLaw {
    fn default() -> Self {
        SizeLaw::Uniform {
            min: 0.01,
            max: 0.5,
        }
    }
}

impl SizeLaw {
    fn support(&self) -> (f64, f64) {
        match *self {
            SizeLaw::Uniform { min, max } => (min, max),
            SizeLaw::Fixed { size } => (size, size),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            SizeLaw::Uniform { min, max } if max > min => rng.random_range(min..=max),
            SizeLaw::Uniform { min, .. } => min,
            SizeLaw::Fixed { size } => size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionPlan {
    /// Jump rate, mHz.
    pub rate_mhz: f64,
    pub size_law: SizeLaw,
    pub n_scans: usize,
    pub seed: u64,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self {
            rate_mhz: 1.1,
            size_law: SizeLaw::default(),
            n_scans: 1600,
            seed: 1,
        }
    }
}

impl InjectionPlan {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.into()));
        if !(self.rate_mhz > 0.0) || !self.rate_mhz.is_finite() {
            return bad("injection rate must be positive");
        }
        let (lo, hi) = self.size_law.support();
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("jump sizes must lie in (0, 0.5]");
        }
        Ok(())
    }
}

/// Where the clean curve comes from.
#[derive(Debug, Clone, Copy)]
pub enum CurveSource<'a> {
    Template(&'a Template),
    Model(&'a CurveModel),
}

impl CurveSource<'_> {
    fn p1(&self, u: f64) -> f64 {
        match self {
            CurveSource::Template(t) => t.eval(u).0,
            CurveSource::Model(m) => m.p1(u),
        }
    }
}

/// One ground-truth jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedJump {
    /// Epoch seconds.
    pub time: f64,
    /// First point measured after the jump. Equal to the scan length when the
    /// jump falls after the last point.
    pub index: usize,
    /// Signed size, e.
    pub delta_q: f64,
}

impl InjectedJump {
    /// A discontinuity exists only between two measured points.
    pub fn observable(&self, n_points: usize) -> bool {
        self.index > 0 && self.index < n_points
    }
}

/// A scan together with what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScan {
    pub scan: ChargeScan,
    /// True phase at every point (unwrapped sum of injected steps).
    pub phase_track: Vec<f64>,
    pub noise: Vec<f64>,
    pub injections: Vec<InjectedJump>,
}

impl SyntheticScan {
    /// Point indices where the true phase changes.
    pub fn discontinuities(&self) -> Vec<usize> {
        self.phase_track
            .windows(2)
            .enumerate()
            .filter(|(_, w)| (w[1] - w[0]).abs() > 1e-12)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

const NOISE_STREAM: u64 = 0;
const JUMP_STREAM: u64 = 1;
const PHASE_STREAM: u64 = 2;

fn stream(seed: u64, scan_index: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scan_index.wrapping_mul(4).wrapping_add(which));
    rng
}

fn render(
    source: CurveSource<'_>,
    grid: &[f64],
    phase: &[f64],
    noise: &[f64],
    times: &[f64],
) -> Vec<ScanPoint> {
    grid.iter()
        .zip(phase)
        .zip(noise)
        .zip(times)
        .map(|(((&b, &th), &e), &time)| ScanPoint {
            bias: b,
            p1: (source.p1(b + th) + e).clamp(0.0, 1.0),
            time,
        })
        .collect()
}

fn scan_times(schedule: &ScanSchedule, qubit_id: u8, start: f64) -> Result<Vec<f64>, ModelError> {
    schedule.validate()?;
    schedule.timestamps(qubit_id, start).ok_or_else(|| {
        ModelError::InvalidSchedule(format!("qubit {qubit_id} is not in the schedule"))
    })
}

/// Samples the curve at phase `true_theta` on the schedule's bias grid and adds noise.
///
/// The scan is number `scan_index` of a run; it starts at
/// `scan_index × scan_duration` and draws noise from the matching stream.
pub fn generate_scan(
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    qubit_id: u8,
    noise: &NoiseModel,
    true_theta: f64,
    scan_index: u64,
) -> Result<SyntheticScan, SynthError> {
    noise.validate()?;
    let start = scan_index as f64 * schedule.scan_duration();
    let times = scan_times(schedule, qubit_id, start)?;
    let grid = schedule.bias_grid();
    let e = noise.draw(
        &mut stream(noise.seed, scan_index, NOISE_STREAM),
        grid.len(),
    );
    let phase = vec![true_theta; grid.len()];
    let points = render(source, &grid, &phase, &e, &times);
    let mut scan = ChargeScan::new(scan_index, qubit_id, start, points)?;
    scan.meta.insert("synthetic".into(), "true".into());
    scan.meta.insert(
        crate::io::META_DURATION.into(),
        schedule.scan_duration().to_string(),
    );
    Ok(SyntheticScan {
        scan,
        phase_track: phase,
        noise: e,
        injections: Vec::new(),
    })
}

/// Draws jumps as a Poisson process over the scan window and shifts the true
/// phase of every later point. The noise realization is kept.
pub fn inject_jumps(
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    synthetic: &SyntheticScan,
    plan: &InjectionPlan,
) -> Result<SyntheticScan, SynthError> {
    plan.validate()?;
    let scan = &synthetic.scan;
    let mut rng = stream(plan.seed, scan.scan_id, JUMP_STREAM);
    let rate_hz = plan.rate_mhz * 1e-3;
    let wait = Exp::new(rate_hz).map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
    let duration = schedule.scan_duration();
    let mut jumps = Vec::new();
    let mut t = wait.sample(&mut rng);
    while t < duration {
        let size = plan.size_law.sample(&mut rng);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        jumps.push((scan.start_time + t, sign * size));
        t += wait.sample(&mut rng);
    }
    Ok(apply_jumps(source, synthetic, &jumps))
}

/// Adds jumps given as `(time, Δq)` to a synthetic scan: every point measured
/// after `time` has its true phase shifted by `Δq`. The noise realization is kept.
pub fn apply_jumps(
    source: CurveSource<'_>,
    synthetic: &SyntheticScan,
    jumps: &[(f64, f64)],
) -> SyntheticScan {
    let scan = &synthetic.scan;
    let injections: Vec<InjectedJump> = jumps
        .iter()
        .map(|&(time, delta_q)| InjectedJump {
            time,
            index: scan.points.partition_point(|p| p.time <= time),
            delta_q,
        })
        .collect();
    let mut phase = synthetic.phase_track.clone();
    for j in &injections {
        for th in &mut phase[j.index..] {
            *th += j.delta_q;
        }
    }
    let times: Vec<f64> = scan.points.iter().map(|p| p.time).collect();
    let points = render(source, &scan.biases(), &phase, &synthetic.noise, &times);
    let mut out = scan.clone();
    out.points = points;
    let mut all = synthetic.injections.clone();
    all.extend(injections);
    SyntheticScan {
        scan: out,
        phase_track: phase,
        noise: synthetic.noise.clone(),
        injections: all,
    }
}

/// Uniform random starting phase for scan `scan_index`.
pub fn random_phase(seed: u64, scan_index: u64) -> f64 {
    let u: f64 = stream(seed, scan_index, PHASE_STREAM).random();
    wrap_charge(u - 0.5)
}

/// Matching tolerances between detections and injections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWindow {
    pub index_tolerance: usize,
    pub dq_tolerance: f64,
    /// Efficiency is quoted for injections with magnitude in this range.
    pub size_min: f64,
    pub size_max: f64,
}

impl Default for MatchWindow {
    fn default() -> Self {
        Self {
            index_tolerance: 2,
            dq_tolerance: 0.05,
            size_min: 0.1,
            size_max: 0.5,
        }
    }
}

impl MatchWindow {
    fn counts(&self, dq: f64) -> bool {
        let m = dq.abs();
        m >= self.size_min - 1e-12 && m <= self.size_max + 1e-12
    }
}

/// Ground truth of one injection after detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scan_id: u64,
    pub index: usize,
    pub delta_q_injected: f64,
    pub matched: bool,
    pub delta_q_detected: Option<f64>,
}

/// Pairs injections with reportable detections, one to one.
///
/// Candidates are ranked by index distance, then charge distance, then
/// position, so the outcome does not depend on iteration order.
pub fn match_detections(
    injections: &[InjectedJump],
    events: &[JumpEvent],
    window: &MatchWindow,
) -> Vec<Option<usize>> {
    let mut cand = Vec::new();
    for (i, inj) in injections.iter().enumerate() {
        for (k, ev) in events.iter().enumerate() {
            if !ev.is_reportable() {
                continue;
            }
            let di = inj.index.abs_diff(ev.point_index);
            let dq = wrap_charge(ev.delta_q - inj.delta_q).abs();
            if di <= window.index_tolerance && dq <= window.dq_tolerance + 1e-12 {
                cand.push((di, dq, i, k));
            }
        }
    }
    cand.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut inj_match = vec![None; injections.len()];
    let mut used = vec![false; events.len()];
    for (_, _, i, k) in cand {
        if inj_match[i].is_none() && !used[k] {
            inj_match[i] = Some(k);
            used[k] = true;
        }
    }
    inj_match
}

/// Efficiency in one injected-size bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    pub lo: f64,
    pub hi: f64,
    pub n_injected: usize,
    pub n_found: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub qubit_id: u8,
    pub efficiency: f64,
    /// Spread of the efficiency over replica sets, scaled to the full run.
    pub sys_spread: f64,
    /// Standard deviation of the per-set efficiencies themselves.
    pub replica_std: f64,
    /// Spread of the efficiency across size bins inside the quoted range,
    /// with the binomial sampling part removed.
    pub size_spread: f64,
    pub n_injected: usize,
    pub n_found: usize,
    pub config_tag: String,
    pub n_scans: usize,
    pub sigma_p1: f64,
    pub chi2_threshold: f64,
    /// Mean of detected minus injected Δq over matched injections, e.
    pub mean_dq_error: f64,
    /// Reportable detections with |Δq| ≥ min_jump that match no injection.
    pub n_unmatched_detections: usize,
    pub size_bins: Vec<SizeBin>,
}

/// Report plus per-injection truth.
#[derive(Debug, Clone, PartialEq)]
pub struct McOutcome {
    pub report: EfficiencyReport,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McOptions {
    pub window: MatchWindow,
    pub n_size_bins: usize,
    pub n_replica_sets: usize,
    pub config_tag: String,
    /// Seed for the per-scan starting phase.
    pub phase_seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            window: MatchWindow::default(),
            n_size_bins: 15,
            n_replica_sets: 75,
            config_tag: "default".into(),
            phase_seed: 7,
        }
    }
}

struct ScanOutcome {
    truth: Vec<TruthRecord>,
    unmatched: usize,
}

fn simulate_one(
    detector: &ScanDetector<'_>,
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    noise: &NoiseModel,
    plan: &InjectionPlan,
    opts: &McOptions,
    index: u64,
) -> Result<ScanOutcome, SynthError> {
    let qubit = detector.template().qubit_id;
    let theta = random_phase(opts.phase_seed, index);
    let clean = generate_scan(source, schedule, qubit, noise, theta, index)?;
    let s = inject_jumps(source, schedule, &clean, plan)?;
    let det = detector.detect(&s.scan)?;
    let m = match_detections(&s.injections, &det.events, &opts.window);
    let used: Vec<usize> = m.iter().flatten().copied().collect();
    let min_jump = detector.config().min_jump;
    let unmatched = det
        .events
        .iter()
        .enumerate()
        .filter(|(k, e)| e.is_reportable() && e.magnitude() >= min_jump && !used.contains(k))
        .count();
    let truth = s
        .injections
        .iter()
        .zip(m)
        .map(|(inj, k)| TruthRecord {
            scan_id: s.scan.scan_id,
            index: inj.index,
            delta_q_injected: inj.delta_q,
            matched: k.is_some(),
            delta_q_detected: k.map(|k| det.events[k].delta_q),
        })
        .collect();
    Ok(ScanOutcome { truth, unmatched })
}

/// Simulates `plan.n_scans` independent scans, injects jumps, runs the
/// detector and scores it against the truth.
pub fn run_efficiency_mc(
    template: &Template,
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    noise: &NoiseModel,
    plan: &InjectionPlan,
    cfg: &DetectionConfig,
    opts: &McOptions,
) -> Result<McOutcome, SynthError> {
    noise.validate()?;
    plan.validate()?;
    schedule.validate()?;
    if plan.n_scans == 0 || opts.n_size_bins == 0 || opts.n_replica_sets == 0 {
        return Err(SynthError::ConfigInvalid(
            "n_scans, n_size_bins and n_replica_sets must be positive".into(),
        ));
    }
    let grid = schedule.bias_grid();
    let detector = ScanDetector::new(template, &grid, cfg)?;
    let outcomes: Vec<ScanOutcome> = (0..plan.n_scans as u64)
        .into_par_iter()
        .map(|i| simulate_one(&detector, source, schedule, noise, plan, opts, i))
        .collect::<Result<_, _>>()?;

    let set_size = ((plan.n_scans as f64 / opts.n_replica_sets as f64).round() as usize).max(1);
    let (lo, hi) = plan.size_law.support();
    let width = (hi - lo) / opts.n_size_bins as f64;
    let mut bins: Vec<SizeBin> = (0..opts.n_size_bins)
        .map(|b| SizeBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            n_injected: 0,
            n_found: 0,
        })
        .collect();
    let mut sets = vec![(0usize, 0usize); opts.n_replica_sets];
    let (mut n_inj, mut n_found, mut unmatched) = (0, 0, 0);
    let mut dq_err = 0.0;
    for (i, o) in outcomes.iter().enumerate() {
        unmatched += o.unmatched;
        let set = (i / set_size).min(opts.n_replica_sets - 1);
        for t in &o.truth {
            let mag = t.delta_q_injected.abs();
            if width > 0.0 {
                let b = (((mag - lo) / width) as usize).min(opts.n_size_bins - 1);
                bins[b].n_injected += 1;
                bins[b].n_found += t.matched as usize;
            } else {
                bins[0].n_injected += 1;
                bins[0].n_found += t.matched as usize;
            }
            if !opts.window.counts(t.delta_q_injected) {
                continue;
            }
            n_inj += 1;
            sets[set].0 += 1;
            if let Some(d) = t.delta_q_detected {
                n_found += 1;
                sets[set].1 += 1;
                dq_err += wrap_charge(d - t.delta_q_injected);
            }
        }
    }
    let efficiency = if n_inj > 0 {
        n_found as f64 / n_inj as f64
    } else {
        0.0
    };
    let per_set: Vec<f64> = sets
        .iter()
        .filter(|s| s.0 > 0)
        .map(|&(n, f)| f as f64 / n as f64)
        .collect();
    let replica_std = sample_std(&per_set);
    let sys_spread = if per_set.is_empty() {
        0.0
    } else {
        replica_std / (per_set.len() as f64).sqrt()
    };
    let size_spread = size_spread(&bins, &opts.window);
    let report = EfficiencyReport {
        qubit_id: template.qubit_id,
        efficiency,
        sys_spread,
        replica_std,
        size_spread,
        n_injected: n_inj,
        n_found,
        config_tag: opts.config_tag.clone(),
        n_scans: plan.n_scans,
        sigma_p1: noise.sigma_p1,
        chi2_threshold: cfg.chi2_threshold,
        mean_dq_error: if n_found > 0 {
            dq_err / n_found as f64
        } else {
            0.0
        },
        n_unmatched_detections: unmatched,
        size_bins: bins,
    };
    let truth = outcomes.into_iter().flat_map(|o| o.truth).collect();
    Ok(McOutcome { report, truth })
}

fn size_spread(bins: &[SizeBin], window: &MatchWindow) -> f64 {
    let (eff, noise): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .filter(|b| b.n_injected > 0 && window.counts(0.5 * (b.lo + b.hi)))
        .map(|b| {
            let e = b.n_found as f64 / b.n_injected as f64;
            (e, e * (1.0 - e) / b.n_injected as f64)
        })
        .unzip();
    if eff.len() < 2 {
        return 0.0;
    }
    let sd = sample_std(&eff);
    let sampling = noise.iter().sum::<f64>() / noise.len() as f64;
    (sd * sd - sampling).max(0.0).sqrt()
}

fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Number of scans that cover `hours` of one schedule.
pub fn scans_for_hours(schedule: &ScanSchedule, hours: f64) -> usize {
    (hours * 3600.0 / schedule.scan_duration()).ceil() as usize
}

/// Reportable false detections with |Δq| ≥ `cfg.min_jump` on jump-free scans.
pub fn count_false_positives(
    template: &Template,
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    noise: &NoiseModel,
    cfg: &DetectionConfig,
    n_scans: usize,
    phase_seed: u64,
) -> Result<usize, SynthError> {
    noise.validate()?;
    let grid = schedule.bias_grid();
    let detector = ScanDetector::new(template, &grid, cfg)?;
    let qubit = template.qubit_id;
    let counts: Vec<usize> = (0..n_scans as u64)
        .into_par_iter()
        .map(|i| {
            let s = generate_scan(
                source,
                schedule,
                qubit,
                noise,
                random_phase(phase_seed, i),
                i,
            )?;
            let det = detector.detect(&s.scan)?;
            Ok(det
                .events
                .iter()
                .filter(|e| e.is_reportable() && e.magnitude() >= cfg.min_jump)
                .count())
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(counts.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTuning {
    pub qubit_id: u8,
    pub chi2_threshold: f64,
    pub hours: f64,
    pub false_positives: usize,
    /// False jumps per 400 h at the chosen threshold.
    pub rate_per_400h: f64,
}

/// Walks `candidates` in increasing order and returns the first threshold
/// whose false-jump rate over `hours` of jump-free scans is at most
/// `max_per_400h`. Falls back to the last candidate.
#[allow(clippy::too_many_arguments)]
pub fn tune_threshold(
    template: &Template,
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    noise: &NoiseModel,
    base: &DetectionConfig,
    hours: f64,
    max_per_400h: f64,
    candidates: &[f64],
) -> Result<ThresholdTuning, SynthError> {
    if !(hours > 0.0) || !(max_per_400h >= 0.0) {
        return Err(SynthError::ConfigInvalid(
            "tuning hours and budget must be positive".into(),
        ));
    }
    let n = scans_for_hours(schedule, hours);
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut last = None;
    for &thr in &sorted {
        let cfg = DetectionConfig {
            chi2_threshold: thr,
            ..base.clone()
        };
        let fp = count_false_positives(template, source, schedule, noise, &cfg, n, noise.seed)?;
        let rate = fp as f64 * 400.0 / hours;
        last = Some(ThresholdTuning {
            qubit_id: template.qubit_id,
            chi2_threshold: thr,
            hours,
            false_positives: fp,
            rate_per_400h: rate,
        });
        if rate <= max_per_400h {
            break;
        }
    }
    last.ok_or_else(|| SynthError::ConfigInvalid("no threshold candidates".into()))
}

/// Bisects the noise level until the MC efficiency hits `target`.
///
/// `make_template` maps a noise level to the reference the detector uses, so
/// the template spread can follow the noise. Seeds are held fixed across
/// iterations.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_noise<F>(
    make_template: F,
    source: CurveSource<'_>,
    schedule: &ScanSchedule,
    base_noise: &NoiseModel,
    plan: &InjectionPlan,
    cfg: &DetectionConfig,
    opts: &McOptions,
    target: f64,
    bracket: (f64, f64),
    iterations: usize,
) -> Result<(f64, EfficiencyReport), SynthError>
where
    F: Fn(f64) -> Result<Template, SynthError>,
{
    if !(target > 0.0 && target < 1.0) || !(bracket.0 >= 0.0 && bracket.0 < bracket.1) {
        return Err(SynthError::ConfigInvalid(
            "calibration target or bracket invalid".into(),
        ));
    }
    let eval = |sigma: f64| -> Result<EfficiencyReport, SynthError> {
        let t = make_template(sigma)?;
        let noise = NoiseModel {
            sigma_p1: sigma,
            ..base_noise.clone()
        };
        Ok(run_efficiency_mc(&t, source, schedule, &noise, plan, cfg, opts)?.report)
    };
    let (mut lo, mut hi) = bracket;
    let mut best: Option<(f64, EfficiencyReport)> = None;
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let r = eval(mid)?;
        let closer = best
            .as_ref()
            .is_none_or(|(_, b)| (r.efficiency - target).abs() < (b.efficiency - target).abs());
        if r.efficiency > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if closer {
            best = Some((mid, r));
        }
    }
    best.ok_or_else(|| SynthError::ConfigInvalid("calibration needs iterations".into()))
}

/// Per-qubit settings for [`simulate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitSim {
    pub id: u8,
    pub sigma_p1: f64,
    /// Rate of jumps seen by this qubit alone, mHz. 0 disables them.
    #[serde(default)]
    pub rate_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetPlan {
    pub n_scans: usize,
    pub seed: u64,
    pub size_law: SizeLaw,
    pub ar1: f64,
    /// Rate of events that strike every qubit in `shared_qubits` at once, mHz.
    pub shared_rate_mhz: f64,
    pub shared_qubits: Vec<u8>,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        Self {
            n_scans: 1600,
            seed: 1,
            size_law: SizeLaw::default(),
            ar1: 0.0,
            shared_rate_mhz: 0.0,
            shared_qubits: Vec::new(),
        }
    }
}

/// Seed for one qubit's streams, distinct per qubit for a given run seed.
pub fn qubit_seed(seed: u64, qubit_id: u8) -> u64 {
    seed ^ (qubit_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const SHARED_STREAM: u64 = 3;

/// Time and one signed size per struck qubit.
type SharedEvent = (f64, Vec<(u8, f64)>);

/// Shared events over the whole run.
fn shared_events(plan: &DatasetPlan, total_s: f64) -> Result<Vec<SharedEvent>, SynthError> {
    if plan.shared_rate_mhz == 0.0 || plan.shared_qubits.is_empty() {
        return Ok(Vec::new());
    }
    let wait = Exp::new(plan.shared_rate_mhz * 1e-3)
        .map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
    let mut rng = stream(plan.seed, u64::MAX / 4, SHARED_STREAM);
    let mut out = Vec::new();
    let mut t = wait.sample(&mut rng);
    while t < total_s {
        let hits = plan
            .shared_qubits
            .iter()
            .map(|&q| {
                let size = plan.size_law.sample(&mut rng);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (q, sign * size)
            })
            .collect();
        out.push((t, hits));
        t += wait.sample(&mut rng);
    }
    Ok(out)
}

/// Back-to-back scans of several qubits measured on one schedule, each scan
/// starting at a random phase, with independent and shared jumps.
///
/// Output is ordered by scan index, then by `qubits`.
pub fn simulate_dataset(
    sources: &[(u8, CurveSource<'_>)],
    schedule: &ScanSchedule,
    qubits: &[QubitSim],
    plan: &DatasetPlan,
) -> Result<Vec<SyntheticScan>, SynthError> {
    schedule.validate()?;
    if !(plan.shared_rate_mhz >= 0.0) || !plan.shared_rate_mhz.is_finite() {
        return Err(SynthError::ConfigInvalid("shared rate must be >= 0".into()));
    }
    let source_of = |q: u8| {
        sources
            .iter()
            .find(|(id, _)| *id == q)
            .map(|(_, s)| *s)
            .ok_or_else(|| SynthError::ConfigInvalid(format!("no curve for qubit {q}")))
    };
    for q in qubits {
        source_of(q.id)?;
        if !(q.rate_mhz >= 0.0) || !q.rate_mhz.is_finite() {
            return Err(SynthError::ConfigInvalid(format!(
                "qubit {}: rate must be >= 0",
                q.id
            )));
        }
    }
    let duration = schedule.scan_duration();
    let shared = shared_events(plan, plan.n_scans as f64 * duration)?;
    let per_scan: Vec<Vec<SyntheticScan>> = (0..plan.n_scans as u64)
        .into_par_iter()
        .map(|i| {
            let start = i as f64 * duration;
            let lo = shared.partition_point(|(t, _)| *t < start);
            let hi = shared.partition_point(|(t, _)| *t < start + duration);
            qubits
                .iter()
                .map(|q| {
                    let source = source_of(q.id)?;
                    let seed = qubit_seed(plan.seed, q.id);
                    let noise = NoiseModel {
                        sigma_p1: q.sigma_p1,
                        seed,
                        ar1: plan.ar1,
                    };
                    let mut s =
                        generate_scan(source, schedule, q.id, &noise, random_phase(seed, i), i)?;
                    if q.rate_mhz > 0.0 {
                        let own = InjectionPlan {
                            rate_mhz: q.rate_mhz,
                            size_law: plan.size_law,
                            n_scans: plan.n_scans,
                            seed,
                        };
                        s = inject_jumps(source, schedule, &s, &own)?;
                    }
                    let hits: Vec<(f64, f64)> = shared[lo..hi]
                        .iter()
                        .filter_map(|(t, h)| {
                            h.iter()
                                .find(|(id, _)| *id == q.id)
                                .map(|(_, dq)| (*t, *dq))
                        })
                        .collect();
                    if !hits.is_empty() {
                        s = apply_jumps(source, &s, &hits);
                    }
                    Ok(s)
                })
                .collect()
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(per_scan.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jumpfind::find_jumps;

    fn model() -> CurveModel {
        CurveModel::default()
    }

    fn sched() -> ScanSchedule {
        ScanSchedule::default()
    }

    #[test]
    fn default_schedule_takes_355_s() {
        assert!((sched().scan_duration() - 355.0).abs() < 0.5);
    }

    #[test]
    fn noiseless_scan_equals_stitched_template() {
        let t = Template::from_model(&model(), 37, 0.02, 2).unwrap();
        let s = generate_scan(
            CurveSource::Template(&t),
            &sched(),
            2,
            &NoiseModel::default(),
            0.0,
            0,
        )
        .unwrap();
        let (means, _) = t.stitch(74);
        assert_eq!(s.scan.p1(), means);
        assert_eq!(s.scan.qubit_id, 2);
    }

    #[test]
    fn residual_std_matches_sigma() {
        // 10^4 points at mid-curve where clipping never happens.
        let flat = CurveModel::new(0.0, 0.5, 0.25).unwrap();
        let src = CurveSource::Model(&flat);
        let noise = NoiseModel::white(0.05, 11);
        let mut r = Vec::new();
        for i in 0..136 {
            let s = generate_scan(src, &sched(), 1, &noise, 0.0, i).unwrap();
            r.extend(s.scan.p1().iter().map(|p| p - 0.5));
        }
        assert!(r.len() >= 10_000);
        let sd = sample_std(&r);
        assert!((sd - 0.05).abs() < 0.002, "{sd}");
    }

    #[test]
    fn reproducible_from_seed() {
        let m = model();
        let src = CurveSource::Model(&m);
        let noise = NoiseModel::white(0.03, 5);
        let plan = InjectionPlan {
            rate_mhz: 5.0,
            ..Default::default()
        };
        let run = || {
            let s = generate_scan(src, &sched(), 3, &noise, 0.1, 9).unwrap();
            inject_jumps(src, &sched(), &s, &plan).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let other = generate_scan(src, &sched(), 3, &noise, 0.1, 10).unwrap();
        assert_ne!(a.noise, other.noise);
    }

    #[test]
    fn poisson_mean_over_many_scans() {
        let m = model();
        let src = CurveSource::Model(&m);
        let plan = InjectionPlan::default();
        let n = 20_000u64;
        let total: usize = (0..n)
            .map(|i| {
                let s = generate_scan(src, &sched(), 1, &NoiseModel::default(), 0.0, i).unwrap();
                inject_jumps(src, &sched(), &s, &plan)
                    .unwrap()
                    .injections
                    .len()
            })
            .sum();
        let mean = total as f64 / n as f64;
        let expect = 1.1e-3 * sched().scan_duration();
        // Poisson standard error of the mean is about 0.0044.
        assert!((mean - expect).abs() < 0.015, "{mean} vs {expect}");
        assert!((expect - 0.39).abs() < 0.005);
    }

    #[test]
    fn vanishing_rate_injects_nothing() {
        let m = model();
        let src = CurveSource::Model(&m);
        let plan = InjectionPlan {
            rate_mhz: 1e-9,
            ..Default::default()
        };
        let s = generate_scan(src, &sched(), 1, &NoiseModel::default(), 0.0, 0).unwrap();
        assert!(inject_jumps(src, &sched(), &s, &plan)
            .unwrap()
            .injections
            .is_empty());
    }

    #[test]
    fn discontinuities_match_injections() {
        let m = model();
        let src = CurveSource::Model(&m);
        let plan = InjectionPlan {
            rate_mhz: 8.0,
            seed: 3,
            ..Default::default()
        };
        let mut seen = 0;
        for i in 0..200 {
            let s = generate_scan(src, &sched(), 4, &NoiseModel::white(0.02, 1), 0.0, i).unwrap();
            let s = inject_jumps(src, &sched(), &s, &plan).unwrap();
            let mut want: Vec<usize> = s
                .injections
                .iter()
                .filter(|j| j.observable(s.scan.len()))
                .map(|j| j.index)
                .collect();
            want.dedup();
            assert_eq!(s.discontinuities(), want);
            seen += want.len();
        }
        assert!(seen > 100);
    }

    #[test]
    fn injected_step_moves_later_points_only() {
        let m = model();
        let src = CurveSource::Model(&m);
        let s = generate_scan(src, &sched(), 1, &NoiseModel::default(), 0.1, 0).unwrap();
        let t = Template::from_model(&m, 37, 0.02, 1).unwrap();
        let mut s2 = s.clone();
        for th in &mut s2.phase_track[30..] {
            *th += 0.3;
        }
        let times: Vec<f64> = s.scan.points.iter().map(|p| p.time).collect();
        s2.scan.points = render(src, &s.scan.biases(), &s2.phase_track, &s2.noise, &times);
        let before = crate::jumpfind::best_fit_phase(&s2.scan.points[..30], &t).unwrap();
        let after = crate::jumpfind::best_fit_phase(&s2.scan.points[30..], &t).unwrap();
        assert!(wrap_charge(before.theta_min - 0.1).abs() < 0.003);
        assert!(wrap_charge(after.theta_min - 0.4).abs() < 0.003);
        let ev = find_jumps(&s2.scan, &t, &DetectionConfig::default()).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].delta_q - 0.3).abs() < 0.01);
    }

    #[test]
    fn matching_is_one_to_one() {
        let inj = [
            InjectedJump {
                time: 0.0,
                index: 10,
                delta_q: 0.2,
            },
            InjectedJump {
                time: 0.0,
                index: 11,
                delta_q: 0.2,
            },
        ];
        let ev = JumpEvent {
            scan_id: 0,
            qubit_id: 1,
            time: 0.0,
            delta_q: 0.21,
            theta_before: 0.0,
            theta_after: 0.21,
            point_index: 11,
            chi2_at_trigger: 9.0,
            flags: vec![],
        };
        let m = match_detections(&inj, std::slice::from_ref(&ev), &MatchWindow::default());
        assert_eq!(m, vec![None, Some(0)]);
        let far = JumpEvent {
            point_index: 14,
            ..ev.clone()
        };
        assert_eq!(
            match_detections(&inj, &[far], &MatchWindow::default()),
            vec![None, None]
        );
        let wrong = JumpEvent {
            delta_q: -0.2,
            ..ev
        };
        assert_eq!(
            match_detections(&inj, &[wrong], &MatchWindow::default()),
            vec![None, None]
        );
    }

    fn quick_mc(sigma: f64, size: SizeLaw, n: usize) -> McOutcome {
        let m = model();
        let t = Template::from_model(&m, 37, sigma.max(0.01), 1).unwrap();
        let plan = InjectionPlan {
            size_law: size,
            n_scans: n,
            ..Default::default()
        };
        run_efficiency_mc(
            &t,
            CurveSource::Model(&m),
            &sched(),
            &NoiseModel::white(sigma, 21),
            &plan,
            &DetectionConfig::default(),
            &McOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_large_jumps_nearly_always_found() {
        let out = quick_mc(0.0, SizeLaw::Uniform { min: 0.4, max: 0.5 }, 1600);
        let r = &out.report;
        assert!(r.n_injected > 400);
        assert!(r.n_found <= r.n_injected);

        // Jumps landing before the second point or after the second to last
        // cannot be resolved with three-point segments.
        let times = sched().timestamps(1, 0.0).unwrap();
        let n = times.len();
        let dead = times[1] + (sched().scan_duration() - times[n - 2]);
        let edge = dead / sched().scan_duration();
        assert!(edge < 0.045);
        assert!(r.efficiency >= 1.0 - edge - 0.03, "{r:?}");

        // Away from edges and from other jumps nothing is lost.
        let isolated: Vec<&TruthRecord> = out
            .truth
            .iter()
            .filter(|t| t.index >= 2 && t.index + 2 <= n)
            .filter(|t| {
                !out.truth.iter().any(|o| {
                    o.scan_id == t.scan_id && !std::ptr::eq(*t, o) && o.index.abs_diff(t.index) < 4
                })
            })
            .collect();
        let found = isolated.iter().filter(|t| t.matched).count();
        assert!(
            found as f64 >= 0.98 * isolated.len() as f64,
            "{found}/{}",
            isolated.len()
        );
    }

    #[test]
    fn efficiency_falls_with_noise() {
        let effs: Vec<EfficiencyReport> = [0.02, 0.05, 0.09]
            .iter()
            .map(|&s| quick_mc(s, SizeLaw::default(), 800).report)
            .collect();
        for w in effs.windows(2) {
            let se = (w[0].efficiency * (1.0 - w[0].efficiency) / w[0].n_injected as f64
                + w[1].efficiency * (1.0 - w[1].efficiency) / w[1].n_injected as f64)
                .sqrt();
            assert!(w[1].efficiency <= w[0].efficiency + 2.0 * se, "{effs:?}");
        }
        assert!(effs[2].efficiency < effs[0].efficiency);
    }

    #[test]
    fn matched_delta_q_is_unbiased() {
        let r = quick_mc(0.03, SizeLaw::default(), 1600).report;
        assert!(r.mean_dq_error.abs() < 0.01, "{}", r.mean_dq_error);
    }

    #[test]
    fn mc_is_deterministic() {
        let a = quick_mc(0.04, SizeLaw::default(), 200);
        let b = quick_mc(0.04, SizeLaw::default(), 200);
        assert_eq!(a, b);
        assert_eq!(a.report.size_bins.len(), 15);
    }

    #[test]
    fn rejects_bad_plans() {
        let p = InjectionPlan {
            rate_mhz: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = InjectionPlan {
            size_law: SizeLaw::Uniform { min: 0.1, max: 0.7 },
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert!(NoiseModel::white(-0.1, 0).validate().is_err());
    }

    fn two_qubit_run(shared: f64, own: f64) -> Vec<SyntheticScan> {
        let m = model();
        let schedule = ScanSchedule::default();
        let sources = [(1, CurveSource::Model(&m)), (3, CurveSource::Model(&m))];
        let qubits = [
            QubitSim {
                id: 1,
                sigma_p1: 0.02,
                rate_mhz: own,
            },
            QubitSim {
                id: 3,
                sigma_p1: 0.02,
                rate_mhz: own,
            },
        ];
        let plan = DatasetPlan {
            n_scans: 200,
            seed: 11,
            shared_rate_mhz: shared,
            shared_qubits: vec![1, 3],
            ..DatasetPlan::default()
        };
        simulate_dataset(&sources, &schedule, &qubits, &plan).unwrap()
    }

    #[test]
    fn dataset_shared_events_hit_both_qubits() {
        let run = two_qubit_run(2.0, 0.0);
        assert_eq!(run.len(), 400);
        let mut n = 0;
        for pair in run.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(a.scan.scan_id, b.scan.scan_id);
            assert_eq!((a.scan.qubit_id, b.scan.qubit_id), (1, 3));
            assert_ne!(a.noise, b.noise);
            let ta: Vec<f64> = a.injections.iter().map(|j| j.time).collect();
            let tb: Vec<f64> = b.injections.iter().map(|j| j.time).collect();
            assert_eq!(ta, tb);
            n += ta.len();
        }
        // 2 mHz over 200 scans of 355 s: about 142 events.
        let expect = 2e-3 * 200.0 * ScanSchedule::default().scan_duration();
        assert!(
            (n as f64 - expect).abs() < 4.0 * expect.sqrt(),
            "{n} vs {expect}"
        );
    }

    #[test]
    fn dataset_is_reproducible_and_independent_otherwise() {
        let a = two_qubit_run(0.0, 1.5);
        assert_eq!(a, two_qubit_run(0.0, 1.5));
        let shared_times = a
            .chunks(2)
            .filter(|p| {
                p[0].injections
                    .iter()
                    .any(|j| p[1].injections.iter().any(|k| k.time == j.time))
            })
            .count();
        assert_eq!(shared_times, 0);
        assert!(a.iter().any(|s| !s.injections.is_empty()));
    }
}
