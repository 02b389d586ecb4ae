//! Data-driven reference curves.
//!
//! A template is one period of mean `P1` versus bias phase with a per-point
//! spread, averaged from jump-free scans of a single qubit. Scans are fitted
//! against it by sliding the phase (see [`crate::jumpfind`]).

use serde::{Deserialize, Serialize};

use crate::error::{RejectedScan, TemplateError};
use crate::jumpfind::{best_fit_phase_with_step, DEFAULT_THETA_STEP};
use crate::model::{wrap_charge, wrap_unit, ChargeScan, CurveModel};

const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64)", into = "(f64, f64, f64)")]
pub struct TemplatePoint {
    /// Bias phase within the period, e.
    pub phase: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl From<(f64, f64, f64)> for TemplatePoint {
    fn from((phase, mean, sigma): (f64, f64, f64)) -> Self {
        Self { phase, mean, sigma }
    }
}

impl From<TemplatePoint> for (f64, f64, f64) {
    fn from(p: TemplatePoint) -> Self {
        (p.phase, p.mean, p.sigma)
    }
}

/// One period of reference curve. Nodes sit at `k / points_per_period`.
///
/// Templates derived from an analytic [`CurveModel`] carry `n_source_scans == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub qubit_id: u8,
    pub shield_config_tag: String,
    pub sigma_floor: f64,
    pub n_source_scans: usize,
    pub period_points: Vec<TemplatePoint>,
}

impl Template {
    pub fn new(
        qubit_id: u8,
        shield_config_tag: impl Into<String>,
        sigma_floor: f64,
        n_source_scans: usize,
        means: &[f64],
        sigmas: &[f64],
    ) -> Result<Self, TemplateError> {
        if means.len() != sigmas.len() {
            return Err(TemplateError::Invalid(
                "means and sigmas differ in length".into(),
            ));
        }
        let ppp = means.len() as f64;
        let period_points = means
            .iter()
            .zip(sigmas)
            .enumerate()
            .map(|(k, (&mean, &sigma))| TemplatePoint {
                phase: k as f64 / ppp,
                mean,
                sigma: sigma.max(sigma_floor),
            })
            .collect();
        let t = Self {
            qubit_id,
            shield_config_tag: shield_config_tag.into(),
            sigma_floor,
            n_source_scans,
            period_points,
        };
        t.validate()?;
        Ok(t)
    }

    /// Samples an analytic curve with a uniform spread.
    pub fn from_model(
        model: &CurveModel,
        points_per_period: usize,
        sigma: f64,
        qubit_id: u8,
    ) -> Result<Self, TemplateError> {
        let ppp = points_per_period as f64;
        let means: Vec<f64> = (0..points_per_period)
            .map(|k| model.p1(k as f64 / ppp))
            .collect();
        let sigmas = vec![sigma; points_per_period];
        Self::new(qubit_id, "model", sigma, 0, &means, &sigmas)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let bad = |m: String| Err(TemplateError::Invalid(m));
        let n = self.period_points.len();
        if n < 8 {
            return bad(format!("template has {n} points, need at least 8"));
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive".into());
        }
        for (k, p) in self.period_points.iter().enumerate() {
            if (p.phase - k as f64 / n as f64).abs() > 1e-9 {
                return bad(format!("point {k} is off the uniform phase grid"));
            }
            if !(0.0..=1.0).contains(&p.mean) {
                return bad(format!("mean out of [0,1] at point {k}"));
            }
            if !(p.sigma >= self.sigma_floor) || !p.sigma.is_finite() {
                return bad(format!("sigma below floor at point {k}"));
            }
        }
        Ok(())
    }

    pub fn points_per_period(&self) -> usize {
        self.period_points.len()
    }

    pub fn means(&self) -> Vec<f64> {
        self.period_points.iter().map(|p| p.mean).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.period_points.iter().map(|p| p.sigma).collect()
    }

    /// Linear interpolation at phase `u` (any real, taken mod 1).
    pub fn eval(&self, u: f64) -> (f64, f64) {
        let ppp = self.period_points.len();
        let x = wrap_unit(u) * ppp as f64;
        let mut i = x.floor() as usize;
        let mut f = x - i as f64;
        if f < SNAP {
            f = 0.0;
        } else if f > 1.0 - SNAP {
            f = 0.0;
            i += 1;
        }
        let a = &self.period_points[i % ppp];
        if f == 0.0 {
            return (a.mean, a.sigma);
        }
        let b = &self.period_points[(i + 1) % ppp];
        (
            a.mean + f * (b.mean - a.mean),
            a.sigma + f * (b.sigma - a.sigma),
        )
    }

    /// Template evaluated at `(grid + theta) mod 1`.
    pub fn predict(&self, theta: f64, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
        grid.iter().map(|&g| self.eval(g + theta)).unzip()
    }

    /// The period tiled out to `n_points` samples on the template grid.
    pub fn stitch(&self, n_points: usize) -> (Vec<f64>, Vec<f64>) {
        let ppp = self.period_points.len();
        (0..n_points)
            .map(|i| {
                let p = &self.period_points[i % ppp];
                (p.mean, p.sigma)
            })
            .unzip()
    }
}

pub fn template_predict(t: &Template, theta: f64, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    t.predict(theta, grid)
}

pub fn stitch_template(t: &Template, n_points: usize) -> (Vec<f64>, Vec<f64>) {
    t.stitch(n_points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateOptions {
    /// Largest phase discontinuity tolerated inside a source scan, e.
    pub max_internal_jump: f64,
    pub sigma_floor: f64,
    pub shield_config_tag: String,
    /// Reference used to register the first source scan.
    pub bootstrap: CurveModel,
    pub theta_step: f64,
}

impl Default for TemplateOptions {
    fn default() -> Self {
        Self {
            max_internal_jump: 0.03,
            sigma_floor: 0.01,
            shield_config_tag: "default".into(),
            bootstrap: CurveModel::default(),
            theta_step: DEFAULT_THETA_STEP,
        }
    }
}

/// Outcome of screening a pool of candidate scans.
#[derive(Debug, Clone, Default)]
pub struct ScreenResult {
    pub admitted: Vec<ChargeScan>,
    pub rejected: Vec<RejectedScan>,
}

fn check_grids(scans: &[ChargeScan]) -> Result<usize, TemplateError> {
    let first = &scans[0];
    let ppp = first.points_per_period().ok_or_else(|| {
        TemplateError::GridMismatch(format!(
            "scan {} bias grid is not uniform over whole periods",
            first.scan_id
        ))
    })?;
    if ppp < 8 {
        return Err(TemplateError::GridMismatch(format!(
            "{ppp} points per period is too coarse"
        )));
    }
    for s in &scans[1..] {
        if s.qubit_id != first.qubit_id {
            return Err(TemplateError::MixedQubits(first.qubit_id, s.qubit_id));
        }
        let same = s.len() == first.len()
            && s.points
                .iter()
                .zip(&first.points)
                .all(|(a, b)| (a.bias - b.bias).abs() < 1e-9);
        if !same {
            return Err(TemplateError::GridMismatch(format!(
                "scan {} differs from scan {}",
                s.scan_id, first.scan_id
            )));
        }
    }
    Ok(ppp)
}

/// Phase-consistency screen: fits independent half-period windows and
/// rejects the scan if their phases spread by more than `max_internal_jump`.
fn screen_one(
    scan: &ChargeScan,
    reference: &Template,
    opts: &TemplateOptions,
) -> Result<(), String> {
    let ppp = reference.points_per_period();
    let window = (ppp / 2).max(8);
    let mut phases = Vec::new();
    for chunk in scan.points.chunks(window) {
        if chunk.len() < window / 2 {
            continue;
        }
        let fit = best_fit_phase_with_step(chunk, reference, opts.theta_step)
            .map_err(|e| e.to_string())?;
        phases.push(fit.theta_min);
    }
    let mut worst = 0.0f64;
    for (i, a) in phases.iter().enumerate() {
        for b in &phases[i + 1..] {
            worst = worst.max(wrap_charge(b - a).abs());
        }
    }
    if worst > opts.max_internal_jump {
        Err(format!(
            "phase spread {worst:.3}e exceeds {:.3}e",
            opts.max_internal_jump
        ))
    } else {
        Ok(())
    }
}

/// Splits candidates into jump-free and rejected scans.
pub fn screen_scans(scans: &[ChargeScan], opts: &TemplateOptions) -> ScreenResult {
    let mut out = ScreenResult::default();
    let Some(first) = scans.first() else {
        return out;
    };
    let Some(ppp) = first.points_per_period() else {
        out.rejected = scans
            .iter()
            .map(|s| RejectedScan {
                scan_id: s.scan_id,
                reason: "non-uniform bias grid".into(),
            })
            .collect();
        return out;
    };
    let Ok(reference) = Template::from_model(&opts.bootstrap, ppp, 0.05, first.qubit_id) else {
        return out;
    };
    for s in scans {
        match screen_one(s, &reference, opts) {
            Ok(()) => out.admitted.push(s.clone()),
            Err(reason) => out.rejected.push(RejectedScan {
                scan_id: s.scan_id,
                reason,
            }),
        }
    }
    out
}

/// Interpolates `scan` at fractional index positions `j + m·ppp` for every
/// whole-period image that lies inside the scan.
fn fold_scan(scan: &ChargeScan, ppp: usize, offset: f64, out: &mut [Vec<f64>]) -> f64 {
    let n = scan.len();
    let b0 = scan.points[0].bias;
    let p = ppp as f64;
    let mut frac_used = 0.0;
    for (k, samples) in out.iter_mut().enumerate() {
        let y = k as f64 / p - offset;
        let mut j = ((y - b0) * p).rem_euclid(p);
        if j > p - SNAP {
            j = 0.0;
        }
        while j <= (n - 1) as f64 + SNAP {
            let mut i0 = j.floor() as usize;
            let mut f = j - i0 as f64;
            if f < SNAP {
                f = 0.0;
            } else if f > 1.0 - SNAP {
                f = 0.0;
                i0 += 1;
            }
            if f == 0.0 {
                if i0 < n {
                    samples.push(scan.points[i0].p1);
                }
            } else if i0 + 1 < n {
                let a = scan.points[i0].p1;
                let b = scan.points[i0 + 1].p1;
                samples.push(a + f * (b - a));
            }
            frac_used = f;
            j += p;
        }
    }
    frac_used
}

fn aggregate(
    scans: &[ChargeScan],
    offsets: &[f64],
    ppp: usize,
    opts: &TemplateOptions,
) -> Result<Template, TemplateError> {
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); ppp];
    // Linear interpolation between neighbours shrinks white-noise variance by
    // (1-f)^2 + f^2; undo it so sigma reflects the per-point noise.
    let mut shrink = Vec::with_capacity(scans.len());
    for (s, &off) in scans.iter().zip(offsets) {
        let f = fold_scan(s, ppp, off, &mut samples);
        shrink.push((1.0 - f).powi(2) + f * f);
    }
    let shrink_mean = shrink.iter().sum::<f64>() / shrink.len() as f64;
    let mut means = Vec::with_capacity(ppp);
    let mut sigmas = Vec::with_capacity(ppp);
    for v in &samples {
        if v.len() < 2 {
            return Err(TemplateError::GridMismatch(
                "scans too short to cover one period".into(),
            ));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        means.push(m.clamp(0.0, 1.0));
        sigmas.push((var / shrink_mean).sqrt());
    }
    Template::new(
        scans[0].qubit_id,
        opts.shield_config_tag.clone(),
        opts.sigma_floor,
        scans.len(),
        &means,
        &sigmas,
    )
}

/// Averages jump-free scans into a one-period template.
///
/// Scans are ordered by start time; every scan is registered to the earliest
/// one (first against the analytic bootstrap curve, then against the
/// provisional template) before the per-point mean and sample spread are taken.
pub fn build_template(
    scans: &[ChargeScan],
    opts: &TemplateOptions,
) -> Result<Template, TemplateError> {
    if scans.len() < 2 {
        return Err(TemplateError::TooFewScans(scans.len()));
    }
    let mut scans = scans.to_vec();
    scans.sort_by(|a, b| {
        a.start_time
            .total_cmp(&b.start_time)
            .then(a.scan_id.cmp(&b.scan_id))
    });
    let ppp = check_grids(&scans)?;

    let screened = screen_scans(&scans, opts);
    if !screened.rejected.is_empty() {
        return Err(TemplateError::ScreenFailed(screened.rejected));
    }

    let bootstrap = Template::from_model(&opts.bootstrap, ppp, 0.05, scans[0].qubit_id)?;
    let mut phases = Vec::with_capacity(scans.len());
    for s in &scans {
        let fit = best_fit_phase_with_step(&s.points, &bootstrap, opts.theta_step)
            .map_err(|e| TemplateError::Invalid(e.to_string()))?;
        phases.push(fit.theta_min);
    }
    let offsets: Vec<f64> = phases.iter().map(|&t| wrap_charge(t - phases[0])).collect();
    let provisional = aggregate(&scans, &offsets, ppp, opts)?;

    let mut offsets = Vec::with_capacity(scans.len());
    for s in &scans {
        let fit = best_fit_phase_with_step(&s.points, &provisional, opts.theta_step)
            .map_err(|e| TemplateError::Invalid(e.to_string()))?;
        offsets.push(fit.theta_min);
    }
    aggregate(&scans, &offsets, ppp, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScanPoint, ScanSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn model_scan(id: u64, theta: f64, noise: f64, rng: &mut ChaCha8Rng) -> ChargeScan {
        let sched = ScanSchedule::single_qubit(1, 245);
        let m = CurveModel::default();
        let times = sched.timestamps(1, id as f64 * 400.0).unwrap();
        let gauss = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let points = sched
            .bias_grid()
            .into_iter()
            .zip(times)
            .map(|(b, t)| {
                let e = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                ScanPoint {
                    bias: b,
                    p1: (m.p1(b + theta) + e).clamp(0.0, 1.0),
                    time: t,
                }
            })
            .collect();
        ChargeScan::new(id, 1, id as f64 * 400.0, points).unwrap()
    }

    #[test]
    fn identical_noiseless_scans_reproduce_the_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scans: Vec<_> = (0..20)
            .map(|i| {
                let mut s = model_scan(0, 0.137, 0.0, &mut rng);
                s.scan_id = i;
                s.start_time = i as f64;
                s
            })
            .collect();
        let t = build_template(&scans, &TemplateOptions::default()).unwrap();
        assert_eq!(t.points_per_period(), 37);
        assert_eq!(t.n_source_scans, 20);
        for (k, p) in t.period_points.iter().enumerate() {
            assert!((p.mean - scans[0].points[k].p1).abs() < 1e-12);
            assert_eq!(p.sigma, t.sigma_floor);
        }
    }

    #[test]
    fn noisy_template_sigma_tracks_injected_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scans: Vec<_> = (0..20)
            .map(|i| model_scan(i, 0.3 * (i as f64 * 0.77).sin(), 0.05, &mut rng))
            .collect();
        let t = build_template(&scans, &TemplateOptions::default()).unwrap();
        let inside = t
            .period_points
            .iter()
            .filter(|p| (0.03..=0.07).contains(&p.sigma))
            .count();
        assert!(
            inside as f64 >= 0.9 * 37.0,
            "only {inside}/37 sigmas in band"
        );
    }

    #[test]
    fn build_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scans: Vec<_> = (0..8)
            .map(|i| model_scan(i, 0.1 * i as f64 - 0.3, 0.03, &mut rng))
            .collect();
        let a = build_template(&scans, &TemplateOptions::default()).unwrap();
        let mut rev = scans.clone();
        rev.reverse();
        rev.swap(1, 5);
        let b = build_template(&rev, &TemplateOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = vec![model_scan(0, 0.0, 0.0, &mut rng)];
        assert_eq!(
            build_template(&one, &TemplateOptions::default()),
            Err(TemplateError::TooFewScans(1))
        );

        let a = model_scan(0, 0.0, 0.0, &mut rng);
        let mut b = model_scan(1, 0.0, 0.0, &mut rng);
        b.points.truncate(60);
        assert!(matches!(
            build_template(&[a.clone(), b], &TemplateOptions::default()),
            Err(TemplateError::GridMismatch(_))
        ));

        // A 0.25e step halfway through must be rejected by the screen.
        let mut jumped = model_scan(2, 0.0, 0.0, &mut rng);
        let m = CurveModel::default();
        for p in jumped.points.iter_mut().skip(40) {
            p.p1 = m.p1(p.bias + 0.25);
        }
        match build_template(&[a, jumped], &TemplateOptions::default()) {
            Err(TemplateError::ScreenFailed(r)) => {
                assert_eq!(r.len(), 1);
                assert_eq!(r[0].scan_id, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stitch_examples() {
        let t = Template::from_model(&CurveModel::default(), 37, 0.02, 1).unwrap();
        let (two, _) = t.stitch(74);
        assert_eq!(two[..37], two[37..]);
        let (plus, _) = t.stitch(38);
        assert_eq!(plus[37], plus[0]);
        // Direct modular-indexing oracle on the default 74-point grid.
        let (m, s) = t.stitch(74);
        let means = t.means();
        let sigmas = t.sigmas();
        for i in 0..74 {
            assert_eq!(m[i], means[i % 37]);
            assert_eq!(s[i], sigmas[i % 37]);
        }
    }

    #[test]
    fn predict_examples() {
        let t = Template::from_model(&CurveModel::default(), 37, 0.02, 1).unwrap();
        let grid = ScanSchedule::default().bias_grid();
        let (x0, _) = t.predict(0.0, &grid);
        let (stitched, _) = t.stitch(74);
        for i in 0..74 {
            assert!((x0[i] - stitched[i]).abs() < 1e-15);
        }
        let (x1, _) = t.predict(1.0 / 37.0, &grid);
        for i in 0..73 {
            assert!((x1[i] - stitched[i + 1]).abs() < 1e-15);
        }
        // Half-period shift against a dense reference evaluation of the same
        // piecewise-linear curve.
        let (xh, _) = t.predict(0.5, &grid);
        let means = t.means();
        for (i, &g) in grid.iter().enumerate() {
            let u = (g + 0.5).rem_euclid(1.0) * 37.0;
            let k = u.floor() as usize;
            let f = u - k as f64;
            let want = means[k % 37] * (1.0 - f) + means[(k + 1) % 37] * f;
            assert!((xh[i] - want).abs() < 1e-12);
        }
        // Maximum and minimum trade places.
        let argmax = |v: &[f64]| {
            v[..37]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        let a0 = argmax(&x0) as f64 / 37.0;
        let ah = argmax(&xh) as f64 / 37.0;
        assert!((wrap_charge(a0 - ah).abs() - 0.5).abs() < 0.03);
    }

    #[test]
    fn predict_is_periodic_in_theta() {
        let t = Template::from_model(&CurveModel::default(), 37, 0.02, 1).unwrap();
        let grid = ScanSchedule::default().bias_grid();
        for i in 0..200 {
            let th = -0.5 + i as f64 / 200.0 + 0.0013;
            let (a, sa) = t.predict(th, &grid);
            let (b, sb) = t.predict(th + 1.0, &grid);
            for k in 0..grid.len() {
                assert!((a[k] - b[k]).abs() < 1e-12);
                assert!((sa[k] - sb[k]).abs() < 1e-12);
            }
        }
    }
}
